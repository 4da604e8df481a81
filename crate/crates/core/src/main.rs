fn main() -> std::process::ExitCode {
    owtta::cli::main()
}
