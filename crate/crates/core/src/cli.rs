//! Command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::engine::{gradient_suite, SUITE_BACKBONE};
use crate::eval::report::emit_reports;
use crate::eval::{run_experiment, RunSummary};
use crate::oracle::run_oracles;

#[derive(Debug, Parser)]
#[command(name = "owtta", version, about = "Open-world test-time adaptation on synthetic streams")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Adapt over one stream and write curve.csv and summary.json.
    Run(RunArgs),
    /// Finite-difference check of every loss on the toy model.
    Gradcheck(GradcheckArgs),
    /// Grid over one hyperparameter, one full run per value.
    Sweep(SweepArgs),
    /// Compare the fast AUROC and similarity loss against brute-force references.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// TOML config; defaults are used when omitted.
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batches: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub lambda_first: Option<f64>,
    #[arg(long)]
    pub lambda_second: Option<f64>,
    #[arg(long)]
    pub beta_ood: Option<f64>,
    #[arg(long)]
    pub beta_sim: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
}

impl Overrides {
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.stream.seed = v;
        }
        if let Some(v) = self.batches {
            cfg.stream.batches = v;
        }
        if let Some(v) = self.alpha {
            cfg.adapt.fusion.alpha = v;
        }
        if let Some(v) = self.threshold {
            cfg.adapt.fusion.threshold = Some(v);
        }
        let w = &mut cfg.adapt.weights;
        for (slot, v) in [
            (&mut w.lambda_first, self.lambda_first),
            (&mut w.lambda_second, self.lambda_second),
            (&mut w.beta_ood, self.beta_ood),
            (&mut w.beta_sim, self.beta_sim),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if let Some(v) = self.rho {
            cfg.adapt.sam.rho = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also write the adapted model to this checkpoint file.
    #[arg(long)]
    pub save_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Alpha,
    LambdaFirst,
    LambdaSecond,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, value_enum, default_value = "alpha")]
    pub param: SweepParam,
    /// Comma-separated grid; defaults to 0,0.3,0.5,0.7,1 for alpha and
    /// 0,0.001,0.01,0.1,1 for the lambdas.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    /// Write the table as CSV here as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 200)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

pub fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Run(a) => run(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Sweep(a) => sweep(a),
        Command::Oracle(a) => oracle(a),
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn print_summary(s: &RunSummary) {
    println!("source accuracy  {:.4}", s.source_accuracy);
    println!("{:<8} {:>8} {:>8} {:>8}", "", "ACC", "AUROC", "H");
    for (name, m) in [("frozen", &s.frozen), ("adapted", &s.adapted)] {
        println!("{:<8} {:>8} {:>8} {:>8}", name, fmt(m.acc), fmt(m.auroc), fmt(m.h_score));
    }
    println!(
        "AUROC first/last quarter  {} / {}",
        fmt(s.first_quarter_auroc),
        fmt(s.last_quarter_auroc)
    );
}

fn run(a: RunArgs) -> anyhow::Result<()> {
    let cfg = a.overrides.resolve()?;
    let outcome = run_experiment(&cfg)?;
    let paths = emit_reports(&outcome.reports, &outcome.stream, &outcome.summary, &a.out)?;
    if let Some(path) = &a.save_model {
        checkpoint::save(&outcome.state, path).with_context(|| format!("saving model to {}", path.display()))?;
    }
    print_summary(&outcome.summary);
    println!("wrote {} and {}", paths.csv.display(), paths.json.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let report = gradient_suite(&SUITE_BACKBONE, a.batch, a.step)?;
    println!("{:<8} {:<8} {:>12}", "loss", "group", "max rel err");
    for e in &report.entries {
        println!("{:<8} {:<8} {:>12.3e}", e.objective.name(), e.group.name(), e.max_rel_error);
    }
    let worst = report.max_error();
    println!("max relative error {worst:.3e}");
    if worst.is_nan() || worst >= a.tolerance {
        bail!("gradient check failed: {worst:.3e} >= {:.1e}", a.tolerance);
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let base = a.overrides.resolve()?;
    let values = if a.values.is_empty() {
        match a.param {
            SweepParam::Alpha => vec![0.0, 0.3, 0.5, 0.7, 1.0],
            _ => vec![0.0, 0.001, 0.01, 0.1, 1.0],
        }
    } else {
        a.values.clone()
    };
    let name = match a.param {
        SweepParam::Alpha => "alpha",
        SweepParam::LambdaFirst => "lambda_first",
        SweepParam::LambdaSecond => "lambda_second",
    };
    let rows = values
        .par_iter()
        .map(|&v| {
            let mut cfg = base;
            match a.param {
                SweepParam::Alpha => cfg.adapt.fusion.alpha = v,
                SweepParam::LambdaFirst => cfg.adapt.weights.lambda_first = v,
                SweepParam::LambdaSecond => cfg.adapt.weights.lambda_second = v,
            }
            cfg.validate()?;
            Ok((v, run_experiment(&cfg)?.summary.adapted))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let mut csv = format!("{name},acc,auroc,h_score\n");
    println!("{:>12} {:>8} {:>8} {:>8}", name, "ACC", "AUROC", "H");
    for (v, m) in &rows {
        println!("{:>12} {:>8} {:>8} {:>8}", v, fmt(m.acc), fmt(m.auroc), fmt(m.h_score));
        let cell = |x: Option<f64>| x.map(|x| x.to_string()).unwrap_or_default();
        csv.push_str(&format!("{v},{},{},{}\n", cell(m.acc), cell(m.auroc), cell(m.h_score)));
    }
    if let Some(path) = &a.out {
        std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn oracle(a: OracleArgs) -> anyhow::Result<()> {
    let r = run_oracles(a.instances, a.seed)?;
    println!("instances            {}", r.instances);
    println!("AUROC max abs diff   {:.3e}", r.auroc_max_diff);
    println!("sim loss max diff    {:.3e}", r.sim_max_diff);
    if !(r.auroc_max_diff < 1e-12 && r.sim_max_diff < 1e-12) {
        bail!("fast path disagrees with brute force");
    }
    Ok(())
}
