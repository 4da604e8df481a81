//! Brute-force references checked against the fast paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aan::sim_loss_single;
use crate::error::Result;
use crate::eval::metrics::{auroc, auroc_pairwise};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// `−(1/P) Σᵢ Σ_{j≠i} cos(xᵢ, xⱼ)` by a double loop; zero-norm pairs count 0.
pub fn sim_pairwise(tokens: &Tensor) -> f64 {
    let p = tokens.rows();
    let norm = |i: usize| tokens.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i == j {
                continue;
            }
            let (ni, nj) = (norm(i), norm(j));
            if ni == 0.0 || nj == 0.0 {
                continue;
            }
            let dot: f64 = tokens.row_slice(i).iter().zip(tokens.row_slice(j)).map(|(a, b)| a * b).sum();
            total += dot / (ni * nj);
        }
    }
    -total / p as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub instances: usize,
    pub auroc_max_diff: f64,
    pub sim_max_diff: f64,
}

/// Random AUROC instances (`M ≤ 64`, scores on a coarse grid so ties occur)
/// and random patch-token sets.
pub fn run_oracles(instances: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut auroc_max_diff: f64 = 0.0;
    let mut sim_max_diff: f64 = 0.0;
    for _ in 0..instances {
        let m = rng.random_range(2..=64);
        let scores: Vec<f64> = (0..m).map(|_| rng.random_range(0..8) as f64 * 0.25).collect();
        let mut flags: Vec<bool> = (0..m).map(|_| rng.random_bool(0.4)).collect();
        flags[0] = true;
        flags[1] = false;
        let fast = auroc(&scores, &flags)?.expect("both classes present");
        let slow = auroc_pairwise(&scores, &flags)?.expect("both classes present");
        auroc_max_diff = auroc_max_diff.max((fast - slow).abs());

        let p = rng.random_range(2..=16);
        let d = rng.random_range(1..=8);
        let tokens = Tensor::randn(p, d, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(tokens.clone());
        let l = sim_loss_single(&mut tape, x)?;
        sim_max_diff = sim_max_diff.max((tape.value(l).item() - sim_pairwise(&tokens)).abs());
    }
    Ok(OracleReport {
        instances,
        auroc_max_diff,
        sim_max_diff,
    })
}
