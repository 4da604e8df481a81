//! Entropy objectives and their weighted combinations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;

const SIMPLEX_TOL: f64 = 1e-6;

/// Coefficients of the composite losses.
///
/// `beta_ood`/`beta_sim` weight the single-pass objective
/// `ℒ_entropy + β₁ℒ_OOD + β₂ℒ_sim`; `lambda_first`/`lambda_second` weight the
/// OOD term in the two sharpness-aware passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub beta_ood: f64,
    pub beta_sim: f64,
    pub lambda_first: f64,
    pub lambda_second: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta_ood: 0.01,
            beta_sim: 1.0,
            lambda_first: 0.01,
            lambda_second: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_ood", self.beta_ood),
            ("beta_sim", self.beta_sim),
            ("lambda_first", self.lambda_first),
            ("lambda_second", self.lambda_second),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss weight {name} must be a finite nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar loss values of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub entropy: f64,
    pub ood: f64,
    pub sim: f64,
}

impl LossComponents {
    /// `ℒ_entropy + β₁ℒ_OOD + β₂ℒ_sim`.
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.entropy + w.beta_ood * self.ood + w.beta_sim * self.sim
    }

    /// First sharpness-aware pass: `ℒ_entropy + λ₁ℒ_OOD + ℒ_sim`.
    pub fn sam_first(&self, w: &LossWeights) -> f64 {
        self.entropy + w.lambda_first * self.ood + self.sim
    }

    /// Second sharpness-aware pass: `ℒ_entropy + λ₂ℒ_OOD`.
    pub fn sam_second(&self, w: &LossWeights) -> f64 {
        self.entropy + w.lambda_second * self.ood
    }
}

/// Shannon entropy with `0·log 0 = 0`; no validation.
pub fn shannon(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Entropy of a probability vector. Rejects inputs whose entries are
/// negative or whose sum is off by more than `1e-6`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::NotSimplex("empty vector".into()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::NotSimplex(format!("entries sum to {sum}")));
    }
    Ok(shannon(p))
}

/// Per-row entropy of a probability matrix, as an `N×1` column.
pub fn entropy_rows(tape: &mut Tape, probs: Var) -> Result<Var> {
    let classes = tape.shape(probs)[1] as f64;
    // 0·log 0 = 0 for underflowed entries; p ≥ 1e-284 is unchanged by the shift.
    let guarded = tape.shift(probs, 1e-300)?;
    let logp = tape.ln(guarded)?;
    let plogp = tape.mul(probs, logp)?;
    let mean = tape.mean(plogp, Axis::Cols)?;
    tape.scale(mean, -classes)
}

/// `wᵢ = N·e^{−ℋᵢ} / Σⱼ e^{−ℋⱼ}`.
pub fn self_weights(entropies: &[f64]) -> Vec<f64> {
    let n = entropies.len() as f64;
    let min = entropies.iter().cloned().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = entropies.iter().map(|h| (-(h - min)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| n * r / total).collect()
}

/// `Σᵢ wᵢ ℋᵢ` with the weights of [`self_weights`].
pub fn self_weighted_entropy(entropies: &[f64]) -> f64 {
    self_weights(entropies).iter().zip(entropies).map(|(w, h)| w * h).sum()
}

/// How the per-sample weights enter the taped objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting<'a> {
    /// Weights from the current entropies, treated as constants.
    Detached,
    /// Weights computed on the tape, so gradients flow through them.
    Differentiable,
    /// Caller-supplied constant weights.
    Fixed(&'a [f64]),
}

/// Taped self-weighted entropy of an `N×1` entropy column.
pub fn self_weighted_entropy_tape(tape: &mut Tape, entropies: Var, weighting: Weighting<'_>) -> Result<Var> {
    let [n, one] = tape.shape(entropies);
    if one != 1 {
        return Err(Error::ShapeMismatch {
            op: "self_weighted_entropy",
            lhs: tape.shape(entropies),
            rhs: [n, 1],
        });
    }
    let weights = match weighting {
        Weighting::Detached => {
            let w = self_weights(tape.value(entropies).data());
            tape.constant(Tensor::new(n, 1, w)?)
        }
        Weighting::Fixed(w) => tape.constant(Tensor::new(n, 1, w.to_vec())?),
        Weighting::Differentiable => {
            let row = tape.transpose(entropies)?;
            let neg = tape.scale(row, -1.0)?;
            let soft = tape.softmax_rows(neg)?;
            let w = tape.scale(soft, n as f64)?;
            tape.transpose(w)?
        }
    };
    let weighted = tape.mul(weights, entropies)?;
    tape.sum(weighted)
}

/// `Σ coefᵢ · termᵢ` on the tape; zero coefficients are skipped.
pub fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, c) in terms {
        if c == 0.0 {
            continue;
        }
        let scaled = if c == 1.0 { v } else { tape.scale(v, c)? };
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    Ok(match acc {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn entropy_closed_forms() {
        assert!(close(entropy(&[0.125; 8]).unwrap(), 8f64.ln(), 1e-15));
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let expected = -0.9 * 0.9f64.ln() - 0.1 * 0.1f64.ln();
        assert!(close(entropy(&[0.9, 0.1]).unwrap(), expected, 1e-15));
        assert!(close(expected, 0.3251, 1e-4));
    }

    #[test]
    fn entropy_rejects_non_simplex() {
        assert!(entropy(&[0.5, 0.6]).is_err());
        assert!(entropy(&[1.5, -0.5]).is_err());
        assert!(entropy(&[]).is_err());
        assert!(entropy(&[0.5, 0.5 + 5e-7]).is_ok());
    }

    #[test]
    fn uniform_entropies_give_unit_weights() {
        let h = [0.7; 5];
        assert!(self_weights(&h).iter().all(|&w| close(w, 1.0, 1e-15)));
        assert!(close(self_weighted_entropy(&h), 5.0 * 0.7, 1e-12));
    }

    #[test]
    fn single_sample_weight() {
        assert_eq!(self_weighted_entropy(&[1.3]), 1.3);
    }

    #[test]
    fn two_sample_closed_form() {
        let w = self_weights(&[0.0, LN_2]);
        assert!(close(w[0], 4.0 / 3.0, 1e-15));
        assert!(close(w[1], 2.0 / 3.0, 1e-15));
        let l = self_weighted_entropy(&[0.0, LN_2]);
        assert!(close(l, 2.0 / 3.0 * LN_2, 1e-15));
        assert!(close(l, 0.4621, 1e-4));
    }

    #[test]
    fn composite_arithmetic() {
        let w = LossWeights {
            beta_ood: 0.5,
            beta_sim: 0.1,
            lambda_first: 0.01,
            lambda_second: 0.001,
        };
        let c = LossComponents {
            entropy: 1.0,
            ood: -2.0,
            sim: -3.0,
        };
        assert!(close(c.total(&w), -0.3, 1e-15));
        let zero_beta = LossWeights {
            beta_ood: 0.0,
            beta_sim: 0.0,
            ..w
        };
        assert_eq!(c.total(&zero_beta), 1.0);
        assert_eq!(LossComponents::default().total(&w), 0.0);

        let first = LossComponents {
            entropy: 1.0,
            ood: 10.0,
            sim: -0.5,
        };
        assert!(close(first.sam_first(&w), 0.6, 1e-15));
        let no_l1 = LossWeights { lambda_first: 0.0, ..w };
        assert_eq!(first.sam_first(&no_l1), 0.5);
        assert_eq!(LossComponents::default().sam_first(&w), 0.0);

        let second = LossComponents {
            entropy: 2.0,
            ood: 100.0,
            sim: 7.0,
        };
        assert!(close(second.sam_second(&w), 2.1, 1e-15));
        let no_l2 = LossWeights { lambda_second: 0.0, ..w };
        assert_eq!(second.sam_second(&no_l2), 2.0);
        assert_eq!(LossComponents::default().sam_second(&w), 0.0);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            lambda_second: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn taped_entropy_rows_match_plain() {
        let mut tape = Tape::new();
        let p = Tensor::new(2, 3, vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8]).unwrap();
        let pv = tape.constant(p.clone());
        let h = entropy_rows(&mut tape, pv).unwrap();
        for r in 0..2 {
            assert!(close(tape.value(h).get(r, 0), entropy(p.row_slice(r)).unwrap(), 1e-15));
        }
    }

    #[test]
    fn taped_weighting_modes_agree_in_value() {
        let h = [0.3, 1.2, 0.9, 2.0];
        let mut tape = Tape::new();
        let hv = tape.param(Tensor::new(4, 1, h.to_vec()).unwrap());
        let a = self_weighted_entropy_tape(&mut tape, hv, Weighting::Detached).unwrap();
        let b = self_weighted_entropy_tape(&mut tape, hv, Weighting::Differentiable).unwrap();
        let w = self_weights(&h);
        let c = self_weighted_entropy_tape(&mut tape, hv, Weighting::Fixed(&w)).unwrap();
        let plain = self_weighted_entropy(&h);
        for v in [a, b, c] {
            assert!(close(tape.value(v).item(), plain, 1e-12));
        }
        // Detached weights: d/dHᵢ = wᵢ.
        tape.backward(a).unwrap();
        for (g, w) in tape.grad(hv).data().iter().zip(&w) {
            assert!(close(*g, *w, 1e-15));
        }
    }

    #[test]
    fn differentiable_weights_match_finite_differences() {
        let point = Tensor::new(4, 1, vec![0.3, 1.2, 0.9, 2.0]).unwrap();
        let err = crate::gradcheck::grad_check(
            |t, x| self_weighted_entropy_tape(t, x, Weighting::Differentiable),
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weights_sum_to_n_and_order_inversely(h in proptest::collection::vec(0.0f64..3.0, 1..40)) {
                let w = self_weights(&h);
                let total: f64 = w.iter().sum();
                prop_assert!((total - h.len() as f64).abs() < 1e-9);
                for i in 0..h.len() {
                    for j in 0..h.len() {
                        if h[i] < h[j] {
                            prop_assert!(w[i] > w[j]);
                        }
                    }
                }
            }

            #[test]
            fn loss_within_entropy_range(h in proptest::collection::vec(0.0f64..8f64.ln(), 1..40)) {
                let l = self_weighted_entropy(&h);
                prop_assert!(l >= 0.0);
                prop_assert!(l <= h.len() as f64 * 8f64.ln() + 1e-9);
            }
        }
    }
}
