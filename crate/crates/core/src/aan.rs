//! Attention affine adapter.
//!
//! At every layer the patch tokens are mean-pooled, passed through a
//! token-feature net (`d → d`), added to the layer's class token, and fed
//! to a single affine head `Φ: d → 6d` whose output is split into
//! `[γ_Q, β_Q, γ_K, β_K, γ_V, β_V]`. The scales and shifts are applied
//! feature-wise to the layer's Q, K and V before attention; a `d`-vector
//! covers all heads, each head seeing its own `d/H` segment.
//!
//! `Φ` starts with zero weights and bias `[1; 0; 1; 0; 1; 0]`, so a fresh
//! adapter is the identity on Q, K and V.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{BoundLinear, Linear};
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;

pub const AFFINE_CHUNKS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct AanParams {
    /// Token-feature net applied to pooled patch tokens.
    pub feature: Linear,
    /// `Φ`, producing the six affine vectors.
    pub affine: Linear,
}

impl AanParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        AanParams {
            feature: Linear::random(dim, dim, 1.0, rng),
            affine: identity_affine(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.feature.fan_in()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.feature.tensors().to_vec();
        out.extend(self.affine.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.feature.tensors_mut().into_iter().collect();
        out.extend(self.affine.tensors_mut());
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAan {
        BoundAan {
            feature: self.feature.bind(tape, trainable),
            affine: self.affine.bind(tape, trainable),
            dim: self.dim(),
        }
    }
}

/// `Φ` with zero weights and identity-affine bias.
pub fn identity_affine(dim: usize) -> Linear {
    let mut phi = Linear::zeros(dim, AFFINE_CHUNKS * dim);
    for chunk in [0, 2, 4] {
        for j in 0..dim {
            phi.bias.set(0, chunk * dim + j, 1.0);
        }
    }
    phi
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAan {
    pub feature: BoundLinear,
    pub affine: BoundLinear,
    dim: usize,
}

/// Scales and shifts for one sample at one layer, each a `1×d` row.
#[derive(Debug, Clone, Copy)]
pub struct AffineSet {
    pub gamma_q: Var,
    pub beta_q: Var,
    pub gamma_k: Var,
    pub beta_k: Var,
    pub gamma_v: Var,
    pub beta_v: Var,
}

impl AffineSet {
    pub fn vars(&self) -> [Var; 6] {
        [self.gamma_q, self.beta_q, self.gamma_k, self.beta_k, self.gamma_v, self.beta_v]
    }
}

impl BoundAan {
    /// Mean over patch tokens (`P×d` → `1×d`), through the feature net,
    /// plus the class token.
    pub fn pool_and_combine(&self, tape: &mut Tape, patches: Var, cls: Var) -> Result<Var> {
        let pooled = tape.mean(patches, Axis::Rows)?;
        self.combine(tape, pooled, cls)
    }

    /// Row-wise `feature(pooled) + cls` for already pooled inputs (`N×d` each).
    pub fn combine(&self, tape: &mut Tape, pooled: Var, cls: Var) -> Result<Var> {
        if tape.shape(pooled)[1] != self.dim || tape.shape(pooled) != tape.shape(cls) {
            return Err(Error::ShapeMismatch {
                op: "aan combine",
                lhs: tape.shape(pooled),
                rhs: tape.shape(cls),
            });
        }
        let f = self.feature.apply(tape, pooled)?;
        tape.add(f, cls)
    }

    /// `Φ(feature)`, one `6d` row per input row.
    pub fn affine_rows(&self, tape: &mut Tape, feature: Var) -> Result<Var> {
        if tape.shape(feature)[1] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "aan affine",
                lhs: tape.shape(feature),
                rhs: [1, self.dim],
            });
        }
        self.affine.apply(tape, feature)
    }

    /// Splits row `row` of a `Φ` output into its six vectors.
    pub fn split(&self, tape: &mut Tape, affine_rows: Var, row: usize) -> Result<AffineSet> {
        let r = tape.slice_rows(affine_rows, row, 1)?;
        let d = self.dim;
        let mut parts = [r; AFFINE_CHUNKS];
        for (i, p) in parts.iter_mut().enumerate() {
            *p = tape.slice_cols(r, i * d, d)?;
        }
        Ok(AffineSet {
            gamma_q: parts[0],
            beta_q: parts[1],
            gamma_k: parts[2],
            beta_k: parts[3],
            gamma_v: parts[4],
            beta_v: parts[5],
        })
    }

    /// `affine_params` for a single `1×d` feature.
    pub fn affine_params(&self, tape: &mut Tape, feature: Var) -> Result<AffineSet> {
        let rows = self.affine_rows(tape, feature)?;
        self.split(tape, rows, 0)
    }
}

/// `Q' = γ_Q ⊙ Q + β_Q`, likewise for K and V; rows are tokens.
pub fn apply_affine(tape: &mut Tape, q: Var, k: Var, v: Var, a: &AffineSet) -> Result<(Var, Var, Var)> {
    let mut one = |x: Var, g: Var, b: Var| -> Result<Var> {
        let scaled = tape.mul_row(x, g)?;
        tape.add_row(scaled, b)
    };
    Ok((one(q, a.gamma_q, a.beta_q)?, one(k, a.gamma_k, a.beta_k)?, one(v, a.gamma_v, a.beta_v)?))
}

/// Patch-similarity loss of one sample's `P×d` patch tokens:
/// `−(1/P) Σᵢ Σ_{j≠i} cos(xᵢ, xⱼ)`. Pairs with a zero-norm token count as 0
/// and are tallied in [`Tape::zero_norm_events`].
pub fn sim_loss_single(tape: &mut Tape, patches: Var) -> Result<Var> {
    let [p, _] = tape.shape(patches);
    if p < 2 {
        return Err(Error::config("similarity loss needs at least two patch tokens"));
    }
    let nonzero = (0..p).filter(|&i| tape.value(patches).row_slice(i).iter().any(|&x| x != 0.0)).count();
    let gram = tape.cosine_gram(patches)?;
    let total = tape.sum(gram)?;
    // Remove the self-similarities on the diagonal.
    let off_diag = tape.shift(total, -(nonzero as f64))?;
    tape.scale(off_diag, -1.0 / p as f64)
}

/// Batch mean of [`sim_loss_single`] over `n` samples stored as consecutive
/// blocks of `1 + p` token rows (class token first).
pub fn sim_loss(tape: &mut Tape, tokens: Var, n: usize, p: usize) -> Result<Var> {
    let [rows, _] = tape.shape(tokens);
    if rows != n * (p + 1) || n == 0 {
        return Err(Error::ShapeMismatch {
            op: "sim_loss",
            lhs: tape.shape(tokens),
            rhs: [n * (p + 1), 0],
        });
    }
    let mut per_sample = Vec::with_capacity(n);
    for s in 0..n {
        let patches = tape.slice_rows(tokens, s * (p + 1) + 1, p)?;
        per_sample.push(sim_loss_single(tape, patches)?);
    }
    let stacked = tape.concat(&per_sample, Axis::Rows)?;
    tape.mean(stacked, Axis::Rows)
}
