//! Online adaptation loop.
//!
//! Each batch is adapted with a two-pass sharpness-aware step: the first
//! pass measures the gradient of `ℒ₁`, the parameters move by
//! `ε̂ = ρ·g/‖g‖` to a nearby worst case, the second pass takes the
//! gradient of `ℒ₂` there, and the step is applied from the original
//! parameters. Predictions come from the first forward unless
//! `predict_after_update` is set.

use serde::{Deserialize, Serialize};

use crate::backbone::{BoundModel, ModelState, ParamGroup};
use crate::error::{Error, Result};
use crate::eval::stream::Batch;
use crate::hln::{fuse_tape, ood_branch, ood_loss, ood_mask, FusionConfig};
use crate::losses::{entropy_rows, self_weighted_entropy_tape, self_weights, weighted_sum, LossWeights, Weighting};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-group SGD step sizes.
///
/// The defaults suit the toy backbone and the synthetic streams; [`LearningRates::VIT_B16`]
/// holds the rates used for a full-size ViT-B/16.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub norm: f64,
    pub aan: f64,
    pub psi: f64,
    pub ladder: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            norm: 1e-5,
            aan: 3e-6,
            psi: 10.0,
            ladder: 3.0,
        }
    }
}

impl LearningRates {
    pub const VIT_B16: LearningRates = LearningRates {
        norm: 0.01,
        aan: 0.0005,
        psi: 0.1,
        ladder: 0.001,
    };

    pub const ZERO: LearningRates = LearningRates {
        norm: 0.0,
        aan: 0.0,
        psi: 0.0,
        ladder: 0.0,
    };

    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Norm => self.norm,
            ParamGroup::Aan => self.aan,
            ParamGroup::Psi => self.psi,
            ParamGroup::Ladder => self.ladder,
            ParamGroup::Backbone | ParamGroup::Classifier => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in ParamGroup::TRAINABLE {
            let lr = self.get(g);
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("learning rate for {} must be finite and nonnegative, got {lr}", g.name())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamConfig {
    pub rho: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig { rho: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Two passes: `ℒ₁` at `Θ`, `ℒ₂` at `Θ + ε̂`.
    #[default]
    Sam,
    /// One pass on `ℒ_entropy + β₁ℒ_OOD + β₂ℒ_sim`.
    Single,
}

/// Which prediction the entropy objective is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyTarget {
    /// `softmax(𝒞(c_cls^(L)))`.
    #[default]
    Base,
    /// `p^final`, the fused prediction.
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub mode: UpdateMode,
    pub lr: LearningRates,
    pub sam: SamConfig,
    pub weights: LossWeights,
    pub fusion: FusionConfig,
    pub use_aan: bool,
    pub use_hln: bool,
    pub adapt_norm: bool,
    pub differentiate_weights: bool,
    pub predict_after_update: bool,
    pub entropy_target: EntropyTarget,
    /// Restrict the entropy objective to samples below the entropy threshold.
    pub entropy_filter: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            mode: UpdateMode::Sam,
            lr: LearningRates::default(),
            sam: SamConfig::default(),
            weights: LossWeights::default(),
            fusion: FusionConfig::default(),
            use_aan: true,
            use_hln: true,
            adapt_norm: true,
            differentiate_weights: false,
            predict_after_update: false,
            entropy_target: EntropyTarget::Base,
            entropy_filter: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        self.lr.validate()?;
        self.weights.validate()?;
        self.fusion.validate(classes)?;
        if !(self.sam.rho >= 0.0 && self.sam.rho.is_finite()) {
            return Err(Error::config(format!("rho must be finite and nonnegative, got {}", self.sam.rho)));
        }
        Ok(())
    }

    /// Groups that receive gradient updates under this configuration.
    pub fn trainable(&self) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        if self.adapt_norm {
            out.push(ParamGroup::Norm);
        }
        if self.use_aan {
            out.push(ParamGroup::Aan);
        }
        if self.use_hln {
            out.extend([ParamGroup::Psi, ParamGroup::Ladder]);
        }
        out
    }

    fn weighting<'a>(&self, fixed: Option<&'a [f64]>) -> Weighting<'a> {
        match fixed {
            Some(w) => Weighting::Fixed(w),
            None if self.differentiate_weights => Weighting::Differentiable,
            None => Weighting::Detached,
        }
    }
}

/// Rows entering the entropy objective when filtering; `None` means all rows.
fn reliable_rows(mask: &[bool], filter: bool) -> Option<Vec<usize>> {
    filter.then(|| (0..mask.len()).filter(|&i| !mask[i]).collect())
}

/// Scalar objectives that can be built from one pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Entropy,
    Ood,
    Sim,
    First,
    Second,
    Total,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::Entropy,
        Objective::Ood,
        Objective::Sim,
        Objective::First,
        Objective::Second,
        Objective::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Entropy => "entropy",
            Objective::Ood => "ood",
            Objective::Sim => "sim",
            Objective::First => "first",
            Objective::Second => "second",
            Objective::Total => "total",
        }
    }
}

/// Constants a pass can be pinned to, so that repeated evaluations differ
/// only through the parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pins<'a> {
    pub mask: Option<&'a [bool]>,
    pub weights: Option<&'a [f64]>,
}

/// One forward over a batch with every loss term on the tape.
pub struct Pass {
    pub tape: Tape,
    pub model: BoundModel,
    pub p_base: Var,
    pub p_final: Var,
    pub base_entropy: Vec<f64>,
    pub mask: Vec<bool>,
    pub entropy: Var,
    pub ood: Var,
    pub sim: Var,
}

impl Pass {
    pub fn build(state: &ModelState, grids: &[Tensor], cfg: &AdaptConfig, pins: Pins<'_>) -> Result<Pass> {
        let classes = state.config.classes;
        let mut tape = Tape::new();
        let model = state.bind(&mut tape, &cfg.trainable());
        let fwd = model.forward_collect(&mut tape, grids, cfg.use_aan)?;
        let p_base = tape.softmax_rows(fwd.logits)?;
        let h_base = entropy_rows(&mut tape, p_base)?;
        let base_entropy = tape.value(h_base).data().to_vec();
        let mask = match pins.mask {
            Some(m) => m.to_vec(),
            None => ood_mask(&base_entropy, cfg.fusion.threshold_for(classes)),
        };

        let (p_final, ood) = if cfg.use_hln {
            let branch = ood_branch(&mut tape, &model, &fwd.trace.cls)?;
            let p_final = fuse_tape(&mut tape, p_base, branch.probs, cfg.fusion.alpha)?;
            (p_final, ood_loss(&mut tape, branch.entropy, &mask)?)
        } else {
            (p_base, tape.constant(Tensor::scalar(0.0)))
        };

        let h_target = match cfg.entropy_target {
            EntropyTarget::Base => h_base,
            EntropyTarget::Fused if p_final == p_base => h_base,
            EntropyTarget::Fused => entropy_rows(&mut tape, p_final)?,
        };
        let entropy = match reliable_rows(&mask, cfg.entropy_filter) {
            None => self_weighted_entropy_tape(&mut tape, h_target, cfg.weighting(pins.weights))?,
            Some(rows) if rows.is_empty() => tape.constant(Tensor::scalar(0.0)),
            Some(rows) => {
                let parts = rows
                    .iter()
                    .map(|&r| tape.slice_rows(h_target, r, 1))
                    .collect::<Result<Vec<_>>>()?;
                let selected = tape.concat(&parts, crate::tape::Axis::Rows)?;
                self_weighted_entropy_tape(&mut tape, selected, cfg.weighting(pins.weights))?
            }
        };

        let sim = if cfg.use_aan {
            let last = *fwd.trace.tokens.last().expect("at least one layer");
            crate::aan::sim_loss(&mut tape, last, grids.len(), state.config.patches)?
        } else {
            tape.constant(Tensor::scalar(0.0))
        };

        Ok(Pass {
            tape,
            model,
            p_base,
            p_final,
            base_entropy,
            mask,
            entropy,
            ood,
            sim,
        })
    }

    pub fn objective(&mut self, which: Objective, w: &LossWeights) -> Result<Var> {
        let (e, o, s) = (self.entropy, self.ood, self.sim);
        let terms: &[(Var, f64)] = match which {
            Objective::Entropy => &[(e, 1.0)],
            Objective::Ood => &[(o, 1.0)],
            Objective::Sim => &[(s, 1.0)],
            Objective::First => &[(e, 1.0), (o, w.lambda_first), (s, 1.0)],
            Objective::Second => &[(e, 1.0), (o, w.lambda_second)],
            Objective::Total => &[(e, 1.0), (o, w.beta_ood), (s, w.beta_sim)],
        };
        weighted_sum(&mut self.tape, terms)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.tape.value(v).item()
    }

    /// Flattened gradient of each group, after [`Tape::backward`].
    pub fn group_grads(&self, groups: &[ParamGroup]) -> Vec<Vec<f64>> {
        groups
            .iter()
            .map(|&g| {
                self.model
                    .group_vars(g)
                    .into_iter()
                    .flat_map(|v| self.tape.grad(v).into_data())
                    .collect()
            })
            .collect()
    }

    pub fn predictions(&self) -> Predictions {
        Predictions::from_probs(self.tape.value(self.p_final))
    }
}

/// Fused probabilities, entropy scores and argmax labels for a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub probs: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub preds: Vec<usize>,
}

impl Predictions {
    pub fn from_probs(p: &Tensor) -> Predictions {
        let probs: Vec<Vec<f64>> = (0..p.rows()).map(|r| p.row_slice(r).to_vec()).collect();
        let scores = probs.iter().map(|row| crate::hln::ood_score(row)).collect();
        let preds = probs.iter().map(|row| argmax(row)).collect();
        Predictions { probs, scores, preds }
    }
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Forward-only prediction with the current parameters.
pub fn predict(state: &ModelState, grids: &[Tensor], cfg: &AdaptConfig) -> Result<Predictions> {
    Ok(Pass::build(state, grids, cfg, Pins::default())?.predictions())
}

/// `ε̂ = ρ·g/‖g‖₂`, or zero when `‖g‖₂ < 1e-12`. Returns the perturbation and
/// whether it degenerated.
pub fn sam_perturbation(grads: &[f64], rho: f64) -> (Vec<f64>, bool) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm < SAM_MIN_NORM || rho == 0.0 {
        return (vec![0.0; grads.len()], norm < SAM_MIN_NORM);
    }
    (grads.iter().map(|g| g * rho / norm).collect(), false)
}

pub const SAM_MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub entropy: f64,
    pub ood: f64,
    pub sim: f64,
    /// `ℒ₁` in two-pass mode, the single objective otherwise.
    pub first: f64,
    /// `ℒ₂` at the perturbed parameters; absent in single-pass mode.
    pub second: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupUpdate {
    pub group: ParamGroup,
    /// `‖η·∇‖₂` of the applied step.
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub batch: usize,
    pub predictions: Predictions,
    pub mask_count: usize,
    pub losses: LossRecord,
    pub updates: Vec<GroupUpdate>,
    /// `‖ε̂‖₂`.
    pub eps_norm: f64,
    /// The first-pass gradient was too small to define `ε̂`.
    pub sam_degenerate: bool,
    /// A non-finite loss or gradient was met; parameters were left unchanged.
    pub skipped: bool,
}

impl AdaptReport {
    pub fn len(&self) -> usize {
        self.predictions.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.preds.is_empty()
    }
}

fn add_into(state: &mut ModelState, groups: &[ParamGroup], deltas: &[Vec<f64>], scale: &[f64]) -> Result<()> {
    for ((&g, d), &s) in groups.iter().zip(deltas).zip(scale) {
        let mut flat = state.flatten(g);
        for (p, x) in flat.iter_mut().zip(d) {
            *p += s * x;
        }
        state.unflatten(g, &flat)?;
    }
    Ok(())
}

fn all_finite(groups: &[Vec<f64>]) -> bool {
    groups.iter().flatten().all(|x| x.is_finite())
}

/// Adapts `state` on one batch and reports the batch's predictions.
pub fn adapt_batch(state: &mut ModelState, grids: &[Tensor], cfg: &AdaptConfig, index: usize) -> Result<AdaptReport> {
    cfg.validate(state.config.classes)?;
    let groups = cfg.trainable();

    let mut first = Pass::build(state, grids, cfg, Pins::default())?;
    let mut predictions = first.predictions();
    let mask = first.mask.clone();
    let mut losses = LossRecord {
        entropy: first.scalar(first.entropy),
        ood: first.scalar(first.ood),
        sim: first.scalar(first.sim),
        ..LossRecord::default()
    };
    let mut report = AdaptReport {
        batch: index,
        predictions: predictions.clone(),
        mask_count: mask.iter().filter(|&&m| m).count(),
        losses,
        updates: Vec::new(),
        eps_norm: 0.0,
        sam_degenerate: false,
        skipped: false,
    };

    let objective = match cfg.mode {
        UpdateMode::Sam => Objective::First,
        UpdateMode::Single => Objective::Total,
    };
    let l1 = first.objective(objective, &cfg.weights)?;
    losses.first = first.scalar(l1);
    report.losses = losses;
    if groups.is_empty() {
        return Ok(report);
    }
    if !losses.first.is_finite() {
        report.skipped = true;
        return Ok(report);
    }
    first.tape.backward(l1)?;
    let g1 = first.group_grads(&groups);
    drop(first);
    if !all_finite(&g1) {
        report.skipped = true;
        return Ok(report);
    }

    let step_grads = match cfg.mode {
        UpdateMode::Single => g1,
        UpdateMode::Sam => {
            let flat: Vec<f64> = g1.iter().flatten().copied().collect();
            let (eps, degenerate) = sam_perturbation(&flat, cfg.sam.rho);
            report.sam_degenerate = degenerate;
            report.eps_norm = eps.iter().map(|e| e * e).sum::<f64>().sqrt();
            let mut split = Vec::with_capacity(groups.len());
            let mut offset = 0;
            for g in &g1 {
                split.push(eps[offset..offset + g.len()].to_vec());
                offset += g.len();
            }

            let saved: Vec<Vec<f64>> = groups.iter().map(|&g| state.flatten(g)).collect();
            add_into(state, &groups, &split, &vec![1.0; groups.len()])?;
            let second = (|| -> Result<(f64, Vec<Vec<f64>>)> {
                let mut pass = Pass::build(state, grids, cfg, Pins { mask: Some(&mask), weights: None })?;
                let l2 = pass.objective(Objective::Second, &cfg.weights)?;
                let value = pass.scalar(l2);
                if !value.is_finite() {
                    return Ok((value, Vec::new()));
                }
                pass.tape.backward(l2)?;
                Ok((value, pass.group_grads(&groups)))
            })();
            for (&g, values) in groups.iter().zip(&saved) {
                state.unflatten(g, values)?;
            }
            let (l2, g2) = second?;
            report.losses.second = Some(l2);
            if !l2.is_finite() || !all_finite(&g2) {
                report.skipped = true;
                return Ok(report);
            }
            g2
        }
    };

    let rates: Vec<f64> = groups.iter().map(|&g| -cfg.lr.get(g)).collect();
    add_into(state, &groups, &step_grads, &rates)?;
    report.updates = groups
        .iter()
        .zip(&step_grads)
        .zip(&rates)
        .map(|((&group, g), &r)| GroupUpdate {
            group,
            norm: r.abs() * g.iter().map(|x| x * x).sum::<f64>().sqrt(),
        })
        .collect();

    if cfg.predict_after_update {
        predictions = predict(state, grids, cfg)?;
        report.predictions = predictions;
    }
    Ok(report)
}

/// Sequential fold of [`adapt_batch`]; only the token grids of each batch are read.
pub fn run_stream(state: &mut ModelState, stream: &[Batch], cfg: &AdaptConfig) -> Result<Vec<AdaptReport>> {
    stream
        .iter()
        .enumerate()
        .map(|(t, b)| adapt_batch(state, &b.grids, cfg, t))
        .collect()
}

/// Predictions of the unadapted model for every batch.
pub fn frozen_predictions(state: &ModelState, stream: &[Batch], cfg: &AdaptConfig) -> Result<Vec<Predictions>> {
    stream.iter().map(|b| predict(state, &b.grids, cfg)).collect()
}

/// Worst relative error per objective and group of a finite-difference check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub objective: Objective,
    pub group: ParamGroup,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

/// Checks the taped gradients of every objective against central differences
/// over all trainable parameters. The mask and the sample weights are pinned
/// to their values at `state`, so the objectives are smooth in the parameters.
pub fn model_grad_check(state: &ModelState, grids: &[Tensor], cfg: &AdaptConfig, h: f64) -> Result<GradCheckReport> {
    if !(1e-8..=1e-4).contains(&h) {
        return Err(Error::config(format!("finite-difference step {h} outside [1e-8, 1e-4]")));
    }
    let groups = cfg.trainable();
    let base = Pass::build(state, grids, cfg, Pins::default())?;
    let mask = base.mask.clone();
    let weights = if cfg.differentiate_weights {
        None
    } else {
        let h_target = match cfg.entropy_target {
            EntropyTarget::Base => base.base_entropy.clone(),
            EntropyTarget::Fused => {
                let p = base.tape.value(base.p_final);
                (0..p.rows()).map(|r| crate::losses::shannon(p.row_slice(r))).collect()
            }
        };
        let h_target = match reliable_rows(&mask, cfg.entropy_filter) {
            None => h_target,
            Some(rows) => rows.iter().map(|&r| h_target[r]).collect(),
        };
        Some(self_weights(&h_target))
    };
    drop(base);
    let pins = Pins {
        mask: Some(&mask),
        weights: weights.as_deref(),
    };

    let mut analytic = Vec::new();
    for obj in Objective::ALL {
        let mut pass = Pass::build(state, grids, cfg, pins)?;
        let l = pass.objective(obj, &cfg.weights)?;
        pass.tape.backward(l)?;
        analytic.push(pass.group_grads(&groups));
    }

    let eval_all = |s: &ModelState| -> Result<Vec<f64>> {
        let mut pass = Pass::build(s, grids, cfg, pins)?;
        Objective::ALL
            .iter()
            .map(|&o| {
                let v = pass.objective(o, &cfg.weights)?;
                Ok(pass.scalar(v))
            })
            .collect()
    };

    let mut worst = vec![vec![0.0f64; groups.len()]; Objective::ALL.len()];
    let mut probe = state.clone();
    for (gi, &g) in groups.iter().enumerate() {
        let point = state.flatten(g);
        let mut values = point.clone();
        for i in 0..point.len() {
            values[i] = point[i] + h;
            probe.unflatten(g, &values)?;
            let up = eval_all(&probe)?;
            values[i] = point[i] - h;
            probe.unflatten(g, &values)?;
            let down = eval_all(&probe)?;
            values[i] = point[i];
            for (oi, (u, d)) in up.iter().zip(&down).enumerate() {
                let numeric = (u - d) / (2.0 * h);
                let err = crate::gradcheck::relative_error(analytic[oi][gi][i], numeric);
                worst[oi][gi] = worst[oi][gi].max(err);
            }
        }
        probe.unflatten(g, &point)?;
    }

    let entries = Objective::ALL
        .iter()
        .enumerate()
        .flat_map(|(oi, &objective)| {
            let worst = &worst;
            groups.iter().enumerate().map(move |(gi, &group)| GradCheckEntry {
                objective,
                group,
                max_rel_error: worst[oi][gi],
            })
        })
        .collect();
    Ok(GradCheckReport { entries })
}

/// Toy model used by the gradient suite: 2 layers, `d = 16`, `P = 8`, `C = 4`.
pub const SUITE_BACKBONE: crate::backbone::BackboneConfig = crate::backbone::BackboneConfig {
    layers: 2,
    dim: 16,
    heads: 2,
    patches: 8,
    classes: 4,
    input_dim: 16,
    seed: 17,
};

/// Finite-difference check of every objective on a seeded model whose
/// adapters are jittered off their identity start. The entropy threshold is
/// set between the middle base entropies so the OOD mask is partial.
pub fn gradient_suite(backbone: &crate::backbone::BackboneConfig, batch: usize, h: f64) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(backbone.seed);
    let mut state = crate::backbone::init_backbone(backbone)?;
    jitter_trainable(&mut state, 0.1, &mut rng)?;
    let grids: Vec<Tensor> = (0..batch.max(2))
        .map(|_| Tensor::randn(backbone.patches, backbone.input_dim, 1.0, &mut rng))
        .collect();
    let mut cfg = AdaptConfig::default();
    let mut h_base = Pass::build(&state, &grids, &cfg, Pins::default())?.base_entropy;
    h_base.sort_by(f64::total_cmp);
    let mid = h_base.len() / 2;
    cfg.fusion.threshold = Some(0.5 * (h_base[mid - 1] + h_base[mid]));
    model_grad_check(&state, &grids, &cfg, h)
}

/// Adds `N(0, std²)` noise to every trainable group, moving the adapters
/// away from their identity initialisation.
pub fn jitter_trainable<R: rand::Rng + ?Sized>(state: &mut ModelState, std: f64, rng: &mut R) -> Result<()> {
    for g in ParamGroup::TRAINABLE {
        let mut flat = state.flatten(g);
        let noise = Tensor::randn(1, flat.len(), std, rng);
        for (p, n) in flat.iter_mut().zip(noise.data()) {
            *p += n;
        }
        state.unflatten(g, &flat)?;
    }
    Ok(())
}
