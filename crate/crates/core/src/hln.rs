//! Ladder OOD branch.
//!
//! A single extractor `Ψ` maps the class token of every layer to an OOD
//! token; the ladder aggregator reads the concatenation of all `L` OOD
//! tokens (layer order `1..L`) and emits one `d`-vector, which goes through
//! the same classifier as the class token. The branch prediction is fused
//! with the base prediction, and the entropy of the fused distribution is
//! the OOD score.

use serde::{Deserialize, Serialize};

use crate::backbone::BoundModel;
use crate::error::{Error, Result};
use crate::layers::BoundLinear;
use crate::losses::{entropy_rows, shannon};
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;

/// Fusion weight of the base prediction and the entropy threshold of the OOD mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub alpha: f64,
    /// Absolute threshold; `None` means half the maximum entropy, `0.5·ln C`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            alpha: FusionConfig::ALPHA_HIGH,
            threshold: None,
        }
    }
}

impl FusionConfig {
    pub const ALPHA_HIGH: f64 = 0.7;
    pub const ALPHA_LOW: f64 = 0.3;

    pub fn threshold_for(&self, classes: usize) -> f64 {
        self.threshold.unwrap_or(0.5 * (classes as f64).ln())
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("fusion alpha {} outside [0, 1]", self.alpha)));
        }
        let thr = self.threshold_for(classes);
        let max = (classes as f64).ln();
        if !(0.0..=max).contains(&thr) {
            return Err(Error::config(format!("entropy threshold {thr} outside [0, ln C = {max}]")));
        }
        Ok(())
    }
}

/// `o⁽ˡ⁾ = Ψ(c⁽ˡ⁾)` for one class-token matrix (`N×d`).
pub fn extract_ood_token(tape: &mut Tape, psi: &BoundLinear, cls: Var) -> Result<Var> {
    let d = tape.shape(psi.weight)[0];
    if tape.shape(cls)[1] != d {
        return Err(Error::ShapeMismatch {
            op: "extract_ood_token",
            lhs: tape.shape(cls),
            rhs: [1, d],
        });
    }
    psi.apply(tape, cls)
}

/// `o^hln = ladder([o⁽¹⁾ | … | o⁽ᴸ⁾])`; `tokens` must hold exactly `L` entries.
pub fn aggregate(tape: &mut Tape, ladder: &BoundLinear, tokens: &[Var]) -> Result<Var> {
    let [fan_in, _] = tape.shape(ladder.weight);
    let width: usize = tokens.iter().map(|&t| tape.shape(t)[1]).sum();
    if tokens.is_empty() || width != fan_in {
        return Err(Error::ShapeMismatch {
            op: "ladder aggregate",
            lhs: [tokens.len(), width],
            rhs: [1, fan_in],
        });
    }
    let cat = tape.concat(tokens, Axis::Cols)?;
    ladder.apply(tape, cat)
}

/// Taped outputs of the OOD branch for a batch.
#[derive(Debug, Clone)]
pub struct OodBranch {
    pub ood_tokens: Vec<Var>,
    pub hln_token: Var,
    pub logits: Var,
    /// `p^OOD`, `N×C`.
    pub probs: Var,
    /// `ℋ^OOD`, `N×1`.
    pub entropy: Var,
}

/// Runs `Ψ` on every layer's class tokens, aggregates, and classifies with the shared head.
pub fn ood_branch(tape: &mut Tape, model: &BoundModel, cls_per_layer: &[Var]) -> Result<OodBranch> {
    if cls_per_layer.len() != model.config.layers {
        return Err(Error::ShapeMismatch {
            op: "ood_branch",
            lhs: [cls_per_layer.len(), 0],
            rhs: [model.config.layers, 0],
        });
    }
    let ood_tokens = cls_per_layer
        .iter()
        .map(|&c| extract_ood_token(tape, &model.psi, c))
        .collect::<Result<Vec<_>>>()?;
    let hln_token = aggregate(tape, &model.ladder, &ood_tokens)?;
    let (logits, probs) = ood_probs(tape, model, hln_token)?;
    let entropy = entropy_rows(tape, probs)?;
    Ok(OodBranch {
        ood_tokens,
        hln_token,
        logits,
        probs,
        entropy,
    })
}

/// `softmax(𝒞(o^hln))`, returning `(logits, probs)`.
pub fn ood_probs(tape: &mut Tape, model: &BoundModel, hln_token: Var) -> Result<(Var, Var)> {
    let logits = model.classify(tape, hln_token)?;
    let probs = tape.softmax_rows(logits)?;
    Ok((logits, probs))
}

/// `mᵢ = [ℋᵢ > thr]`.
pub fn ood_mask(entropies: &[f64], threshold: f64) -> Vec<bool> {
    entropies.iter().map(|&h| h > threshold).collect()
}

/// `ℒ_OOD = −Σ mᵢℋᵢ^OOD / Σ mᵢ` over an `N×1` entropy column. An empty mask
/// yields a constant zero with no gradient path.
pub fn ood_loss(tape: &mut Tape, ood_entropy: Var, mask: &[bool]) -> Result<Var> {
    let [n, _] = tape.shape(ood_entropy);
    if n != mask.len() {
        return Err(Error::ShapeMismatch {
            op: "ood_loss",
            lhs: [n, 1],
            rhs: [mask.len(), 1],
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let m = tape.constant(Tensor::new(n, 1, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?);
    let masked = tape.mul(ood_entropy, m)?;
    let total = tape.sum(masked)?;
    tape.scale(total, -1.0 / count as f64)
}

/// Untaped [`ood_loss`] on plain values.
pub fn ood_loss_value(ood_entropies: &[f64], mask: &[bool]) -> f64 {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return 0.0;
    }
    let total: f64 = ood_entropies.iter().zip(mask).filter(|(_, &m)| m).map(|(h, _)| h).sum();
    -total / count as f64
}

/// `α·p_base + (1−α)·p_ood`.
pub fn fuse(p_base: &[f64], p_ood: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("fusion alpha {alpha} outside [0, 1]")));
    }
    if p_base.len() != p_ood.len() {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: [1, p_base.len()],
            rhs: [1, p_ood.len()],
        });
    }
    Ok(p_base.iter().zip(p_ood).map(|(b, o)| alpha * b + (1.0 - alpha) * o).collect())
}

/// Taped [`fuse`] over `N×C` probability matrices.
pub fn fuse_tape(tape: &mut Tape, p_base: Var, p_ood: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("fusion alpha {alpha} outside [0, 1]")));
    }
    if alpha == 1.0 {
        return Ok(p_base);
    }
    if alpha == 0.0 {
        return Ok(p_ood);
    }
    let a = tape.scale(p_base, alpha)?;
    let b = tape.scale(p_ood, 1.0 - alpha)?;
    tape.add(a, b)
}

/// Entropy of the fused prediction; higher means more likely OOD.
pub fn ood_score(p_final: &[f64]) -> f64 {
    shannon(p_final)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, BackboneConfig, ParamGroup};
    use crate::layers::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            layers: 3,
            dim: 4,
            heads: 2,
            patches: 3,
            classes: 5,
            input_dim: 4,
            seed: 1,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    #[test]
    fn identity_psi_passes_class_token_through() {
        let mut tape = Tape::new();
        let psi = Linear::identity(4).bind(&mut tape, false);
        let cls = tape.constant(Tensor::randn(2, 4, 1.0, &mut rng()));
        let o = extract_ood_token(&mut tape, &psi, cls).unwrap();
        assert_eq!(tape.value(o), tape.value(cls));
    }

    #[test]
    fn shared_psi_gives_equal_tokens_for_equal_inputs() {
        let mut tape = Tape::new();
        let psi = Linear::random(4, 4, 1.0, &mut rng()).bind(&mut tape, false);
        let c = Tensor::randn(1, 4, 1.0, &mut rng());
        let c1 = tape.constant(c.clone());
        let c2 = tape.constant(c);
        let o1 = extract_ood_token(&mut tape, &psi, c1).unwrap();
        let o2 = extract_ood_token(&mut tape, &psi, c2).unwrap();
        assert_eq!(tape.value(o1), tape.value(o2));
        assert_eq!(tape.shape(o1), [1, 4]);
        let bad = tape.constant(Tensor::zeros(1, 3));
        assert!(extract_ood_token(&mut tape, &psi, bad).is_err());
    }

    #[test]
    fn zero_ladder_returns_bias() {
        let mut tape = Tape::new();
        let mut lad = Linear::zeros(12, 4);
        lad.bias = Tensor::row(&[1.0, 2.0, 3.0, 4.0]);
        let lad = lad.bind(&mut tape, false);
        let toks: Vec<Var> = (0..3).map(|_| tape.constant(Tensor::randn(1, 4, 1.0, &mut rng()))).collect();
        let o = aggregate(&mut tape, &lad, &toks).unwrap();
        assert_eq!(tape.value(o).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(aggregate(&mut tape, &lad, &toks[..2]).is_err());
    }

    #[test]
    fn ladder_is_order_sensitive() {
        let mut r = rng();
        let mut tape = Tape::new();
        let lad = Linear::random(12, 4, 1.0, &mut r).bind(&mut tape, false);
        let toks: Vec<Var> = (0..3).map(|_| tape.constant(Tensor::randn(1, 4, 1.0, &mut r))).collect();
        let fwd = aggregate(&mut tape, &lad, &toks).unwrap();
        let rev: Vec<Var> = toks.iter().rev().copied().collect();
        let back = aggregate(&mut tape, &lad, &rev).unwrap();
        assert_ne!(tape.value(fwd), tape.value(back));
    }

    #[test]
    fn default_shapes_concat_to_l_times_d() {
        let c = BackboneConfig::default();
        let state = init_backbone(&c).unwrap();
        assert_eq!(state.ladder.weight.shape(), [128, 32]);
        let mut tape = Tape::new();
        let model = state.bind(&mut tape, &[]);
        let toks: Vec<Var> = (0..4).map(|_| tape.constant(Tensor::randn(1, 32, 1.0, &mut rng()))).collect();
        let o = aggregate(&mut tape, &model.ladder, &toks).unwrap();
        assert_eq!(tape.shape(o), [1, 32]);
    }

    #[test]
    fn ood_probs_limits() {
        let mut state = init_backbone(&cfg()).unwrap();
        state.classifier = Linear::zeros(4, 5);
        let mut tape = Tape::new();
        let model = state.bind(&mut tape, &[]);
        let tok = tape.constant(Tensor::randn(1, 4, 1.0, &mut rng()));
        let (_, p) = ood_probs(&mut tape, &model, tok).unwrap();
        let h = crate::losses::entropy(tape.value(p).data()).unwrap();
        assert!((h - 5f64.ln()).abs() < 1e-12);

        state.classifier.bias = Tensor::row(&[800.0, 0.0, 0.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let model = state.bind(&mut tape, &[]);
        let tok = tape.constant(Tensor::randn(1, 4, 1.0, &mut rng()));
        let (_, p) = ood_probs(&mut tape, &model, tok).unwrap();
        assert!(ood_score(tape.value(p).data()) < 1e-12);
    }

    #[test]
    fn random_token_probs_normalised() {
        let mut r = rng();
        let mut state = init_backbone(&cfg()).unwrap();
        state.classifier = Linear::random(4, 5, 3.0, &mut r);
        let mut tape = Tape::new();
        let model = state.bind(&mut tape, &[]);
        let tok = tape.constant(Tensor::randn(1, 4, 2.0, &mut r));
        let (_, p) = ood_probs(&mut tape, &model, tok).unwrap();
        assert!((tape.value(p).data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mask_examples() {
        let c = 8f64.ln();
        assert!(ood_mask(&[c, 0.3, 2.0], c).iter().all(|&m| !m));
        assert!(ood_mask(&[0.01, 0.3, 2.0], 0.0).iter().all(|&m| m));
        assert_eq!(ood_mask(&[0.1, 1.9, 2.0], 1.5), vec![false, true, true]);
    }

    #[test]
    fn ood_loss_examples() {
        assert_eq!(ood_loss_value(&[1.0, 2.0], &[false, false]), 0.0);
        assert_eq!(ood_loss_value(&[1.2], &[true]), -1.2);
        assert_eq!(ood_loss_value(&[1.0, 2.0, 9.9], &[true, true, false]), -1.5);

        let mut tape = Tape::new();
        let h = tape.param(Tensor::new(3, 1, vec![1.0, 2.0, 9.9]).unwrap());
        let l = ood_loss(&mut tape, h, &[true, true, false]).unwrap();
        assert_eq!(tape.value(l).item(), -1.5);
        let empty = ood_loss(&mut tape, h, &[false; 3]).unwrap();
        assert_eq!(tape.value(empty).item(), 0.0);
        assert!(!tape.requires_grad(empty));
        assert!(ood_loss(&mut tape, h, &[true]).is_err());
    }

    #[test]
    fn empty_mask_gives_zero_branch_gradient() {
        let c = cfg();
        let state = init_backbone(&c).unwrap();
        let mut r = rng();
        let grids: Vec<Tensor> = (0..3).map(|_| Tensor::randn(c.patches, c.input_dim, 1.0, &mut r)).collect();
        let mut tape = Tape::new();
        let model = state.bind(&mut tape, &ParamGroup::TRAINABLE);
        let fwd = model.forward_collect(&mut tape, &grids, true).unwrap();
        let branch = ood_branch(&mut tape, &model, &fwd.trace.cls).unwrap();
        let l = ood_loss(&mut tape, branch.entropy, &[false; 3]).unwrap();
        tape.backward(l).unwrap();
        for v in model.psi.vars().into_iter().chain(model.ladder.vars()) {
            assert!(tape.grad(v).data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn fuse_examples() {
        let pb = [0.2, 0.5, 0.3];
        let po = [0.6, 0.1, 0.3];
        assert_eq!(fuse(&pb, &po, 1.0).unwrap(), pb);
        assert_eq!(fuse(&pb, &po, 0.0).unwrap(), po);
        assert_eq!(fuse(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap(), vec![0.5, 0.5]);
        assert!(fuse(&pb, &po, 1.5).is_err());
        assert!(fuse(&pb, &po, -0.1).is_err());
    }

    #[test]
    fn score_examples() {
        assert!((ood_score(&[0.125; 8]) - 2.0794).abs() < 1e-4);
        assert_eq!(ood_score(&[0.0, 1.0, 0.0]), 0.0);
        assert!((ood_score(&[0.5, 0.5, 0.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn fusion_config_bounds() {
        assert!(FusionConfig::default().validate(8).is_ok());
        assert!((FusionConfig::default().threshold_for(8) - 0.5 * 8f64.ln()).abs() < 1e-15);
        let bad = FusionConfig {
            alpha: 1.2,
            threshold: None,
        };
        assert!(bad.validate(8).is_err());
        let bad = FusionConfig {
            alpha: 0.3,
            threshold: Some(3.0),
        };
        assert!(bad.validate(8).is_err());
    }

    /// Gradients from all layers land in the one Ψ; equals the sum of
    /// per-layer gradients from an ablation with an independent Ψ copy per layer.
    #[test]
    fn shared_psi_accumulates_layer_gradients() {
        let c = cfg();
        let mut state = init_backbone(&c).unwrap();
        let mut r = rng();
        state.psi = Linear::random(4, 4, 1.0, &mut r);
        state.ladder = Linear::random(12, 4, 1.0, &mut r);
        let grids: Vec<Tensor> = (0..2).map(|_| Tensor::randn(c.patches, c.input_dim, 1.0, &mut r)).collect();

        let shared = {
            let mut tape = Tape::new();
            let model = state.bind(&mut tape, &[ParamGroup::Psi]);
            let fwd = model.forward_collect(&mut tape, &grids, false).unwrap();
            let branch = ood_branch(&mut tape, &model, &fwd.trace.cls).unwrap();
            let loss = ood_loss(&mut tape, branch.entropy, &[true, true]).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(model.psi.weight)
        };

        let mut tape = Tape::new();
        let model = state.bind(&mut tape, &[]);
        let fwd = model.forward_collect(&mut tape, &grids, false).unwrap();
        let copies: Vec<BoundLinear> = (0..c.layers).map(|_| state.psi.bind(&mut tape, true)).collect();
        let toks = fwd
            .trace
            .cls
            .iter()
            .zip(&copies)
            .map(|(&cls, psi)| extract_ood_token(&mut tape, psi, cls))
            .collect::<Result<Vec<_>>>()
            .unwrap();
        let hln = aggregate(&mut tape, &model.ladder, &toks).unwrap();
        let (_, p) = ood_probs(&mut tape, &model, hln).unwrap();
        let h = entropy_rows(&mut tape, p).unwrap();
        let loss = ood_loss(&mut tape, h, &[true, true]).unwrap();
        tape.backward(loss).unwrap();
        let mut summed = vec![0.0; 16];
        for copy in &copies {
            for (s, g) in summed.iter_mut().zip(tape.grad(copy.weight).data()) {
                *s += g;
            }
        }
        for (a, b) in shared.data().iter().zip(&summed) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn simplex(raw: &[f64]) -> Vec<f64> {
            let s: f64 = raw.iter().sum();
            raw.iter().map(|x| x / s).collect()
        }

        proptest! {
            #[test]
            fn mask_monotone_in_threshold(
                h in proptest::collection::vec(0.0f64..2.1, 1..30),
                t1 in 0.0f64..2.1,
                dt in 0.0f64..1.0,
            ) {
                let lo = ood_mask(&h, t1);
                let hi = ood_mask(&h, t1 + dt);
                for (a, b) in lo.iter().zip(&hi) {
                    prop_assert!(!(!a && *b));
                }
            }

            #[test]
            fn fusion_is_convex_and_scores_bounded(
                a in proptest::collection::vec(0.01f64..1.0, 6),
                b in proptest::collection::vec(0.01f64..1.0, 6),
                alpha in 0.0f64..=1.0,
            ) {
                let (pa, pb) = (simplex(&a), simplex(&b));
                let f = fuse(&pa, &pb, alpha).unwrap();
                prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for i in 0..6 {
                    let (lo, hi) = (pa[i].min(pb[i]), pa[i].max(pb[i]));
                    prop_assert!(f[i] >= lo - 1e-15 && f[i] <= hi + 1e-15);
                }
                let s = ood_score(&f);
                prop_assert!(s >= 0.0 && s <= 6f64.ln() + 1e-12);
            }
        }
    }
}
