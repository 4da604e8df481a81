//! Frozen toy vision transformer and the full model state.
//!
//! Tokens per sample are `[cls; patch_1 … patch_P]`, embedded by a fixed
//! linear patch map plus positional embeddings. Each layer is a pre-norm
//! block: `x += proj(attn(LN₁(x)))`, `x += fc₂(gelu(fc₁(LN₂(x))))` with MLP
//! ratio 2. The class token read after every layer feeds the ladder OOD
//! branch; the last one feeds the shared classifier.
//!
//! Across a batch the token rows of all samples are stacked: sample `s`
//! occupies rows `s·(P+1) .. (s+1)·(P+1)`, class token first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aan::{apply_affine, AanParams, BoundAan};
use crate::error::{Error, Result};
use crate::layers::{BoundLayerNorm, BoundLinear, LayerNormParams, Linear};
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;

pub const MLP_RATIO: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patches: usize,
    pub classes: usize,
    /// Width of the raw per-patch feature vectors.
    pub input_dim: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 4,
            dim: 32,
            heads: 2,
            patches: 16,
            classes: 8,
            input_dim: 32,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("layers", self.layers),
            ("dim", self.dim),
            ("heads", self.heads),
            ("patches", self.patches),
            ("classes", self.classes),
            ("input_dim", self.input_dim),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::config(format!("backbone {name} must be at least 1")));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.patches + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub qkv: Linear,
    pub proj: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockNorms {
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

/// Frozen transformer weights (everything except the classifier and norms).
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub patch_embed: Linear,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
}

/// Parameter groups in checkpoint order. The last four are trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Classifier,
    Norm,
    Aan,
    Psi,
    Ladder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Backbone,
        ParamGroup::Classifier,
        ParamGroup::Norm,
        ParamGroup::Aan,
        ParamGroup::Psi,
        ParamGroup::Ladder,
    ];
    pub const TRAINABLE: [ParamGroup; 4] = [ParamGroup::Norm, ParamGroup::Aan, ParamGroup::Psi, ParamGroup::Ladder];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Classifier => "classifier",
            ParamGroup::Norm => "norm",
            ParamGroup::Aan => "aan",
            ParamGroup::Psi => "psi",
            ParamGroup::Ladder => "ladder",
        }
    }
}

/// Frozen backbone and classifier plus the four trainable adapter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: BackboneConfig,
    pub backbone: Backbone,
    pub classifier: Linear,
    pub norms: Vec<BlockNorms>,
    pub aan: AanParams,
    /// `Ψ`: class token → OOD token, shared by every layer.
    pub psi: Linear,
    /// Ladder aggregator over the concatenated per-layer OOD tokens (`L·d → d`).
    pub ladder: Linear,
}

/// Seeded model initialisation.
///
/// `Ψ` starts as the identity and the ladder selects the last layer's OOD
/// token, so a fresh OOD branch reproduces the base prediction.
pub fn init_backbone(cfg: &BackboneConfig) -> Result<ModelState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let blocks = (0..cfg.layers)
        .map(|_| Block {
            qkv: Linear::random(d, 3 * d, 1.0, &mut rng),
            proj: Linear::random(d, d, 0.5, &mut rng),
            fc1: Linear::random(d, MLP_RATIO * d, 1.0, &mut rng),
            fc2: Linear::random(MLP_RATIO * d, d, 0.5, &mut rng),
        })
        .collect();
    let backbone = Backbone {
        patch_embed: Linear::random(cfg.input_dim, d, 1.0, &mut rng),
        cls_token: Tensor::randn(1, d, 0.5, &mut rng),
        pos_embed: Tensor::randn(cfg.tokens_per_sample(), d, 0.1, &mut rng),
        blocks,
    };
    let classifier = Linear::random(d, cfg.classes, 1.0, &mut rng);
    let norms = (0..cfg.layers)
        .map(|_| BlockNorms {
            ln1: LayerNormParams::new(d),
            ln2: LayerNormParams::new(d),
        })
        .collect();
    let aan = AanParams::new(d, &mut rng);
    let mut ladder = Linear::zeros(cfg.layers * d, d);
    let last = (cfg.layers - 1) * d;
    for j in 0..d {
        ladder.weight.set(last + j, j, 1.0);
    }
    Ok(ModelState {
        config: *cfg,
        backbone,
        classifier,
        norms,
        aan,
        psi: Linear::identity(d),
        ladder,
    })
}

impl ModelState {
    /// Tensors of a group in fixed order (the checkpoint order).
    pub fn group(&self, group: ParamGroup) -> Vec<&Tensor> {
        match group {
            ParamGroup::Backbone => {
                let b = &self.backbone;
                let mut out: Vec<&Tensor> = b.patch_embed.tensors().to_vec();
                out.push(&b.cls_token);
                out.push(&b.pos_embed);
                for blk in &b.blocks {
                    for lin in [&blk.qkv, &blk.proj, &blk.fc1, &blk.fc2] {
                        out.extend(lin.tensors());
                    }
                }
                out
            }
            ParamGroup::Classifier => self.classifier.tensors().to_vec(),
            ParamGroup::Norm => self
                .norms
                .iter()
                .flat_map(|n| n.ln1.tensors().into_iter().chain(n.ln2.tensors()))
                .collect(),
            ParamGroup::Aan => self.aan.tensors(),
            ParamGroup::Psi => self.psi.tensors().to_vec(),
            ParamGroup::Ladder => self.ladder.tensors().to_vec(),
        }
    }

    pub fn group_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor> {
        match group {
            ParamGroup::Backbone => {
                let b = &mut self.backbone;
                let mut out: Vec<&mut Tensor> = b.patch_embed.tensors_mut().into_iter().collect();
                out.push(&mut b.cls_token);
                out.push(&mut b.pos_embed);
                for blk in &mut b.blocks {
                    for lin in [&mut blk.qkv, &mut blk.proj, &mut blk.fc1, &mut blk.fc2] {
                        out.extend(lin.tensors_mut());
                    }
                }
                out
            }
            ParamGroup::Classifier => self.classifier.tensors_mut().into_iter().collect(),
            ParamGroup::Norm => self
                .norms
                .iter_mut()
                .flat_map(|n| n.ln1.tensors_mut().into_iter().chain(n.ln2.tensors_mut()))
                .collect(),
            ParamGroup::Aan => self.aan.tensors_mut(),
            ParamGroup::Psi => self.psi.tensors_mut().into_iter().collect(),
            ParamGroup::Ladder => self.ladder.tensors_mut().into_iter().collect(),
        }
    }

    /// Group contents flattened in group order.
    pub fn flatten(&self, group: ParamGroup) -> Vec<f64> {
        self.group(group).iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ModelState::flatten`].
    pub fn unflatten(&mut self, group: ParamGroup, values: &[f64]) -> Result<()> {
        let expected: usize = self.group(group).iter().map(|t| t.len()).sum();
        if expected != values.len() {
            return Err(Error::ShapeMismatch {
                op: "unflatten",
                lhs: [expected, 1],
                rhs: [values.len(), 1],
            });
        }
        let mut offset = 0;
        for t in self.group_mut(group) {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn group_len(&self, group: ParamGroup) -> usize {
        self.group(group).iter().map(|t| t.len()).sum()
    }

    /// Order-sensitive checksum of a group's exact bit patterns (FNV-1a).
    pub fn checksum(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.group(group) {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Places every parameter on `tape`; only groups in `trainable` receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: &[ParamGroup]) -> BoundModel {
        let train = |g: ParamGroup| trainable.contains(&g);
        let b = &self.backbone;
        let patch_embed = b.patch_embed.bind(tape, false);
        let cls_token = tape.constant(b.cls_token.clone());
        let pos_embed = tape.constant(b.pos_embed.clone());
        let blocks = b
            .blocks
            .iter()
            .map(|blk| BoundBlock {
                qkv: blk.qkv.bind(tape, false),
                proj: blk.proj.bind(tape, false),
                fc1: blk.fc1.bind(tape, false),
                fc2: blk.fc2.bind(tape, false),
            })
            .collect();
        let classifier = self.classifier.bind(tape, false);
        let norms = self
            .norms
            .iter()
            .map(|n| {
                (
                    n.ln1.bind(tape, train(ParamGroup::Norm)),
                    n.ln2.bind(tape, train(ParamGroup::Norm)),
                )
            })
            .collect();
        BoundModel {
            config: self.config,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            classifier,
            norms,
            aan: self.aan.bind(tape, train(ParamGroup::Aan)),
            psi: self.psi.bind(tape, train(ParamGroup::Psi)),
            ladder: self.ladder.bind(tape, train(ParamGroup::Ladder)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub qkv: BoundLinear,
    pub proj: BoundLinear,
    pub fc1: BoundLinear,
    pub fc2: BoundLinear,
}

/// A [`ModelState`] placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub config: BackboneConfig,
    pub patch_embed: BoundLinear,
    pub cls_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BoundBlock>,
    pub classifier: BoundLinear,
    pub norms: Vec<(BoundLayerNorm, BoundLayerNorm)>,
    pub aan: BoundAan,
    pub psi: BoundLinear,
    pub ladder: BoundLinear,
}

/// Per-layer readouts of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace {
    /// Class token after each layer, `N×d`.
    pub cls: Vec<Var>,
    /// All tokens after each layer, `N·(P+1) × d` (patch tokens are rows 1..=P of each block).
    pub tokens: Vec<Var>,
    /// Stacked pre-affine `[Q | K | V]` of each layer, `N·(P+1) × 3d`.
    pub qkv: Vec<Var>,
    /// Post-softmax attention maps, indexed `[layer][sample · heads + head]`.
    pub attention: Vec<Vec<Var>>,
}

impl LayerTrace {
    pub fn len(&self) -> usize {
        self.cls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cls.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub trace: LayerTrace,
    /// `𝒞(c_cls^(L))`, `N×C`.
    pub logits: Var,
}

impl BoundModel {
    /// Tape variables of a group, in the order of [`ModelState::group`].
    pub fn group_vars(&self, group: ParamGroup) -> Vec<Var> {
        match group {
            ParamGroup::Backbone => {
                let mut out = self.patch_embed.vars().to_vec();
                out.push(self.cls_token);
                out.push(self.pos_embed);
                for blk in &self.blocks {
                    for lin in [blk.qkv, blk.proj, blk.fc1, blk.fc2] {
                        out.extend(lin.vars());
                    }
                }
                out
            }
            ParamGroup::Classifier => self.classifier.vars().to_vec(),
            ParamGroup::Norm => self
                .norms
                .iter()
                .flat_map(|(a, b)| a.vars().into_iter().chain(b.vars()))
                .collect(),
            ParamGroup::Aan => self.aan.feature.vars().into_iter().chain(self.aan.affine.vars()).collect(),
            ParamGroup::Psi => self.psi.vars().to_vec(),
            ParamGroup::Ladder => self.ladder.vars().to_vec(),
        }
    }

    /// Affine classifier head `x · W + b`, used by both the class-token and OOD paths.
    pub fn classify(&self, tape: &mut Tape, token: Var) -> Result<Var> {
        if tape.shape(token)[1] != self.config.dim {
            return Err(Error::ShapeMismatch {
                op: "classify",
                lhs: tape.shape(token),
                rhs: [1, self.config.dim],
            });
        }
        self.classifier.apply(tape, token)
    }

    fn embed(&self, tape: &mut Tape, grids: &[Tensor]) -> Result<Var> {
        let cfg = &self.config;
        let mut raw = Vec::with_capacity(grids.len() * cfg.patches * cfg.input_dim);
        for g in grids {
            if g.shape() != [cfg.patches, cfg.input_dim] {
                return Err(Error::ShapeMismatch {
                    op: "token grid",
                    lhs: g.shape(),
                    rhs: [cfg.patches, cfg.input_dim],
                });
            }
            raw.extend_from_slice(g.data());
        }
        let raw = tape.constant(Tensor::new(grids.len() * cfg.patches, cfg.input_dim, raw)?);
        let embedded = self.patch_embed.apply(tape, raw)?;
        let mut samples = Vec::with_capacity(grids.len());
        for s in 0..grids.len() {
            let patches = tape.slice_rows(embedded, s * cfg.patches, cfg.patches)?;
            let seq = tape.concat(&[self.cls_token, patches], Axis::Rows)?;
            samples.push(tape.add(seq, self.pos_embed)?);
        }
        tape.concat(&samples, Axis::Rows)
    }

    /// Scale/shift rows for every sample at one layer, from that layer's input tokens.
    fn layer_affine(&self, tape: &mut Tape, x: Var, n: usize) -> Result<Var> {
        let t = self.config.tokens_per_sample();
        let mut pooled = Vec::with_capacity(n);
        let mut cls = Vec::with_capacity(n);
        for s in 0..n {
            cls.push(tape.slice_rows(x, s * t, 1)?);
            let patches = tape.slice_rows(x, s * t + 1, self.config.patches)?;
            pooled.push(tape.mean(patches, Axis::Rows)?);
        }
        let pooled = tape.concat(&pooled, Axis::Rows)?;
        let cls = tape.concat(&cls, Axis::Rows)?;
        let feature = self.aan.combine(tape, pooled, cls)?;
        self.aan.affine_rows(tape, feature)
    }

    /// Runs the transformer over a batch, collecting per-layer class and
    /// patch tokens. With `use_aan`, each layer's Q, K, V are replaced by
    /// their affined versions before attention.
    pub fn forward_collect(&self, tape: &mut Tape, grids: &[Tensor], use_aan: bool) -> Result<ForwardOutput> {
        let cfg = self.config;
        let n = grids.len();
        if n == 0 {
            return Err(Error::config("empty batch"));
        }
        let t = cfg.tokens_per_sample();
        let (d, dh) = (cfg.dim, cfg.head_dim());
        let attn_scale = 1.0 / (dh as f64).sqrt();

        let mut x = self.embed(tape, grids)?;
        let mut trace = LayerTrace::default();

        for (blk, (ln1, ln2)) in self.blocks.iter().zip(&self.norms) {
            let affine = if use_aan {
                Some(self.layer_affine(tape, x, n)?)
            } else {
                None
            };
            let h = ln1.apply(tape, x)?;
            let qkv = blk.qkv.apply(tape, h)?;
            trace.qkv.push(qkv);

            let mut sample_out = Vec::with_capacity(n);
            let mut maps = Vec::with_capacity(n * cfg.heads);
            for s in 0..n {
                let rows = tape.slice_rows(qkv, s * t, t)?;
                let mut q = tape.slice_cols(rows, 0, d)?;
                let mut k = tape.slice_cols(rows, d, d)?;
                let mut v = tape.slice_cols(rows, 2 * d, d)?;
                if let Some(aff) = affine {
                    let set = self.aan.split(tape, aff, s)?;
                    (q, k, v) = apply_affine(tape, q, k, v, &set)?;
                }
                let mut heads = Vec::with_capacity(cfg.heads);
                for hd in 0..cfg.heads {
                    let qh = tape.slice_cols(q, hd * dh, dh)?;
                    let kh = tape.slice_cols(k, hd * dh, dh)?;
                    let vh = tape.slice_cols(v, hd * dh, dh)?;
                    let kt = tape.transpose(kh)?;
                    let scores = tape.matmul(qh, kt)?;
                    let scores = tape.scale(scores, attn_scale)?;
                    let probs = tape.softmax_rows(scores)?;
                    maps.push(probs);
                    heads.push(tape.matmul(probs, vh)?);
                }
                sample_out.push(tape.concat(&heads, Axis::Cols)?);
            }
            trace.attention.push(maps);
            let attn = tape.concat(&sample_out, Axis::Rows)?;
            let attn = blk.proj.apply(tape, attn)?;
            x = tape.add(x, attn)?;

            let h2 = ln2.apply(tape, x)?;
            let hidden = blk.fc1.apply(tape, h2)?;
            let hidden = tape.gelu(hidden)?;
            let mlp = blk.fc2.apply(tape, hidden)?;
            x = tape.add(x, mlp)?;

            let mut cls = Vec::with_capacity(n);
            for s in 0..n {
                cls.push(tape.slice_rows(x, s * t, 1)?);
            }
            trace.cls.push(tape.concat(&cls, Axis::Rows)?);
            trace.tokens.push(x);
        }

        let last_cls = *trace.cls.last().expect("at least one layer");
        let logits = self.classify(tape, last_cls)?;
        Ok(ForwardOutput { trace, logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            patches: 4,
            classes: 3,
            input_dim: 5,
            seed: 3,
        }
    }

    fn grids(cfg: &BackboneConfig, n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Tensor::randn(cfg.patches, cfg.input_dim, 1.0, &mut rng)).collect()
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let mut bad = small();
        bad.heads = 3;
        assert!(init_backbone(&bad).is_err());
        bad = small();
        bad.layers = 0;
        assert!(init_backbone(&bad).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = init_backbone(&small()).unwrap();
        let b = init_backbone(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 4;
        assert_ne!(init_backbone(&other).unwrap().backbone, a.backbone);
    }

    #[test]
    fn default_trace_has_one_entry_per_layer() {
        let cfg = BackboneConfig::default();
        let state = init_backbone(&cfg).unwrap();
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, &[]);
        let out = bound.forward_collect(&mut tape, &grids(&cfg, 2, 1), true).unwrap();
        assert_eq!(out.trace.len(), 4);
        assert_eq!(out.trace.tokens.len(), 4);
        assert_eq!(tape.shape(out.trace.cls[0]), [2, 32]);
        assert_eq!(tape.shape(out.trace.tokens[3]), [2 * 17, 32]);
    }

    #[test]
    fn identity_aan_matches_plain_forward() {
        let cfg = small();
        let state = init_backbone(&cfg).unwrap();
        let batch = grids(&cfg, 3, 2);
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, &[]);
        let plain = bound.forward_collect(&mut tape, &batch, false).unwrap();
        let with = bound.forward_collect(&mut tape, &batch, true).unwrap();
        let (a, b) = (tape.value(plain.logits), tape.value(with.logits));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn one_sample_gives_one_logit_row() {
        let cfg = small();
        let state = init_backbone(&cfg).unwrap();
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, &[]);
        let out = bound.forward_collect(&mut tape, &grids(&cfg, 1, 5), true).unwrap();
        assert_eq!(tape.shape(out.logits), [1, cfg.classes]);
    }

    #[test]
    fn softmax_rows_and_attention_rows_sum_to_one() {
        let cfg = small();
        let state = init_backbone(&cfg).unwrap();
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, &[]);
        let out = bound.forward_collect(&mut tape, &grids(&cfg, 4, 6), true).unwrap();
        let p = tape.softmax_rows(out.logits).unwrap();
        for r in 0..4 {
            let s: f64 = tape.value(p).row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        for layer in &out.trace.attention {
            assert_eq!(layer.len(), 4 * cfg.heads);
            for &map in layer {
                let m = tape.value(map);
                for r in 0..m.rows() {
                    let s: f64 = m.row_slice(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn grid_shape_mismatch_rejected() {
        let cfg = small();
        let state = init_backbone(&cfg).unwrap();
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, &[]);
        let bad = vec![Tensor::zeros(cfg.patches, cfg.input_dim + 1)];
        assert!(bound.forward_collect(&mut tape, &bad, false).is_err());
        let token = tape.constant(Tensor::zeros(1, cfg.dim + 1));
        assert!(bound.classify(&mut tape, token).is_err());
    }

    #[test]
    fn zero_weight_head_returns_bias() {
        let cfg = small();
        let mut state = init_backbone(&cfg).unwrap();
        state.classifier = Linear::zeros(cfg.dim, cfg.classes);
        state.classifier.bias = Tensor::row(&[0.5, -1.0, 2.0]);
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, &[]);
        let token = tape.constant(Tensor::randn(1, cfg.dim, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let logits = bound.classify(&mut tape, token).unwrap();
        assert_eq!(tape.value(logits).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn random_token_gives_finite_logits() {
        let cfg = small();
        let state = init_backbone(&cfg).unwrap();
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, &[]);
        let token = tape.constant(Tensor::randn(1, cfg.dim, 10.0, &mut ChaCha8Rng::seed_from_u64(9)));
        let logits = bound.classify(&mut tape, token).unwrap();
        assert!(tape.value(logits).is_finite());
    }

    #[test]
    fn frozen_groups_receive_no_gradient() {
        let cfg = small();
        let state = init_backbone(&cfg).unwrap();
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, &ParamGroup::TRAINABLE);
        let out = bound.forward_collect(&mut tape, &grids(&cfg, 2, 3), true).unwrap();
        let s = tape.sum(out.logits).unwrap();
        tape.backward(s).unwrap();
        let frozen = [bound.patch_embed.weight, bound.cls_token, bound.blocks[0].qkv.weight, bound.classifier.weight];
        for v in frozen {
            assert!(!tape.requires_grad(v));
            assert!(tape.grad(v).data().iter().all(|&g| g == 0.0));
        }
        assert!(tape.grad(bound.norms[0].0.gamma).data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn flatten_round_trip() {
        let mut state = init_backbone(&small()).unwrap();
        let before = state.clone();
        for g in ParamGroup::ALL {
            let flat = state.flatten(g);
            assert_eq!(flat.len(), state.group_len(g));
            state.unflatten(g, &flat).unwrap();
        }
        assert_eq!(state, before);
        assert!(state.unflatten(ParamGroup::Psi, &[1.0]).is_err());
    }
}
