//! Synthetic open-world test streams.
//!
//! Every class owns a prototype token grid drawn from `N(0, 1)`; a sample is
//! its prototype plus `N(0, spread²)` noise. Held-out OOD classes use
//! prototypes drawn the same way. Test samples are then corrupted by a fixed
//! partial rotation of token feature space and additive `N(0, shift²)` noise.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const WORLD_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;
const SOURCE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// ID class count; must equal the classifier width.
    pub id_classes: usize,
    pub ood_classes: usize,
    /// Fraction of every batch drawn from OOD classes, in `[0, 1)`.
    pub ood_ratio: f64,
    /// Corruption strength: noise scale and rotation fraction.
    pub shift_strength: f64,
    /// Within-class noise scale around each prototype.
    pub spread: f64,
    /// Largest rotation angle (radians) of a plane at full strength.
    pub max_angle: f64,
    pub batches: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            id_classes: 8,
            ood_classes: 2,
            ood_ratio: 0.25,
            shift_strength: 0.4,
            spread: 0.6,
            max_angle: 1.0,
            batches: 100,
            batch_size: 32,
            seed: 2024,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.id_classes != backbone.classes {
            return Err(Error::config(format!(
                "stream has {} ID classes but the classifier has {}",
                self.id_classes, backbone.classes
            )));
        }
        if !(0.0..1.0).contains(&self.ood_ratio) {
            return Err(Error::config(format!("ood_ratio {} outside [0, 1)", self.ood_ratio)));
        }
        if self.ood_ratio > 0.0 && self.ood_classes == 0 {
            return Err(Error::config("ood_ratio > 0 needs at least one OOD class"));
        }
        for (name, v) in [
            ("shift_strength", self.shift_strength),
            ("spread", self.spread),
            ("max_angle", self.max_angle),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.batches == 0 || self.batch_size == 0 {
            return Err(Error::config("batches and batch_size must be at least 1"));
        }
        Ok(())
    }

    /// `⌊ood_ratio · N⌋`.
    pub fn ood_per_batch(&self) -> usize {
        (self.ood_ratio * self.batch_size as f64).floor() as usize
    }
}

/// A test batch. `labels` and `ood` are hidden from adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub grids: Vec<Tensor>,
    /// ID class, or `id_classes + k` for the `k`-th OOD class.
    pub labels: Vec<usize>,
    pub ood: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }
}

/// Class prototypes and the corruption map of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: StreamConfig,
    pub patches: usize,
    pub input_dim: usize,
    /// ID prototypes followed by OOD prototypes.
    pub prototypes: Vec<Tensor>,
    /// `input_dim × input_dim` orthogonal map applied to every token.
    pub rotation: Tensor,
}

impl World {
    pub fn new(cfg: &StreamConfig, backbone: &BackboneConfig) -> Result<World> {
        cfg.validate(backbone)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(WORLD_STREAM);
        let (p, k) = (backbone.patches, backbone.input_dim);
        let prototypes = (0..cfg.id_classes + cfg.ood_classes)
            .map(|_| Tensor::randn(p, k, 1.0, &mut rng))
            .collect();
        let rotation = partial_rotation(k, cfg.shift_strength.min(1.0) * cfg.max_angle, &mut rng)?;
        Ok(World {
            config: *cfg,
            patches: p,
            input_dim: k,
            prototypes,
            rotation,
        })
    }

    fn draw<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Tensor {
        let noise = Tensor::randn(self.patches, self.input_dim, self.config.spread, rng);
        let proto = &self.prototypes[class];
        let data = proto.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        Tensor::new(self.patches, self.input_dim, data).expect("prototype shape")
    }

    fn corrupt<R: Rng + ?Sized>(&self, clean: &Tensor, rng: &mut R) -> Result<Tensor> {
        let rotated = clean.matmul(&self.rotation)?;
        let noise = Tensor::randn(self.patches, self.input_dim, self.config.shift_strength, rng);
        let data = rotated.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        Tensor::new(self.patches, self.input_dim, data)
    }

    /// Uncorrupted ID samples, `per_class` of each class, in class order.
    pub fn source_samples(&self, per_class: usize) -> (Vec<Tensor>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(SOURCE_STREAM);
        let mut grids = Vec::with_capacity(per_class * self.config.id_classes);
        let mut labels = Vec::with_capacity(grids.capacity());
        for c in 0..self.config.id_classes {
            for _ in 0..per_class {
                grids.push(self.draw(c, &mut rng));
                labels.push(c);
            }
        }
        (grids, labels)
    }

    /// The corrupted test stream.
    pub fn stream(&self) -> Result<Vec<Batch>> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TEST_STREAM);
        let n_ood = cfg.ood_per_batch();
        let mut out = Vec::with_capacity(cfg.batches);
        for _ in 0..cfg.batches {
            let mut ood: Vec<bool> = (0..cfg.batch_size).map(|i| i < n_ood).collect();
            ood.shuffle(&mut rng);
            let mut grids = Vec::with_capacity(cfg.batch_size);
            let mut labels = Vec::with_capacity(cfg.batch_size);
            for &is_ood in &ood {
                let class = if is_ood {
                    cfg.id_classes + rng.random_range(0..cfg.ood_classes)
                } else {
                    rng.random_range(0..cfg.id_classes)
                };
                let clean = self.draw(class, &mut rng);
                grids.push(self.corrupt(&clean, &mut rng)?);
                labels.push(class);
            }
            out.push(Batch { grids, labels, ood });
        }
        Ok(out)
    }
}

/// `B · blockdiag(rot(θ₁), …) · Bᵀ` with a random orthonormal basis `B` and
/// plane angles `θₖ` uniform in `[angle/2, angle]`.
fn partial_rotation<R: Rng + ?Sized>(dim: usize, angle: f64, rng: &mut R) -> Result<Tensor> {
    let g = Tensor::randn(dim, dim, 1.0, rng);
    let basis = DMatrix::from_row_slice(dim, dim, g.data()).qr().q();
    let mut block = DMatrix::<f64>::identity(dim, dim);
    for k in 0..dim / 2 {
        let theta = angle * rng.random_range(0.5..=1.0);
        let (s, c) = theta.sin_cos();
        let (i, j) = (2 * k, 2 * k + 1);
        block[(i, i)] = c;
        block[(i, j)] = -s;
        block[(j, i)] = s;
        block[(j, j)] = c;
    }
    let r = &basis * block * basis.transpose();
    let mut out = Tensor::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            out.set(i, j, r[(i, j)]);
        }
    }
    Ok(out)
}

/// Builds the world for `cfg` and returns its corrupted test stream.
pub fn gen_stream(cfg: &StreamConfig, backbone: &BackboneConfig) -> Result<Vec<Batch>> {
    World::new(cfg, backbone)?.stream()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bcfg() -> BackboneConfig {
        BackboneConfig {
            patches: 4,
            input_dim: 6,
            ..BackboneConfig::default()
        }
    }

    fn scfg() -> StreamConfig {
        StreamConfig {
            batches: 4,
            ..StreamConfig::default()
        }
    }

    #[test]
    fn no_ood_when_ratio_zero() {
        let cfg = StreamConfig {
            ood_ratio: 0.0,
            ..scfg()
        };
        let s = gen_stream(&cfg, &bcfg()).unwrap();
        assert!(s.iter().all(|b| b.ood.iter().all(|&o| !o)));
        assert!(s.iter().flat_map(|b| &b.labels).all(|&l| l < 8));
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        assert_eq!(gen_stream(&scfg(), &bcfg()).unwrap(), gen_stream(&scfg(), &bcfg()).unwrap());
        let other = StreamConfig { seed: 7, ..scfg() };
        assert_ne!(gen_stream(&scfg(), &bcfg()).unwrap(), gen_stream(&other, &bcfg()).unwrap());
    }

    #[test]
    fn ood_count_is_deterministic() {
        let s = gen_stream(&scfg(), &bcfg()).unwrap();
        for b in &s {
            assert_eq!(b.len(), 32);
            assert_eq!(b.ood.iter().filter(|&&o| o).count(), 8);
            for (&l, &o) in b.labels.iter().zip(&b.ood) {
                assert_eq!(o, l >= 8);
            }
        }
        let first: Vec<bool> = s[0].ood.clone();
        assert!(s.iter().skip(1).any(|b| b.ood != first));
    }

    #[test]
    fn rotation_is_orthogonal() {
        let w = World::new(&scfg(), &bcfg()).unwrap();
        let rrt = w.rotation.matmul(&w.rotation.transpose()).unwrap();
        let eye = Tensor::identity(6);
        for (a, b) in rrt.data().iter().zip(eye.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let still = World::new(
            &StreamConfig {
                shift_strength: 0.0,
                ..scfg()
            },
            &bcfg(),
        )
        .unwrap();
        for (a, b) in still.rotation.data().iter().zip(eye.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let b = bcfg();
        assert!(StreamConfig { ood_ratio: 1.0, ..scfg() }.validate(&b).is_err());
        assert!(StreamConfig { ood_classes: 0, ..scfg() }.validate(&b).is_err());
        assert!(StreamConfig { id_classes: 5, ..scfg() }.validate(&b).is_err());
        assert!(StreamConfig { batch_size: 0, ..scfg() }.validate(&b).is_err());
        assert!(StreamConfig {
            shift_strength: -1.0,
            ..scfg()
        }
        .validate(&b)
        .is_err());
    }

    #[test]
    fn source_samples_cover_classes() {
        let w = World::new(&scfg(), &bcfg()).unwrap();
        let (g, l) = w.source_samples(3);
        assert_eq!(g.len(), 24);
        assert_eq!(&l[..4], &[0, 0, 0, 1]);
    }
}
