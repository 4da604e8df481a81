//! Source model preparation: the classifier head is fit by softmax
//! regression on clean ID class tokens of the frozen backbone.

use serde::{Deserialize, Serialize};

use crate::backbone::{init_backbone, BackboneConfig, ModelState};
use crate::error::{Error, Result};
use crate::eval::stream::World;
use crate::layers::Linear;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    pub samples_per_class: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            samples_per_class: 64,
            epochs: 400,
            learning_rate: 0.5,
            weight_decay: 0.3,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class == 0 {
            return Err(Error::config("samples_per_class must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("source learning_rate must be positive and weight_decay nonnegative"));
        }
        Ok(())
    }
}

/// Final-layer class tokens of `grids` (`N×d`), without adapters.
pub fn class_tokens(state: &ModelState, grids: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let model = state.bind(&mut tape, &[]);
    let out = model.forward_collect(&mut tape, grids, false)?;
    Ok(tape.value(*out.trace.cls.last().expect("at least one layer")).clone())
}

/// Full-batch gradient descent on the mean cross-entropy of a linear head over
/// standardised features. Returns the head (acting on raw features) and its
/// training accuracy.
pub fn fit_head(features: &Tensor, labels: &[usize], classes: usize, cfg: &SourceConfig) -> Result<(Linear, f64)> {
    let [n, d] = features.shape();
    if labels.len() != n || n == 0 {
        return Err(Error::ShapeMismatch {
            op: "fit_head",
            lhs: [n, d],
            rhs: [labels.len(), classes],
        });
    }
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(features.row_slice(r)) {
            *m += x / n as f64;
        }
    }
    for r in 0..n {
        for ((s, x), m) in std.iter_mut().zip(features.row_slice(r)).zip(&mean) {
            *s += (x - m).powi(2) / n as f64;
        }
    }
    let std: Vec<f64> = std.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let mut z = Tensor::zeros(n, d);
    for r in 0..n {
        for c in 0..d {
            z.set(r, c, (features.get(r, c) - mean[c]) / std[c]);
        }
    }
    let zt = z.transpose();

    let mut w = Tensor::zeros(d, classes);
    let mut b = vec![0.0; classes];
    for _ in 0..cfg.epochs {
        let mut p = z.matmul(&w)?;
        for r in 0..n {
            let row = &mut p.data_mut()[r * classes..(r + 1) * classes];
            for (x, bc) in row.iter_mut().zip(&b) {
                *x += bc;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
            row[labels[r]] -= 1.0;
        }
        let gw = zt.matmul(&p)?;
        for (wi, gi) in w.data_mut().iter_mut().zip(gw.data()) {
            *wi -= cfg.learning_rate * (gi / n as f64 + cfg.weight_decay * *wi);
        }
        for c in 0..classes {
            let g: f64 = (0..n).map(|r| p.get(r, c)).sum::<f64>() / n as f64;
            b[c] -= cfg.learning_rate * g;
        }
    }

    // Fold the standardisation into the head: W' = W / σ, b' = b − (μ/σ)·W.
    let mut head = Linear::zeros(d, classes);
    for i in 0..d {
        for c in 0..classes {
            head.weight.set(i, c, w.get(i, c) / std[i]);
        }
    }
    for c in 0..classes {
        let shift: f64 = (0..d).map(|i| mean[i] / std[i] * w.get(i, c)).sum();
        head.bias.set(0, c, b[c] - shift);
    }

    let correct = (0..n)
        .filter(|&r| {
            let logits = head.apply_row(features.row_slice(r)).expect("head shape");
            crate::engine::argmax(&logits) == labels[r]
        })
        .count();
    Ok((head, correct as f64 / n as f64))
}

/// Seeded backbone with a classifier head fit to the world's clean ID classes.
pub fn source_model(backbone: &BackboneConfig, world: &World, cfg: &SourceConfig) -> Result<(ModelState, f64)> {
    cfg.validate()?;
    let mut state = init_backbone(backbone)?;
    let (grids, labels) = world.source_samples(cfg.samples_per_class);
    let features = class_tokens(&state, &grids)?;
    let (head, acc) = fit_head(&features, &labels, backbone.classes, cfg)?;
    state.classifier = head;
    Ok((state, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::stream::StreamConfig;

    #[test]
    fn separable_features_are_fit() {
        let x = Tensor::new(4, 2, vec![10.0, 0.0, 11.0, 1.0, 0.0, 10.0, 1.0, 12.0]).unwrap();
        let (head, acc) = fit_head(&x, &[0, 0, 1, 1], 2, &SourceConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
        let l = head.apply_row(&[20.0, 0.0]).unwrap();
        assert!(l[0] > l[1]);
    }

    #[test]
    fn source_head_beats_chance_on_clean_data() {
        let b = BackboneConfig::default();
        let world = World::new(&StreamConfig::default(), &b).unwrap();
        let cfg = SourceConfig {
            samples_per_class: 16,
            ..SourceConfig::default()
        };
        let (_, acc) = source_model(&b, &world, &cfg).unwrap();
        assert!(acc > 0.5, "training accuracy {acc}");
    }
}
