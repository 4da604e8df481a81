//! Binary model checkpoints.
//!
//! Layout, all integers `u64` and all values `f64`, little-endian:
//!
//! ```text
//! "OWTTA001"
//! layers dim heads patches classes input_dim seed
//! for each group in ParamGroup::ALL order (backbone, classifier, norm, aan, psi, ladder):
//!     tensor_count
//!     for each tensor: value_count, values…
//! ```
//!
//! Tensor shapes are implied by the config, so loading checks every count
//! against a freshly initialised model of the stored config.

use std::fs;
use std::path::Path;

use crate::backbone::{init_backbone, BackboneConfig, ModelState, ParamGroup};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OWTTA001";

pub fn to_bytes(state: &ModelState) -> Vec<u8> {
    let c = &state.config;
    let mut out = Vec::from(&MAGIC[..]);
    for v in [c.layers, c.dim, c.heads, c.patches, c.classes, c.input_dim] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    for g in ParamGroup::ALL {
        let tensors = state.group(g);
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("extent does not fit in usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let cfg = BackboneConfig {
        layers: r.usize()?,
        dim: r.usize()?,
        heads: r.usize()?,
        patches: r.usize()?,
        classes: r.usize()?,
        input_dim: r.usize()?,
        seed: r.u64()?,
    };
    let budget = bytes.len() / 8;
    let sizes = [
        cfg.layers.saturating_mul(cfg.dim).saturating_mul(cfg.dim),
        cfg.input_dim.saturating_mul(cfg.dim),
        cfg.patches.saturating_add(1).saturating_mul(cfg.dim),
        cfg.classes.saturating_mul(cfg.dim),
    ];
    if sizes.iter().any(|&s| s > budget) {
        return Err(Error::Checkpoint("stored extents exceed the file size".into()));
    }
    let mut state = init_backbone(&cfg).map_err(|e| Error::Checkpoint(format!("stored config invalid: {e}")))?;
    for g in ParamGroup::ALL {
        let count = r.usize()?;
        let expected = state.group(g).len();
        if count != expected {
            return Err(Error::Checkpoint(format!("group {} has {count} tensors, expected {expected}", g.name())));
        }
        for (i, t) in state.group_mut(g).into_iter().enumerate() {
            let len = r.usize()?;
            if len != t.len() {
                return Err(Error::Checkpoint(format!(
                    "group {} tensor {i} has {len} values, expected {}",
                    g.name(),
                    t.len()
                )));
            }
            for v in t.data_mut() {
                *v = r.f64()?;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(state)
}

pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::jitter_trainable;
    use rand::SeedableRng;

    fn state() -> ModelState {
        let cfg = BackboneConfig {
            layers: 2,
            dim: 4,
            heads: 2,
            patches: 3,
            classes: 3,
            input_dim: 5,
            seed: 11,
        };
        let mut s = init_backbone(&cfg).unwrap();
        jitter_trainable(&mut s, 0.3, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = state();
        let bytes = to_bytes(&s);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&state(), &path).unwrap();
        assert_eq!(load(&path).unwrap(), state());
        assert!(load(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = to_bytes(&state());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(from_bytes(&long).is_err());
        let mut wrong_count = bytes;
        wrong_count[8 + 7 * 8] = 99;
        assert!(from_bytes(&wrong_count).is_err());
    }
}
