//! Central finite-difference checks for taped scalar functions.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error used by all gradient checks:
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares the taped gradient of `f` at `point` with central differences
/// of step `h` and returns the worst per-coordinate relative error.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-8..=1e-4).contains(&h) {
        return Err(Error::config(format!("finite-difference step {h} outside [1e-8, 1e-4]")));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let loss = f(&mut tape, x)?;
    tape.backward(loss)?;
    let analytic = tape.grad(x);

    let eval_at = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.param(p);
        let loss = f(&mut tape, x)?;
        Ok(tape.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check over a flat parameter vector where the caller supplies both
/// the analytic gradient and a plain scalar evaluator.
pub fn grad_check_flat<F>(analytic: &[f64], point: &[f64], h: f64, mut eval: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != point.len() {
        return Err(Error::ShapeMismatch {
            op: "grad_check_flat",
            lhs: [analytic.len(), 1],
            rhs: [point.len(), 1],
        });
    }
    let mut worst: f64 = 0.0;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let up = eval(&probe)?;
        probe[i] = point[i] - h;
        let down = eval(&probe)?;
        probe[i] = point[i];
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Axis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_three() {
        let err = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                t.sum(y)
            },
            &Tensor::scalar(3.0),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_step_out_of_range() {
        let f = |t: &mut Tape, x: Var| t.sum(x);
        assert!(grad_check(f, &Tensor::scalar(1.0), 1e-2).is_err());
        assert!(grad_check(f, &Tensor::scalar(1.0), 1e-9).is_err());
    }

    /// Every kernel, checked at 100 random points.
    #[test]
    fn every_kernel_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        type Kernel = fn(&mut Tape, Var) -> Result<Var>;
        let kernels: Vec<(&str, Kernel)> = vec![
            ("matmul", |t, x| {
                let xt = t.transpose(x)?;
                let m = t.matmul(x, xt)?;
                let s = t.sin_probe(m)?;
                t.sum(s)
            }),
            ("add_mul", |t, x| {
                let y = t.add(x, x)?;
                let z = t.mul(y, x)?;
                t.sum(z)
            }),
            ("row_broadcast", |t, x| {
                let r = t.slice_rows(x, 0, 1)?;
                let a = t.add_row(x, r)?;
                let m = t.mul_row(a, r)?;
                let s = t.sin_probe(m)?;
                t.sum(s)
            }),
            ("scale_shift_exp", |t, x| {
                let a = t.scale(x, 0.3)?;
                let b = t.shift(a, -0.2)?;
                let e = t.exp(b)?;
                t.sum(e)
            }),
            ("log", |t, x| {
                let e = t.exp(x)?;
                let s = t.shift(e, 0.5)?;
                let l = t.ln(s)?;
                let w = t.sin_probe(l)?;
                t.sum(w)
            }),
            ("softmax", |t, x| {
                let p = t.softmax_rows(x)?;
                let w = t.sin_probe(p)?;
                t.sum(w)
            }),
            ("layer_norm", |t, x| {
                let cols = t.shape(x)[1];
                let g = t.slice_rows(x, 0, 1)?;
                let b = t.constant(Tensor::filled(1, cols, 0.1));
                let y = t.layer_norm(x, g, b)?;
                let w = t.sin_probe(y)?;
                t.sum(w)
            }),
            ("gelu", |t, x| {
                let y = t.gelu(x)?;
                let w = t.sin_probe(y)?;
                t.sum(w)
            }),
            ("concat_slice", |t, x| {
                let a = t.slice_cols(x, 1, 2)?;
                let b = t.concat(&[a, x], Axis::Cols)?;
                let c = t.concat(&[b, b], Axis::Rows)?;
                let w = t.sin_probe(c)?;
                t.sum(w)
            }),
            ("mean", |t, x| {
                let a = t.mean(x, Axis::Rows)?;
                let b = t.mean(x, Axis::Cols)?;
                let wa = t.sin_probe(a)?;
                let wb = t.sin_probe(b)?;
                let sa = t.sum(wa)?;
                let sb = t.sum(wb)?;
                t.add(sa, sb)
            }),
            ("l2_norm", |t, x| t.l2_norm(x)),
            ("cosine", |t, x| {
                let a = t.slice_rows(x, 0, 1)?;
                let b = t.slice_rows(x, 1, 1)?;
                t.cosine(a, b)
            }),
            ("cosine_gram", |t, x| {
                let g = t.cosine_gram(x)?;
                let w = t.sin_probe(g)?;
                t.sum(w)
            }),
        ];
        for (name, f) in kernels {
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let point = Tensor::randn(3, 4, 1.0, &mut rng);
                worst = worst.max(grad_check(f, &point, 1e-6).unwrap());
            }
            assert!(worst < 1e-4, "{name}: {worst}");
        }
    }

    impl Tape {
        /// Elementwise multiply by fixed pseudo-random weights so that
        /// reductions do not hide sign errors in the adjoint.
        fn sin_probe(&mut self, x: Var) -> Result<Var> {
            let [r, c] = self.shape(x);
            let w: Vec<f64> = (0..r * c).map(|i| (1.3 * i as f64 + 0.4).sin()).collect();
            let w = self.constant(Tensor::new(r, c, w)?);
            self.mul(x, w)
        }
    }
}
