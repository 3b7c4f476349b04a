//! Central finite differences: the independent gradient oracle.
//!
//! Only evaluates the forward pass of whatever function it is given, so it
//! shares nothing with the reverse sweep it is used to check.

use crate::error::Result;

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_difference_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    assert!(h > 0.0, "step must be positive");
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Worst relative disagreement between two gradients.
///
/// Coordinates where both values are below `floor` in magnitude are
/// compared absolutely against `floor` instead (finite differences carry
/// ~1e-11 noise, which would dominate a pure ratio near zero).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (&a, &b) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(b.abs());
        let err = if scale > floor {
            (a - b).abs() / scale
        } else {
            (a - b).abs() / floor
        };
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Mode, OpKind};

    #[test]
    fn quadratic_derivative() {
        let f = |x: &[f64]| Ok(x[0] * x[0]);
        let g = finite_difference_gradient(f, &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let f = |x: &[f64]| {
            let mut g = Graph::new(Mode::Infer, 0);
            let t = g.input(&[1], x.to_vec())?;
            let s = g.apply(OpKind::Sigmoid, &[&t])?;
            let sum = g.apply(OpKind::SumAll, &[&s])?;
            Ok(g.values(&sum)[0])
        };
        let g = finite_difference_gradient(f, &[0.0], 1e-5).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn elu_matches_backward_at_negative_one() {
        let eval = |x: &[f64]| -> crate::Result<(f64, Option<Vec<f64>>)> {
            let mut g = Graph::new(Mode::Infer, 0);
            let t = g.input(&[1], x.to_vec())?;
            let y = g.apply(OpKind::Elu, &[&t])?;
            let sum = g.apply(OpKind::SumAll, &[&y])?;
            g.backward(&sum)?;
            Ok((g.values(&sum)[0], g.grad(&t).map(|s| s.to_vec())))
        };
        let x = [-1.0];
        let (_, analytic) = eval(&x).unwrap();
        let numeric =
            finite_difference_gradient(|p| eval(p).map(|(v, _)| v), &x, 1e-5).unwrap();
        let err = (analytic.unwrap()[0] - numeric[0]).abs();
        assert!(err < 1e-6, "elu gradient error {err}");
    }
}
