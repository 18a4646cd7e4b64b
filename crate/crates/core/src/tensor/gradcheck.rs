//! Central-difference gradient checking at 64-bit precision.

use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Relative-error threshold used by every analytic-gradient check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

/// Coordinates whose gradient is below this fraction of the largest
/// component are compared against that fraction instead of their own size.
const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct DiscrepancyReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub tolerance: f64,
    /// Coordinates whose relative error exceeds `tolerance`.
    pub flagged: Vec<usize>,
}

impl DiscrepancyReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self.flagged = flag(&self.rel_errors, tolerance);
        self
    }
}

fn flag(rel: &[f64], tol: f64) -> Vec<usize> {
    rel.iter()
        .enumerate()
        .filter(|(_, &e)| !(e < tol))
        .map(|(i, _)| i)
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)` per coordinate, where the floor is a small
/// fraction of the largest gradient component. Both-zero coordinates give 0.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> Vec<f64> {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, &x| m.max(x.abs()));
    let floor = (RELATIVE_FLOOR * scale).max(1e-300);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff == 0.0 {
                0.0
            } else {
                diff / a.abs().max(n.abs()).max(floor)
            }
        })
        .collect()
}

/// Compare an analytic gradient against central differences of `f`.
pub fn compare_gradient<F>(mut f: F, point: &Tensor<f64>, analytic: &Tensor<f64>, eps: f64) -> Result<DiscrepancyReport>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if analytic.shape() != point.shape() {
        return Err(Error::Shape(format!(
            "analytic gradient {:?} vs point {:?}",
            analytic.shape(),
            point.shape()
        )));
    }
    let mut probe = point.clone();
    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let x0 = point.data()[i];
        let mut at = |x: f64| -> Result<f64> {
            probe.data_mut()[i] = x;
            let v = f(&probe)?;
            if !v.is_finite() {
                return Err(Error::NonFiniteProbe {
                    coordinate: i,
                    value: v,
                });
            }
            Ok(v)
        };
        let (f1, fm1) = (at(x0 + eps)?, at(x0 - eps)?);
        let (f2, fm2) = (at(x0 + 2.0 * eps)?, at(x0 - 2.0 * eps)?);
        probe.data_mut()[i] = x0;
        // Fourth-order central stencil.
        numeric.push((8.0 * (f1 - fm1) - (f2 - fm2)) / (12.0 * eps));
    }
    let analytic = analytic.data().to_vec();
    let rel_errors = relative_error(&analytic, &numeric);
    let (worst_coordinate, max_rel_error) = rel_errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(DiscrepancyReport {
        flagged: flag(&rel_errors, GRADCHECK_TOLERANCE),
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        worst_coordinate,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

/// Check a function expressed on the tape: `build` receives a fresh graph and
/// the leaf holding the point, and returns the scalar output.
pub fn gradcheck<F>(build: F, point: &Tensor<f64>, eps: f64) -> Result<DiscrepancyReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = build(&mut g, x)?;
    let fx = g.value(y).item();
    if !fx.is_finite() {
        return Err(Error::NonFinite(format!("f(point) = {fx}")));
    }
    let analytic = g.backward(y)?.wrt(x);
    compare_gradient(
        |p| {
            let mut g = Graph::new();
            let x = g.constant(p.clone());
            let y = build(&mut g, x)?;
            Ok(g.value(y).item())
        },
        point,
        &analytic,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let point = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let report = gradcheck(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.analytic, vec![2.0, 4.0]);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let point = Tensor::from_f64(&[3], &[0.1, -4.0, 2.5]).unwrap();
        let report = compare_gradient(|_| Ok(7.0), &point, &Tensor::zeros(&[3]), 1e-5).unwrap();
        assert_eq!(report.rel_errors, vec![0.0; 3]);
        assert!(report.passed());
    }

    #[test]
    fn non_finite_probe_names_the_coordinate() {
        let point = Tensor::from_f64(&[3], &[1.0, 1e-7, 1.0]).unwrap();
        let err = compare_gradient(
            |p| Ok(p.data().iter().map(|x| x.ln()).sum()),
            &point,
            &Tensor::zeros(&[3]),
            1e-5,
        )
        .unwrap_err();
        match err {
            Error::NonFiniteProbe { coordinate, .. } => assert_eq!(coordinate, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let point = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let wrong = Tensor::from_f64(&[2], &[2.0, 5.0]).unwrap();
        let report = compare_gradient(|p| Ok(p.sq_norm()), &point, &wrong, 1e-5).unwrap();
        assert_eq!(report.flagged, vec![1]);
        assert!(!report.passed());
    }
}
