//! Central finite-difference oracle for analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Checked flat coordinates, in probe order.
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `grad` against central differences of `f` around `point`.
///
/// `coords` restricts the probe set; `None` probes every coordinate.
pub fn grad_check_fn(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    grad: &[f64],
    step: f64,
    tolerance: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    if grad.len() != point.len() {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            left: vec![point.len()],
            right: vec![grad.len()],
        });
    }
    let coords: Vec<usize> = match coords {
        Some(c) => c.to_vec(),
        None => (0..point.len()).collect(),
    };
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(coords.len());
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x).map_err(|_| Error::NonFiniteProbe { coord: i })?;
        x[i] = orig - step;
        let down = f(&x).map_err(|_| Error::NonFiniteProbe { coord: i })?;
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteProbe { coord: i });
        }
        numeric.push((up - down) / (2.0 * step));
    }
    let analytic: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
    let rel_errors: Vec<f64> = analytic.iter().zip(&numeric).map(|(&a, &n)| relative_error(a, n)).collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    let mean_rel_error = if rel_errors.is_empty() {
        0.0
    } else {
        rel_errors.iter().sum::<f64>() / rel_errors.len() as f64
    };
    Ok(GradCheckReport {
        coords,
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        mean_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}

/// Gradient check of a graph-built scalar function of one tensor input.
pub fn grad_check(
    build: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
    point: &Tensor<f64>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let x = g.param(point.clone())?;
    let loss = build(&mut g, x)?;
    let grad = g.backward(loss)?.wrt(&g, x);
    let shape = point.shape().to_vec();
    grad_check_fn(
        |p| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(shape.clone(), p.to_vec())?)?;
            let loss = build(&mut g, x)?;
            g.value(loss).item()
        },
        point.data(),
        grad.data(),
        step,
        tolerance,
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check_fn(|x| Ok(x[0] * x[0]), &[3.0], &[6.0], 1e-4, 1e-6, None).unwrap();
        assert!((r.numeric[0] - 6.0).abs() < 1e-7);
        assert!(r.passed);
    }

    #[test]
    fn wrong_adjoint_fails() {
        let point = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let y = g.custom_unary(x, |v| v.sin(), |v| v.sin())?;
                g.sum(y)
            },
            &point,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        let err = grad_check_fn(
            |x| if x[1] > 1.0 { Ok(f64::NAN) } else { Ok(x[0]) },
            &[0.0, 1.0],
            &[1.0, 0.0],
            1e-3,
            1e-4,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteProbe { coord: 1 }));
    }
}
