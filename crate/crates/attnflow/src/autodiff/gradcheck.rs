//! Central finite-difference verification of analytic gradients.

use ndarray::ArrayD;

/// Outcome of a finite-difference comparison.
#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with a floor so near-zero entries are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compare the analytic gradient `analytic` of a scalar function `f` with
/// central finite differences at `x0`, perturbing every element by `step`.
///
/// `f` must recompute the scalar from scratch for each perturbed input.
pub fn check_grad<F>(x0: &ArrayD<f64>, analytic: &ArrayD<f64>, step: f64, mut f: F) -> GradCheck
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    assert_eq!(x0.shape(), analytic.shape(), "gradient shape mismatch");
    let mut x = x0.clone();
    let mut max_rel_err: f64 = 0.0;
    let n = x.len();
    for i in 0..n {
        let orig = x.as_slice().unwrap()[i];
        x.as_slice_mut().unwrap()[i] = orig + step;
        let fp = f(&x);
        x.as_slice_mut().unwrap()[i] = orig - step;
        let fm = f(&x);
        x.as_slice_mut().unwrap()[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let an = analytic.as_slice().unwrap()[i];
        max_rel_err = max_rel_err.max(rel_err(an, fd));
    }
    GradCheck {
        max_rel_err,
        checked: n,
    }
}
