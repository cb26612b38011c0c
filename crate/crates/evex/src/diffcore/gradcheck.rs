//! Central finite-difference gradient checking, used by the test suites.
//!
//! The oracle re-evaluates the forward pass at perturbed inputs and never
//! touches the backward implementation it is checking.

/// Default perturbation for central differences.
pub const FD_EPS: f64 = 1e-6;

/// Central finite-difference gradient of `f` at `x`.
pub fn central_diff<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xs = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + eps;
        let fp = f(&xs);
        xs[i] = orig - eps;
        let fm = f(&xs);
        xs[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Worst mismatch between an analytic and a finite-difference gradient.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradMismatch {
    pub max_rel: f64,
    pub max_abs: f64,
    pub worst_index: usize,
}

/// Compares gradients with a relative criterion away from zero and an
/// absolute criterion near zero.
pub fn compare_grads(analytic: &[f64], fd: &[f64], near_zero: f64) -> GradMismatch {
    assert_eq!(analytic.len(), fd.len());
    let mut worst = GradMismatch::default();
    for (i, (&a, &f)) in analytic.iter().zip(fd).enumerate() {
        let abs = (a - f).abs();
        let scale = a.abs().max(f.abs());
        if scale < near_zero {
            if abs > worst.max_abs {
                worst.max_abs = abs;
                worst.worst_index = i;
            }
        } else {
            let rel = abs / scale;
            if rel > worst.max_rel {
                worst.max_rel = rel;
                worst.worst_index = i;
            }
            worst.max_abs = worst.max_abs.max(abs);
        }
    }
    worst
}

/// Asserts that an analytic gradient matches the finite-difference gradient
/// of `f` at `x` within `rel_tol` (or `abs_tol` where both values are below
/// `near_zero`). Panics with a diagnostic on failure.
pub fn assert_grad_close<F>(
    f: F,
    x: &[f64],
    analytic: &[f64],
    rel_tol: f64,
    abs_tol: f64,
    label: &str,
) where
    F: FnMut(&[f64]) -> f64,
{
    let fd = central_diff(f, x, FD_EPS);
    let near_zero = 1e-6;
    let m = compare_grads(analytic, &fd, near_zero);
    assert!(
        m.max_rel < rel_tol,
        "{}: gradient mismatch at index {}: analytic {} vs fd {} (max rel {:.3e}, max abs {:.3e})",
        label,
        m.worst_index,
        analytic[m.worst_index],
        fd[m.worst_index],
        m.max_rel,
        m.max_abs
    );
    // near-zero entries are held to the absolute tolerance
    for (i, (&a, &fdv)) in analytic.iter().zip(&fd).enumerate() {
        if a.abs().max(fdv.abs()) < near_zero {
            assert!(
                (a - fdv).abs() < abs_tol,
                "{}: near-zero gradient mismatch at {}: {} vs {}",
                label,
                i,
                a,
                fdv
            );
        }
    }
}
