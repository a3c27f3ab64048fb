//! Small tridiagonal kernels shared by the propagator and the eigensolvers.

use num_complex::Complex64;

/// Solves `A y = rhs` in place for a tridiagonal `A` with constant
/// off-diagonal `off` and diagonal `diag`. `scratch` must be as long as `rhs`.
pub(crate) fn solve_constant_off_complex(
    diag: &[Complex64],
    off: Complex64,
    rhs: &mut [Complex64],
    scratch: &mut [Complex64],
) {
    let n = rhs.len();
    debug_assert!(diag.len() == n && scratch.len() >= n);
    if n == 0 {
        return;
    }
    let mut denom = diag[0];
    scratch[0] = off / denom;
    rhs[0] /= denom;
    for i in 1..n {
        denom = diag[i] - off * scratch[i - 1];
        scratch[i] = off / denom;
        rhs[i] = (rhs[i] - off * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        let next = rhs[i + 1];
        rhs[i] -= scratch[i] * next;
    }
}

/// Real counterpart of [`solve_constant_off_complex`].
pub(crate) fn solve_constant_off_real(diag: &[f64], off: f64, rhs: &mut [f64]) {
    let n = rhs.len();
    if n == 0 {
        return;
    }
    let mut c = vec![0.0; n];
    let mut denom = diag[0];
    c[0] = off / denom;
    rhs[0] /= denom;
    for i in 1..n {
        denom = diag[i] - off * c[i - 1];
        c[i] = off / denom;
        rhs[i] = (rhs[i] - off * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

/// Number of eigenvalues strictly below `shift` (Sturm sequence count).
fn count_below(diag: &[f64], off: f64, shift: f64) -> usize {
    let off2 = off * off;
    let mut count = 0;
    let mut q = 1.0;
    for (i, &d) in diag.iter().enumerate() {
        q = if i == 0 { d - shift } else { d - shift - off2 / q };
        if q == 0.0 {
            q = f64::EPSILON * (off.abs() + d.abs()).max(f64::MIN_POSITIVE);
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Lowest eigenpair of a real symmetric tridiagonal matrix with constant
/// off-diagonal, by bisection followed by inverse iteration. The returned
/// vector has unit Euclidean norm and positive sum.
pub(crate) fn lowest_eigenpair(diag: &[f64], off: f64) -> (f64, Vec<f64>) {
    let n = diag.len();
    // Gershgorin bounds.
    let radius = 2.0 * off.abs();
    let mut lo = diag.iter().cloned().fold(f64::INFINITY, f64::min) - radius;
    let mut hi = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + radius;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if count_below(diag, off, mid) >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    let scale = diag.iter().fold(off.abs(), |m, d| m.max(d.abs()));
    let shift = lambda - 1e-9 * scale.max(1.0);
    let shifted: Vec<f64> = diag.iter().map(|d| d - shift).collect();

    let mut v = vec![1.0; n];
    for _ in 0..4 {
        solve_constant_off_real(&shifted, off, &mut v);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
    }
    if v.iter().sum::<f64>() < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let energy = rayleigh(diag, off, &v);
    (energy, v)
}

/// `vᵀ A v / vᵀ v`.
pub(crate) fn rayleigh(diag: &[f64], off: f64, v: &[f64]) -> f64 {
    let mut num = 0.0;
    let n = v.len();
    for i in 0..n {
        let mut av = diag[i] * v[i];
        if i > 0 {
            av += off * v[i - 1];
        }
        if i + 1 < n {
            av += off * v[i + 1];
        }
        num += v[i] * av;
    }
    num / v.iter().map(|x| x * x).sum::<f64>()
}
