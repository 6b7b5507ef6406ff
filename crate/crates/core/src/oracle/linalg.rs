//! Dense helpers for the oracle: Cholesky factorization of the small SPD
//! precision matrices that arise per binary configuration, log-sum-exp, and
//! Gauss-Hermite quadrature for independent cross-checks.

use ndarray::{Array1, Array2};

/// Lower-triangular Cholesky factor, or None if the matrix is not positive
/// definite.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// log det A from its Cholesky factor.
pub fn chol_logdet(l: &Array2<f64>) -> f64 {
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Solve A x = b given A = L L^T.
pub fn chol_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            let v = y[k];
            y[i] -= l[(i, k)] * v;
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let v = y[k];
            y[i] -= l[(k, i)] * v;
        }
        y[i] /= l[(i, i)];
    }
    y
}

/// A^-1 from the Cholesky factor (column-by-column solves).
pub fn chol_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::<f64>::zeros(n);
        e[j] = 1.0;
        let col = chol_solve(l, &e);
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    inv
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Gauss-Hermite nodes and weights for `int e^{-x^2} f(x) dx ~ sum w_i f(x_i)`.
///
/// Roots are found by bisection on the interlacing brackets supplied by the
/// previous order, using the orthonormal recurrence; weights are Christoffel
/// numbers `1 / sum_k p_k(x_i)^2`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    // orthonormal value vector p_0..p_m at x
    let eval = |m: usize, x: f64| -> Vec<f64> {
        let mut p = Vec::with_capacity(m + 1);
        p.push(std::f64::consts::PI.powf(-0.25));
        if m >= 1 {
            p.push(std::f64::consts::SQRT_2 * x * p[0]);
        }
        for k in 1..m {
            let next = x * (2.0 / (k as f64 + 1.0)).sqrt() * p[k]
                - (k as f64 / (k as f64 + 1.0)).sqrt() * p[k - 1];
            p.push(next);
        }
        p
    };
    let pn = |m: usize, x: f64| -> f64 { *eval(m, x).last().unwrap() };

    let mut roots: Vec<f64> = vec![0.0]; // roots of p_1
    for m in 2..=n {
        let bound = (2.0 * m as f64 + 1.0).sqrt() + 1.0;
        let mut brackets = Vec::with_capacity(m + 1);
        brackets.push(-bound);
        brackets.extend(roots.iter().copied());
        brackets.push(bound);
        let mut next = Vec::with_capacity(m);
        for w in brackets.windows(2) {
            let (mut lo, mut hi) = (w[0], w[1]);
            let flo = pn(m, lo);
            debug_assert!(flo * pn(m, hi) < 0.0, "interlacing bracket failed");
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if pn(m, mid) * flo > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-16 * (1.0 + mid.abs()) {
                    break;
                }
            }
            next.push(0.5 * (lo + hi));
        }
        roots = next;
    }
    let weights = roots
        .iter()
        .map(|&x| {
            let p = eval(n - 1, x);
            1.0 / p.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    (roots, weights)
}

/// log of `int f(x) dx` via Gauss-Hermite after standardizing around
/// (center, sigma); `log_f` evaluates log f. Works in log space so strongly
/// peaked integrands cannot overflow.
pub fn gh_log_integral(
    nodes: &[f64],
    weights: &[f64],
    center: f64,
    sigma: f64,
    log_f: impl Fn(f64) -> f64,
) -> f64 {
    let scale = std::f64::consts::SQRT_2 * sigma;
    let terms: Vec<f64> = nodes
        .iter()
        .zip(weights)
        .map(|(&u, &w)| w.ln() + u * u + scale.ln() + log_f(center + scale * u))
        .collect();
    logsumexp(&terms)
}
