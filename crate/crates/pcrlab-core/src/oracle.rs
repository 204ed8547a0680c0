//! Slow reference implementations used to cross-check the fast paths.
//!
//! Everything in this module is deliberately written with a different
//! algorithm than the production code it validates: quadrature and series
//! where the library uses closed forms, Gaussian elimination where the
//! library uses orthogonal decompositions, exact enumeration where the
//! library uses algebraic shortcuts. Tests compare the two routes; the
//! implementations here are never called from the hot paths.

use ndarray::{Array1, Array2};

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance
/// `tol`. Recursion depth is capped; the cap is generous for the smooth
/// integrands used in this crate.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1)
            + recurse(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 48)
}

/// Survival function of the noncentral chi-square with one degree of freedom
/// by direct quadrature of the density after the substitution `x = u^2`:
///
/// `P(X > t) = sqrt(2/pi) * int_{sqrt(t)}^inf exp(-(u^2+l)/2) cosh(sqrt(l) u) du`
///
/// with the integrand evaluated in the overflow-safe two-Gaussian form.
pub fn ncx2_sf_quadrature(t: f64, ncp: f64) -> f64 {
    assert!(t >= 0.0 && ncp >= 0.0);
    let s = ncp.sqrt();
    let lo = t.sqrt();
    let hi = (lo.max(s) + 14.0).max(lo + 1.0);
    let integrand = move |u: f64| -> f64 {
        let a = u - s;
        let b = u + s;
        0.5 * ((-0.5 * a * a).exp() + (-0.5 * b * b).exp())
    };
    let scale = (2.0 / std::f64::consts::PI).sqrt();
    (scale * adaptive_simpson(&integrand, lo, hi, 1e-13)).clamp(0.0, 1.0)
}

/// Survival function of the noncentral chi-square with one degree of freedom
/// as a Poisson mixture of central chi-square tails, using the degree
/// recurrence `S_{v+2}(t) = S_v(t) + (t/2)^{v/2} e^{-t/2} / Gamma(v/2 + 1)`.
pub fn ncx2_sf_series(t: f64, ncp: f64) -> f64 {
    assert!(t >= 0.0 && ncp >= 0.0);
    if t == 0.0 {
        return 1.0;
    }
    let half = ncp / 2.0;
    let th = t / 2.0;
    // j = 0 terms: Poisson weight and the central chi-square(1) tail.
    let mut pois = (-half).exp();
    let mut pois_mass = pois;
    let mut sf = libm::erfc(th.sqrt());
    // Gamma(3/2) = sqrt(pi)/2.
    let mut inc = th.sqrt() * (-th).exp() * 2.0 / std::f64::consts::PI.sqrt();
    let mut total = pois * sf;
    let mut halfdf = 0.5; // v/2 for the current degree v = 1 + 2j.
    for j in 1..2000 {
        sf += inc;
        inc *= th / (halfdf + 1.0);
        halfdf += 1.0;
        pois *= half / j as f64;
        pois_mass += pois;
        total += pois * sf.min(1.0);
        // Remaining Poisson mass bounds the truncation error by itself.
        if 1.0 - pois_mass < 1e-15 && j as f64 > half {
            break;
        }
    }
    total.clamp(0.0, 1.0)
}

/// Upper-tail chi-square(1) quantile by bisection on the closed-form tail
/// `P(X > t) = erfc(sqrt(t/2))`, independent of any quantile approximation.
pub fn chi1_quantile_bisect(alpha: f64) -> f64 {
    assert!(alpha > 0.0 && alpha < 1.0);
    let sf = |t: f64| libm::erfc((t / 2.0).sqrt());
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while sf(hi) > alpha {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sf(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Two-sided Kolmogorov-Smirnov statistic of a sample against a continuous
/// reference CDF. The sample is sorted in place.
pub fn ks_statistic(sample: &mut [f64], cdf: &dyn Fn(f64) -> f64) -> f64 {
    assert!(!sample.is_empty());
    sample.sort_by(|a, b| a.partial_cmp(b).expect("ks_statistic: NaN in sample"));
    let n = sample.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sample.iter().enumerate() {
        let f = cdf(x);
        let lo = f - i as f64 / n;
        let hi = (i + 1) as f64 / n - f;
        d = d.max(lo).max(hi);
    }
    d
}

/// Asymptotic two-sided Kolmogorov-Smirnov critical value
/// `c(alpha) / sqrt(n)` with `c(alpha) = sqrt(-ln(alpha/2) / 2)`.
pub fn ks_critical_value(n: usize, alpha: f64) -> f64 {
    assert!(n > 0 && alpha > 0.0 && alpha < 1.0);
    ((-(alpha / 2.0).ln()) / 2.0).sqrt() / (n as f64).sqrt()
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting. Returns
/// `None` when a pivot collapses (singular system).
pub fn solve_linear(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    assert_eq!(n, b.len());
    let mut m = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let mut piv = col;
        for row in col + 1..n {
            if m[[row, col]].abs() > m[[piv, col]].abs() {
                piv = row;
            }
        }
        if m[[piv, col]].abs() < 1e-12 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                let tmp = m[[col, j]];
                m[[col, j]] = m[[piv, j]];
                m[[piv, j]] = tmp;
            }
            rhs.swap(col, piv);
        }
        for row in col + 1..n {
            let factor = m[[row, col]] / m[[col, col]];
            for j in col..n {
                m[[row, j]] -= factor * m[[col, j]];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for j in row + 1..n {
            acc -= m[[row, j]] * x[j];
        }
        x[row] = acc / m[[row, row]];
    }
    Some(x)
}

/// Orthogonal projection of `y` onto the column space of `x`, computed by
/// solving the normal equations `(x^T x) c = x^T y` with Gaussian
/// elimination. Requires `x` to have full column rank.
pub fn project_via_normal_equations(y: &Array1<f64>, x: &Array2<f64>) -> Array1<f64> {
    let p = x.ncols();
    let mut xtx = Array2::zeros((p, p));
    let mut xty = Array1::zeros(p);
    for i in 0..p {
        for j in 0..p {
            xtx[[i, j]] = x.column(i).dot(&x.column(j));
        }
        xty[i] = x.column(i).dot(y);
    }
    let coef = solve_linear(&xtx, &xty).expect("project_via_normal_equations: rank deficient");
    let mut fitted = Array1::zeros(y.len());
    for j in 0..p {
        let c = coef[j];
        fitted.zip_mut_with(&x.column(j), |f, &xc| *f += c * xc);
    }
    fitted
}

/// Exact first and second moments of one row of the two-group binomial
/// mixture design, by enumeration over the label and the Binomial(2, q)
/// support. Coordinates `0..m` follow the shared label with success
/// probability `q1` or `q2`; the rest are independent `Binomial(2, q_null)`.
/// Returns the mean vector and the covariance matrix.
pub fn binomial_mixture_moments(
    p: usize,
    m: usize,
    q1: f64,
    q2: f64,
    q_null: f64,
) -> (Array1<f64>, Array2<f64>) {
    assert!(m <= p);
    let mean_q = |q: f64| 2.0 * q;
    let mom2_q = |q: f64| {
        // E[X^2] over the Binomial(2, q) support {0, 1, 2}.
        let p0 = (1.0 - q) * (1.0 - q);
        let p1 = 2.0 * q * (1.0 - q);
        let p2 = q * q;
        0.0 * p0 + 1.0 * p1 + 4.0 * p2
    };
    let mean_s = 0.5 * (mean_q(q1) + mean_q(q2));
    let var_s = 0.5 * (mom2_q(q1) + mom2_q(q2)) - mean_s * mean_s;
    // Distinct labelled coordinates are conditionally independent.
    let cov_ss = 0.5 * (mean_q(q1) * mean_q(q1) + mean_q(q2) * mean_q(q2)) - mean_s * mean_s;
    let mean_n = mean_q(q_null);
    let var_n = mom2_q(q_null) - mean_n * mean_n;
    let mut mean = Array1::zeros(p);
    let mut cov = Array2::zeros((p, p));
    for i in 0..p {
        if i < m {
            mean[i] = mean_s;
            cov[[i, i]] = var_s;
        } else {
            mean[i] = mean_n;
            cov[[i, i]] = var_n;
        }
    }
    for i in 0..m {
        for j in 0..m {
            if i != j {
                cov[[i, j]] = cov_ss;
            }
        }
    }
    (mean, cov)
}

/// Power of the cutoff-`t` test under the scaled noncentral limit: the
/// expectation over `Z ~ N(0,1)` of the chi-square(1) tail beyond
/// `t / scale` with random noncentrality `(Z + sqrt(ncp))^2`, evaluated
/// by quadrature with the series tail as the inner routine.
/// Least-squares coefficient of the first design column together with the
/// leading diagonal entry of the inverse Gram matrix, computed through
/// explicit normal equations; the squared standardized coefficient is then
/// `coef^2 / inv00` under unit noise variance.
pub fn standardized_first_coefficient(design: &Array2<f64>, y: &Array1<f64>) -> Option<(f64, f64)> {
    let (n, q) = design.dim();
    assert_eq!(y.len(), n);
    let mut gram = Array2::<f64>::zeros((q, q));
    let mut xty = Array1::<f64>::zeros(q);
    for i in 0..q {
        for j in 0..q {
            gram[(i, j)] = design.column(i).dot(&design.column(j));
        }
        xty[i] = design.column(i).dot(y);
    }
    let coef = solve_linear(&gram, &xty)?;
    let mut e0 = Array1::<f64>::zeros(q);
    e0[0] = 1.0;
    let inv_col = solve_linear(&gram, &e0)?;
    Some((coef[0], inv_col[0]))
}

pub fn power_by_quadrature(scale: f64, ncp: f64, t: f64) -> f64 {
    assert!(scale > 0.0 && ncp >= 0.0 && t >= 0.0);
    let density = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let f = move |z: f64| {
        // The mixture scales the noncentrality, not the chi-square variate:
        // the conditional law stays unit chi-square with one degree.
        let shift = z + ncp.sqrt();
        density(z) * ncx2_sf_series(t, scale * shift * shift)
    };
    adaptive_simpson(&f, -14.0, 14.0, 1e-11).clamp(0.0, 1.0)
}
