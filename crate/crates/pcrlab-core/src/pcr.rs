//! The principal-component-adjusted likelihood-ratio test: statistics for
//! the out-of-model and in-model adjustment variants, the conditional
//! noncentrality of the statistic given the design, test decisions at a
//! chi-square cutoff, and the in-regression distortion diagnostic.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::limits::{phi_spike, SpectralLaw};
use crate::linalg::{chi1_upper_quantile, residualize_orthonormal, top_left_basis, BasisMethod};
use crate::models::{BaseSpectrum, SpikeSpec};

/// Residualized exposures with norm below this multiple of the raw norm are
/// degenerate: the adjustment has absorbed the exposure.
pub const DEGENERACY_THRESHOLD: f64 = 1e-10;

/// Which design enters the principal-component analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Components computed from the covariates alone.
    Out,
    /// Components computed from the full design `[A : W]`, exposure first.
    In,
}

impl Variant {
    /// Stable lowercase token used in result tables.
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Out => "out",
            Variant::In => "in",
        }
    }
}

/// Everything a single test evaluation produces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestOutcome {
    /// The likelihood-ratio statistic.
    pub statistic: f64,
    /// Conditional noncentrality, populated only when the generating truth
    /// is known to the caller.
    pub kappa2: Option<f64>,
    /// Adjustment dimension.
    pub k: usize,
    pub variant: Variant,
    /// Upper chi-square quantile the statistic is compared against.
    pub cutoff: f64,
    pub reject: bool,
}

/// How the outcome-noise variance enters the statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VarianceMode {
    /// Divide by a known variance (the default analysis takes it as one).
    Known(f64),
    /// Divide by the residual-variance estimate from the adjusted
    /// regression of the outcome on the exposure and the retained
    /// components.
    PlugIn,
}

fn check_shapes(
    y: Option<&Array1<f64>>,
    a: &Array1<f64>,
    w: &Array2<f64>,
    k: usize,
    variant: Variant,
) -> Result<()> {
    let (n, p) = (w.nrows(), w.ncols());
    if a.len() != n {
        return Err(Error::InvalidInput(format!(
            "exposure length {} does not match {n} rows",
            a.len()
        )));
    }
    if let Some(y) = y {
        if y.len() != n {
            return Err(Error::InvalidInput(format!(
                "outcome length {} does not match {n} rows",
                y.len()
            )));
        }
    }
    // The in-model design has one extra column.
    let cols = match variant {
        Variant::Out => p,
        Variant::In => p + 1,
    };
    if k == 0 || k >= n.min(cols) {
        return Err(Error::InvalidInput(format!(
            "adjustment dimension k = {k} must satisfy 1 <= k < min({n}, {cols})"
        )));
    }
    Ok(())
}

/// Orthonormal basis (columns) of the adjustment subspace: the span of the
/// top-`k` principal-component scores of the covariates (out-of-model) or
/// of the full design with the exposure as the first column (in-model).
pub fn adjustment_basis(
    a: &Array1<f64>,
    w: &Array2<f64>,
    k: usize,
    variant: Variant,
) -> Result<Array2<f64>> {
    check_shapes(None, a, w, k, variant)?;
    match variant {
        Variant::Out => top_left_basis(&w.view(), k, BasisMethod::Exact),
        Variant::In => {
            let (n, p) = (w.nrows(), w.ncols());
            let mut x = Array2::<f64>::zeros((n, p + 1));
            x.column_mut(0).assign(a);
            x.slice_mut(ndarray::s![.., 1..]).assign(w);
            top_left_basis(&x.view(), k, BasisMethod::Exact)
        }
    }
}

/// Residualizes the exposure against an orthonormal adjustment basis,
/// surfacing degeneracy instead of letting a vanishing exposure masquerade
/// as a conservative test.
pub(crate) fn residual_exposure(a: &Array1<f64>, basis: &Array2<f64>) -> Result<Array1<f64>> {
    let norm_a = a.dot(a).sqrt();
    if norm_a == 0.0 {
        return Err(Error::InvalidInput(
            "exposure vector is identically zero".to_string(),
        ));
    }
    let residual = residualize_orthonormal(&a.view(), &basis.view());
    let ratio = residual.dot(&residual).sqrt() / norm_a;
    if ratio <= DEGENERACY_THRESHOLD {
        return Err(Error::DegenerateExposure {
            ratio,
            threshold: DEGENERACY_THRESHOLD,
        });
    }
    Ok(residual)
}

/// The likelihood-ratio statistic given a precomputed residualized
/// exposure: the squared projection of the outcome onto it.
pub(crate) fn lr_with_residual(y: &Array1<f64>, residual: &Array1<f64>) -> f64 {
    let inner = y.dot(residual);
    inner * inner / residual.dot(residual)
}

/// Out-of-model statistic: project the outcome onto the exposure
/// residualized against the top-`k` covariate principal components.
pub fn lr_out(y: &Array1<f64>, a: &Array1<f64>, w: &Array2<f64>, k: usize) -> Result<f64> {
    check_shapes(Some(y), a, w, k, Variant::Out)?;
    let basis = adjustment_basis(a, w, k, Variant::Out)?;
    let residual = residual_exposure(a, &basis)?;
    Ok(lr_with_residual(y, &residual))
}

/// In-model statistic: components are extracted from `[A : W]`, so the
/// exposure itself shapes the adjustment.
pub fn lr_in(y: &Array1<f64>, a: &Array1<f64>, w: &Array2<f64>, k: usize) -> Result<f64> {
    check_shapes(Some(y), a, w, k, Variant::In)?;
    let basis = adjustment_basis(a, w, k, Variant::In)?;
    let residual = residual_exposure(a, &basis)?;
    Ok(lr_with_residual(y, &residual))
}

/// Conditional noncentrality of the statistic given the realized design:
/// `kappa2 = ((beta' W' + delta A')(I - P) A)^2 / (A'(I - P) A)` with unit
/// outcome-noise variance. The exposure coefficient is accepted only for a
/// dimension check; it influences the value through the realized exposure
/// alone.
pub fn kappa2(
    a: &Array1<f64>,
    w: &Array2<f64>,
    beta: &Array1<f64>,
    theta: Option<&Array1<f64>>,
    delta: f64,
    k: usize,
    variant: Variant,
) -> Result<f64> {
    check_shapes(None, a, w, k, variant)?;
    if beta.len() != w.ncols() {
        return Err(Error::InvalidInput(format!(
            "coefficient length {} does not match {} covariates",
            beta.len(),
            w.ncols()
        )));
    }
    if let Some(theta) = theta {
        if theta.len() != w.ncols() {
            return Err(Error::InvalidInput(format!(
                "exposure-coefficient length {} does not match {} covariates",
                theta.len(),
                w.ncols()
            )));
        }
    }
    if !delta.is_finite() {
        return Err(Error::InvalidInput(format!(
            "delta must be finite, got {delta}"
        )));
    }
    let basis = adjustment_basis(a, w, k, variant)?;
    kappa2_with_basis(a, w, beta, delta, &basis)
}

/// Noncentrality from a precomputed adjustment basis.
pub(crate) fn kappa2_with_basis(
    a: &Array1<f64>,
    w: &Array2<f64>,
    beta: &Array1<f64>,
    delta: f64,
    basis: &Array2<f64>,
) -> Result<f64> {
    let residual = residual_exposure(a, basis)?;
    // Mean of the outcome: W beta + delta A.
    let mut mean = crate::linalg::matvec(&w.view(), false, &beta.view());
    mean.scaled_add(delta, a);
    let inner = mean.dot(&residual);
    Ok(inner * inner / residual.dot(&residual))
}

/// Runs the level-`alpha` test with the outcome-noise variance known to be
/// one.
pub fn run_test(
    y: &Array1<f64>,
    a: &Array1<f64>,
    w: &Array2<f64>,
    k: usize,
    variant: Variant,
    alpha: f64,
) -> Result<TestOutcome> {
    run_test_with_variance(y, a, w, k, variant, alpha, VarianceMode::Known(1.0))
}

/// Runs the level-`alpha` test with an explicit variance treatment.
pub fn run_test_with_variance(
    y: &Array1<f64>,
    a: &Array1<f64>,
    w: &Array2<f64>,
    k: usize,
    variant: Variant,
    alpha: f64,
    mode: VarianceMode,
) -> Result<TestOutcome> {
    check_shapes(Some(y), a, w, k, variant)?;
    let cutoff = chi1_upper_quantile(alpha)?;
    let basis = adjustment_basis(a, w, k, variant)?;
    let residual = residual_exposure(a, &basis)?;
    let raw = lr_with_residual(y, &residual);
    let sigma2 = match mode {
        VarianceMode::Known(v) => {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "known variance must be positive, got {v}"
                )));
            }
            v
        }
        VarianceMode::PlugIn => {
            let df = y.len() as i64 - k as i64 - 1;
            if df <= 0 {
                return Err(Error::InvalidInput(format!(
                    "plug-in variance needs n > k + 1, got n = {}, k = {k}",
                    y.len()
                )));
            }
            // Residual variance of the regression of the outcome on the
            // adjustment components and the exposure.
            let mut fitted_out = residualize_orthonormal(&y.view(), &basis.view());
            let coef = fitted_out.dot(&residual) / residual.dot(&residual);
            fitted_out.scaled_add(-coef, &residual);
            fitted_out.dot(&fitted_out) / df as f64
        }
    };
    let statistic = raw / sigma2;
    Ok(TestOutcome {
        statistic,
        kappa2: None,
        k,
        variant,
        cutoff,
        reject: statistic > cutoff,
    })
}

/// The in-regression distortion diagnostic: the population linear-response
/// coefficient of the exposure on the first coordinate after adjustment,
/// `c* = sum_j phi_1j beta0' v_j v_j' e1`, summed over all population
/// directions of a classical spiked model (unit bulk, all spikes retained).
pub fn c_star_p(beta0: &Array1<f64>, spike: &SpikeSpec, gamma: f64) -> Result<f64> {
    let p = beta0.len();
    spike.validate(p)?;
    if !matches!(spike.base, BaseSpectrum::UnitBulk) {
        return Err(Error::NotApplicable(
            "the distortion diagnostic is defined for the unit-bulk model".to_string(),
        ));
    }
    let h = SpectralLaw::classical(gamma)?;
    let alphas: Vec<f64> = spike
        .eigenpairs
        .iter()
        .map(|(strength, _)| 1.0 + strength)
        .collect();
    // Bulk directions carry coefficient one, so the full sum collapses to
    // the first coordinate plus spike corrections.
    let mut c_star = beta0[0];
    for (j, (_, v)) in spike.eigenpairs.iter().enumerate() {
        let phi1 = phi_spike(1, j, &alphas, &h)?;
        c_star += (phi1 - 1.0) * beta0.dot(v) * v[0];
    }
    Ok(c_star)
}
