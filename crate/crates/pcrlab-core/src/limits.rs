//! Asymptotic limit formulas from the spectral theory of spiked sample
//! covariance matrices: the spike transform `psi`, spike classification,
//! bilinear-form limit coefficients, bulk moments, scenario constants, the
//! limiting law of the conditional noncentrality, and asymptotic power.
//!
//! All spectral inputs are described by an atomic limiting law for the
//! non-spike eigenvalues plus a list of spiked eigenvalues of the population
//! covariance. Spiked eigenvalues are the actual eigenvalues `alpha`
//! (for a unit bulk with additive strength `lambda`, `alpha = 1 + lambda`).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{chi1_upper_quantile, noncentral_chi1_sf};

/// Relative tolerance for detecting evaluation on a bulk atom.
const ATOM_TOL: f64 = 1e-12;

/// Atomic representation of the limiting spectral law of the non-spike
/// eigenvalues.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum BulkLaw {
    /// Point mass at one: the classical identity-bulk case.
    PointMass,
    /// Weighted atoms `(value, weight)`, weights summing to one.
    WeightedAtoms(Vec<(f64, f64)>),
}

/// Limiting spectral law of the non-spike eigenvalues together with the
/// aspect ratio `gamma = lim p/n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralLaw {
    pub gamma: f64,
    pub bulk: BulkLaw,
}

impl SpectralLaw {
    /// The classical setting: unit bulk (point mass at one).
    pub fn classical(gamma: f64) -> Result<Self> {
        let law = SpectralLaw {
            gamma,
            bulk: BulkLaw::PointMass,
        };
        law.validate()?;
        Ok(law)
    }

    /// A general atomic bulk law.
    pub fn atomic(gamma: f64, atoms: Vec<(f64, f64)>) -> Result<Self> {
        let law = SpectralLaw {
            gamma,
            bulk: BulkLaw::WeightedAtoms(atoms),
        };
        law.validate()?;
        Ok(law)
    }

    /// Checks positivity of gamma and atoms and normalization of weights.
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::InvalidSpec(format!(
                "spectral law: gamma must be positive and finite, got {}",
                self.gamma
            )));
        }
        if let BulkLaw::WeightedAtoms(atoms) = &self.bulk {
            if atoms.is_empty() {
                return Err(Error::InvalidSpec(
                    "spectral law: atom list must be non-empty".to_string(),
                ));
            }
            let mut total = 0.0;
            for &(value, weight) in atoms {
                if !value.is_finite() || value <= 0.0 {
                    return Err(Error::InvalidSpec(format!(
                        "spectral law: atom values must be positive, got {value}"
                    )));
                }
                if !weight.is_finite() || weight <= 0.0 {
                    return Err(Error::InvalidSpec(format!(
                        "spectral law: atom weights must be positive, got {weight}"
                    )));
                }
                total += weight;
            }
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidSpec(format!(
                    "spectral law: weights must sum to one, got {total}"
                )));
            }
        }
        Ok(())
    }

    /// Atoms as a `(value, weight)` list; the point mass reads as `[(1, 1)]`.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        match &self.bulk {
            BulkLaw::PointMass => vec![(1.0, 1.0)],
            BulkLaw::WeightedAtoms(atoms) => atoms.clone(),
        }
    }

    /// First moment of the bulk law itself.
    pub fn m1_h(&self) -> f64 {
        self.atoms().iter().map(|(t, w)| t * w).sum()
    }

    /// Second moment of the bulk law itself.
    pub fn m2_h(&self) -> f64 {
        self.atoms().iter().map(|(t, w)| t * t * w).sum()
    }

    /// The bulk value when the law is a single atom.
    pub fn single_atom(&self) -> Option<f64> {
        let atoms = self.atoms();
        if atoms.len() == 1 {
            Some(atoms[0].0)
        } else {
            None
        }
    }

    fn check_off_atoms(&self, alpha: f64) -> Result<()> {
        if !alpha.is_finite() || alpha == 0.0 {
            return Err(Error::InvalidInput(format!(
                "spectral transform: alpha must be finite and nonzero, got {alpha}"
            )));
        }
        for (t, _) in self.atoms() {
            if (alpha - t).abs() <= ATOM_TOL * t.max(1.0) {
                return Err(Error::Singularity { alpha });
            }
        }
        Ok(())
    }
}

/// The spike transform `psi(alpha) = alpha + gamma alpha int t dH(t) / (alpha - t)`,
/// evaluated as a finite sum over the atoms of `H`.
pub fn psi(alpha: f64, h: &SpectralLaw) -> Result<f64> {
    h.validate()?;
    h.check_off_atoms(alpha)?;
    let sum: f64 = h.atoms().iter().map(|(t, w)| w * t / (alpha - t)).sum();
    Ok(alpha + h.gamma * alpha * sum)
}

/// Analytic derivative of the spike transform:
/// `psi'(alpha) = 1 - gamma int t^2 dH(t) / (alpha - t)^2`.
pub fn psi_prime(alpha: f64, h: &SpectralLaw) -> Result<f64> {
    h.validate()?;
    h.check_off_atoms(alpha)?;
    let sum: f64 = h
        .atoms()
        .iter()
        .map(|(t, w)| w * t * t / ((alpha - t) * (alpha - t)))
        .sum();
    Ok(1.0 - h.gamma * sum)
}

/// Whether a spiked population eigenvalue separates from the bulk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeClass {
    /// `psi'(alpha) > 0`: the sample eigenvalue detaches and the sample
    /// eigenvector carries signal.
    Distant,
    /// `psi'(alpha) <= 0` (including the phase boundary): the spike is
    /// asymptotically indistinguishable from the bulk.
    Close,
}

/// Classifies a spiked eigenvalue by the sign of `psi'`; the boundary
/// itself counts as close.
pub fn classify_spike(alpha: f64, h: &SpectralLaw) -> Result<SpikeClass> {
    let d = psi_prime(alpha, h)?;
    Ok(if d > 0.0 {
        SpikeClass::Distant
    } else {
        SpikeClass::Close
    })
}

/// Phase boundary for the classical unit bulk: eigenvalues above
/// `1 + sqrt(gamma)` are distant.
pub fn classical_boundary(gamma: f64) -> f64 {
    1.0 + gamma.sqrt()
}

fn check_r(r: u8) -> Result<()> {
    if r == 1 || r == 2 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "moment order r must be 1 or 2, got {r}"
        )))
    }
}

fn spike_at(spikes: &[f64], j: usize) -> Result<f64> {
    spikes.get(j).copied().ok_or_else(|| {
        Error::InvalidInput(format!(
            "spike index {j} out of range for {} spikes",
            spikes.len()
        ))
    })
}

/// Limit of the retained bilinear mass of sample spike `j`:
/// `xi_rj = alpha_j psi(alpha_j)^{r-1} psi'(alpha_j)`.
///
/// Only distant spikes produce aligned sample eigenvectors; a close spike
/// returns [`Error::NotApplicable`].
pub fn xi(r: u8, j: usize, spikes: &[f64], h: &SpectralLaw) -> Result<f64> {
    check_r(r)?;
    let alpha = spike_at(spikes, j)?;
    if classify_spike(alpha, h)? == SpikeClass::Close {
        return Err(Error::NotApplicable(format!(
            "xi: spike {j} (alpha = {alpha}) is close, its sample direction carries no signal"
        )));
    }
    let dp = psi_prime(alpha, h)?;
    if r == 1 {
        Ok(alpha * dp)
    } else {
        Ok(alpha * psi(alpha, h)? * dp)
    }
}

/// Limit coefficient of a population direction that the adjustment does not
/// remove: `t` for `r = 1` and `t^2 + gamma m1(H) t` for `r = 2`.
///
/// This covers genuine bulk directions and also spiked directions that are
/// not retained (or are close, hence effectively not captured).
pub fn phi_bulk(r: u8, t: f64, h: &SpectralLaw) -> Result<f64> {
    check_r(r)?;
    h.validate()?;
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "phi_bulk: eigenvalue must be positive, got {t}"
        )));
    }
    if r == 1 {
        Ok(t)
    } else {
        Ok(t * t + h.gamma * h.m1_h() * t)
    }
}

/// Residual limit coefficient of retained spike `j`: the mass of the
/// population spike direction left after projecting out the matching sample
/// direction.
///
/// For a distant spike: `phi_1j = alpha (1 - psi'(alpha))` and
/// `phi_2j = alpha (alpha + gamma m1(H)) - alpha psi(alpha) psi'(alpha)`,
/// each equal to the full direction coefficient minus `xi_rj`. A close
/// spike is asymptotically not captured by any retained sample direction,
/// so its full coefficient [`phi_bulk`] at `alpha` is returned instead.
pub fn phi_spike(r: u8, j: usize, spikes: &[f64], h: &SpectralLaw) -> Result<f64> {
    check_r(r)?;
    let alpha = spike_at(spikes, j)?;
    let full = phi_bulk(r, alpha, h)?;
    match classify_spike(alpha, h)? {
        SpikeClass::Close => Ok(full),
        SpikeClass::Distant => Ok(full - xi(r, j, spikes, h)?),
    }
}

/// Closed-form classical residual coefficients for the unit bulk, written
/// directly in terms of the additive strength `lambda` (`alpha = 1 + lambda`):
/// `phi_1 = gamma (lambda + 1) / lambda^2` and
/// `phi_2 = gamma (lambda + 1) / lambda^2 + gamma^2 (lambda + 1)^2 / lambda^3`.
///
/// This is an independent code path from [`phi_spike`], kept for
/// cross-validation; it requires a distant spike (`lambda > sqrt(gamma)`).
pub fn phi_classical_spike(r: u8, lambda: f64, gamma: f64) -> Result<f64> {
    check_r(r)?;
    if !(lambda.is_finite() && gamma.is_finite()) || gamma <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "phi_classical_spike: need finite lambda and positive gamma, got lambda={lambda}, gamma={gamma}"
        )));
    }
    if lambda <= gamma.sqrt() {
        return Err(Error::NotApplicable(format!(
            "phi_classical_spike: lambda = {lambda} is at or below the boundary sqrt(gamma) = {}",
            gamma.sqrt()
        )));
    }
    let a = lambda + 1.0;
    let first = gamma * a / (lambda * lambda);
    if r == 1 {
        Ok(first)
    } else {
        Ok(first + gamma * gamma * a * a / (lambda * lambda * lambda))
    }
}

/// Classical bulk coefficients for the unit bulk: `1` and `1 + gamma`.
pub fn phi_classical_bulk(r: u8, gamma: f64) -> Result<f64> {
    check_r(r)?;
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "phi_classical_bulk: gamma must be positive, got {gamma}"
        )));
    }
    Ok(if r == 1 { 1.0 } else { 1.0 + gamma })
}

/// Limits of the `(1/p)`-normalized eigenvalue sums of the sample
/// covariance: `m1 = int t dH` and `m2 = int t^2 dH + gamma (int t dH)^2`.
///
/// Both hold for every aspect ratio under the truncated-sum convention
/// (the sums run over the `min(n, p)` nonzero sample eigenvalues but are
/// divided by `p`), because the sums are traces.
pub fn mp_moments(h: &SpectralLaw) -> Result<(f64, f64)> {
    h.validate()?;
    let m1 = h.m1_h();
    let m2 = h.m2_h() + h.gamma * m1 * m1;
    Ok((m1, m2))
}

/// How the exposure-model coefficient enters the scenario constants.
#[derive(Debug, Clone, PartialEq)]
pub enum ThetaSpec {
    /// Fixed vector, described by its projections onto the spike directions
    /// and its total squared norm.
    FixedProjections {
        /// `<theta, v_j>` per spike, aligned with the spike list.
        projections: Vec<f64>,
        /// `||theta||^2`.
        norm2: f64,
    },
    /// Coordinates i.i.d. mean zero with variance `sigma2 / p`: spike
    /// projections vanish in the limit and the norm concentrates at sigma2.
    Random { sigma2: f64 },
}

/// The quadratic-form constants of the theta-fixed limit, reported in both
/// the primary normalization and the alternate one from the classical
/// worked example, which differs by a factor of gamma in `c0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScenarioConstants {
    /// `c0 = sum_j phi_1j <theta, v_j>^2` over all population directions.
    pub c0: f64,
    /// `c4 = (1/gamma) sum_j phi_2j <theta, v_j>^2`.
    pub c4: f64,
    /// `c0 / gamma`: the value the classical worked example prints for its
    /// single-spike case; kept side by side so simulations can adjudicate.
    pub c0_alternate: f64,
}

/// Computes the scenario constants for an adjustment of dimension `k`.
///
/// Spikes with index below `k` that are distant contribute their residual
/// coefficients; all other spike directions contribute in full, as do the
/// bulk directions. Requires a single-atom bulk so that the bulk share of
/// `theta` has an unambiguous coefficient.
pub fn scenario_constants(
    spikes: &[f64],
    h: &SpectralLaw,
    theta: &ThetaSpec,
    k: usize,
) -> Result<ScenarioConstants> {
    h.validate()?;
    let bulk_value = h.single_atom().ok_or_else(|| {
        Error::NotApplicable("scenario constants require a single-atom bulk law".to_string())
    })?;
    let (projections, norm2) = match theta {
        ThetaSpec::FixedProjections { projections, norm2 } => {
            if projections.len() != spikes.len() {
                return Err(Error::InvalidInput(format!(
                    "scenario_constants: {} projections for {} spikes",
                    projections.len(),
                    spikes.len()
                )));
            }
            if !norm2.is_finite() || *norm2 <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "scenario_constants: ||theta||^2 must be positive, got {norm2}"
                )));
            }
            let proj2: f64 = projections.iter().map(|r| r * r).sum();
            if proj2 > norm2 * (1.0 + 1e-9) {
                return Err(Error::InvalidInput(
                    "scenario_constants: spike projections exceed the total norm".to_string(),
                ));
            }
            (projections.clone(), *norm2)
        }
        ThetaSpec::Random { sigma2 } => {
            if !sigma2.is_finite() || *sigma2 < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "scenario_constants: sigma2 must be nonnegative, got {sigma2}"
                )));
            }
            // Spike projections are O(1/sqrt(p)): zero in the limit.
            (vec![0.0; spikes.len()], *sigma2)
        }
    };
    let mut c0 = 0.0;
    let mut c4g = 0.0;
    let mut spike_mass = 0.0;
    for (j, &alpha) in spikes.iter().enumerate() {
        let rho2 = projections[j] * projections[j];
        spike_mass += rho2;
        let retained = j < k && classify_spike(alpha, h)? == SpikeClass::Distant;
        let (p1, p2) = if retained {
            (phi_spike(1, j, spikes, h)?, phi_spike(2, j, spikes, h)?)
        } else {
            (phi_bulk(1, alpha, h)?, phi_bulk(2, alpha, h)?)
        };
        c0 += p1 * rho2;
        c4g += p2 * rho2;
    }
    let bulk_mass = (norm2 - spike_mass).max(0.0);
    c0 += phi_bulk(1, bulk_value, h)? * bulk_mass;
    c4g += phi_bulk(2, bulk_value, h)? * bulk_mass;
    Ok(ScenarioConstants {
        c0,
        c4: c4g / h.gamma,
        c0_alternate: c0 / h.gamma,
    })
}

/// Which coefficients are random in the outcome and exposure models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scenario {
    /// Random outcome coefficient, fixed exposure coefficient.
    BetaRandomThetaFixed,
    /// Fixed outcome coefficient, random exposure coefficient; the variance
    /// constant `C1` of the limit has no closed form and must be supplied.
    BetaFixedThetaRandom,
    /// Both coefficients random.
    BothRandom,
}

/// Inputs to [`kappa2_limit_law`]. Fields irrelevant to a scenario are
/// ignored; `c0`/`c4` are required for the theta-fixed scenario and `c1`
/// for the beta-fixed scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioParams {
    pub sigma2_beta: f64,
    pub sigma2_theta: f64,
    pub sigma2_g: f64,
    /// Aspect ratio `p / n`; weights the second-moment term of the
    /// random-exposure-coefficient variance.
    pub gamma: f64,
    /// Local-alternative strength: `delta = h / sqrt(n)`.
    pub h: f64,
    pub c0: Option<f64>,
    pub c4: Option<f64>,
    pub m1: f64,
    pub m2: f64,
    /// Empirical variance constant for the beta-fixed scenario.
    pub c1: Option<f64>,
}

/// A scaled noncentral chi-square limit `K ~ scale * chi^2_1(ncp)`.
///
/// The degenerate convention: when `scale = 0` the law is the point mass
/// at `ncp` (covering both the no-confounding null, point mass at zero,
/// and deterministic drifts).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LimitLaw {
    pub scale: f64,
    pub ncp: f64,
}

impl LimitLaw {
    /// Mean of the law.
    pub fn mean(&self) -> f64 {
        if self.scale == 0.0 {
            self.ncp
        } else {
            self.scale * (1.0 + self.ncp)
        }
    }

    /// Survival function `P(K > x)` for `x >= 0`.
    pub fn sf(&self, x: f64) -> Result<f64> {
        if !x.is_finite() || x < 0.0 {
            return Err(Error::InvalidInput(format!(
                "LimitLaw::sf: x must be finite and nonnegative, got {x}"
            )));
        }
        if self.scale == 0.0 {
            return Ok(if self.ncp > x { 1.0 } else { 0.0 });
        }
        noncentral_chi1_sf(x / self.scale, self.ncp)
    }

    /// Distribution function `P(K <= x)`.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        Ok(1.0 - self.sf(x)?)
    }
}

/// The limiting law of the conditional noncentrality of the adjusted test,
/// expressed as a scaled noncentral chi-square, `scale * chi^2_1(ncp)`.
///
/// All three scenarios share the shape `scale = V / D`, `ncp = h^2 D^2 / V`
/// where `V` is the variance constant of the confounding projection and `D`
/// the limit of the quadratic form in the residualized exposure:
/// theta fixed, beta random: `V = sigma2_beta (sigma2_g m1 + c4)`,
/// `D = c0 + sigma2_g`; both random: `V = sigma2_beta (sigma2_g m1 +
/// sigma2_theta m2 / gamma)`, `D = sigma2_theta m1 + sigma2_g`; beta fixed,
/// theta random: `V = C1` (empirical), `D = sigma2_theta m1 + sigma2_g`.
///
/// The `m2 / gamma` weight mirrors the theta-fixed constant
/// `c4 = (1/gamma) sum phi_2j <theta, v_j>^2`: averaging that sum over an
/// isotropic theta gives exactly `sigma2_theta m2 / gamma`, and `D` is the
/// limit of the same statistic `|A_res|^2 / n` in both random-theta
/// scenarios, so the denominators agree.
pub fn kappa2_limit_law(scenario: Scenario, params: &ScenarioParams) -> Result<LimitLaw> {
    for (name, v) in [
        ("sigma2_beta", params.sigma2_beta),
        ("sigma2_theta", params.sigma2_theta),
        ("sigma2_g", params.sigma2_g),
        ("m1", params.m1),
        ("m2", params.m2),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidInput(format!(
                "kappa2_limit_law: {name} must be finite and nonnegative, got {v}"
            )));
        }
    }
    if !params.gamma.is_finite() || params.gamma <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "kappa2_limit_law: gamma must be finite and positive, got {}",
            params.gamma
        )));
    }
    if !params.h.is_finite() {
        return Err(Error::InvalidInput(format!(
            "kappa2_limit_law: h must be finite, got {}",
            params.h
        )));
    }
    let (v, d) = match scenario {
        Scenario::BetaRandomThetaFixed => {
            let c0 = params.c0.ok_or_else(|| {
                Error::InvalidInput(
                    "kappa2_limit_law: c0 required for the theta-fixed scenario".to_string(),
                )
            })?;
            let c4 = params.c4.ok_or_else(|| {
                Error::InvalidInput(
                    "kappa2_limit_law: c4 required for the theta-fixed scenario".to_string(),
                )
            })?;
            (
                params.sigma2_beta * (params.sigma2_g * params.m1 + c4),
                c0 + params.sigma2_g,
            )
        }
        Scenario::BothRandom => (
            params.sigma2_beta
                * (params.sigma2_g * params.m1 + params.sigma2_theta * params.m2 / params.gamma),
            params.sigma2_theta * params.m1 + params.sigma2_g,
        ),
        Scenario::BetaFixedThetaRandom => {
            let c1 = params.c1.ok_or(Error::NotAvailable(
                "the beta-fixed scenario needs the empirical constant C1; estimate it from null replications".to_string(),
            ))?;
            if !c1.is_finite() || c1 < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "kappa2_limit_law: C1 must be finite and nonnegative, got {c1}"
                )));
            }
            (c1, params.sigma2_theta * params.m1 + params.sigma2_g)
        }
    };
    if d <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "kappa2_limit_law: denominator constant must be positive, got {d}"
        )));
    }
    if v == 0.0 {
        // Degenerate: the noncentrality concentrates at h^2 D.
        return Ok(LimitLaw {
            scale: 0.0,
            ncp: params.h * params.h * d,
        });
    }
    Ok(LimitLaw {
        scale: v / d,
        ncp: params.h * params.h * d * d / v,
    })
}

/// Recovers the empirical constant `C1` of the beta-fixed scenario from the
/// mean of null-replication noncentralities: at `h = 0` the limit mean is
/// `C1 / (sigma2_theta m1 + sigma2_g)`.
pub fn estimate_c1(
    kappa2_null_mean: f64,
    sigma2_theta: f64,
    m1: f64,
    sigma2_g: f64,
) -> Result<f64> {
    if !kappa2_null_mean.is_finite() || kappa2_null_mean < 0.0 {
        return Err(Error::InvalidInput(format!(
            "estimate_c1: mean noncentrality must be nonnegative, got {kappa2_null_mean}"
        )));
    }
    let d = sigma2_theta * m1 + sigma2_g;
    if !d.is_finite() || d <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "estimate_c1: denominator constant must be positive, got {d}"
        )));
    }
    Ok(kappa2_null_mean * d)
}

/// Asymptotic rejection probability of the cutoff-`t` test when the
/// conditional noncentrality follows `law`:
/// `upsilon(t) = E[Qbar(sqrt(t) - sqrt(K)) + Qbar(sqrt(t) + sqrt(K))]`
/// with `K ~ law`, evaluated to absolute error below 1e-6.
///
/// Uses composite Simpson panels over the Gaussian representation
/// `K = scale (Z + sqrt(ncp))^2` with doubling refinement; this is an
/// independent route from the series-based quadrature oracle.
pub fn asymptotic_power(t: f64, law: &LimitLaw) -> Result<f64> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::InvalidInput(format!(
            "asymptotic_power: cutoff must be finite and nonnegative, got {t}"
        )));
    }
    if !law.scale.is_finite() || law.scale < 0.0 || !law.ncp.is_finite() || law.ncp < 0.0 {
        return Err(Error::InvalidInput(format!(
            "asymptotic_power: invalid law (scale = {}, ncp = {})",
            law.scale, law.ncp
        )));
    }
    if law.scale == 0.0 {
        return noncentral_chi1_sf(t, law.ncp);
    }
    let root_ncp = law.ncp.sqrt();
    let scale = law.scale;
    let integrand = |z: f64| -> f64 {
        let shift = z + root_ncp;
        let k = scale * shift * shift;
        let density = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        // The inner tail is exact; failure is impossible for finite inputs.
        density * noncentral_chi1_sf(t, k).unwrap_or(0.0)
    };
    // Truncation at |z| = 10 discards under 1e-22 of Gaussian mass.
    let (a, b) = (-10.0f64, 10.0f64);
    let mut panels = 64usize;
    let mut prev = composite_simpson(&integrand, a, b, panels);
    loop {
        panels *= 2;
        let cur = composite_simpson(&integrand, a, b, panels);
        if (cur - prev).abs() <= 5e-8 || panels >= 8192 {
            // Richardson extrapolation sharpens the final doubling.
            return Ok((cur + (cur - prev) / 15.0).clamp(0.0, 1.0));
        }
        prev = cur;
    }
}

fn composite_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let mut acc = f(a) + f(b);
    for i in 1..panels {
        let x = a + h * i as f64;
        acc += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Size of the level-alpha test under a given noncentrality law: power at
/// the central chi-square cutoff.
pub fn asymptotic_size(alpha: f64, law: &LimitLaw) -> Result<f64> {
    let t = chi1_upper_quantile(alpha)?;
    asymptotic_power(t, law)
}

/// Every limit coefficient for a spike configuration, bundled for
/// serialization. Entries that require a distant spike hold `None` for
/// close spikes.
#[derive(Debug, Clone, Serialize)]
pub struct LimitCoefficients {
    pub gamma: f64,
    /// Spiked population eigenvalues, descending.
    pub spikes: Vec<f64>,
    pub classes: Vec<SpikeClass>,
    pub psi: Vec<f64>,
    pub psi_prime: Vec<f64>,
    pub xi1: Vec<Option<f64>>,
    pub xi2: Vec<Option<f64>>,
    pub phi1_spike: Vec<f64>,
    pub phi2_spike: Vec<f64>,
    pub phi1_bulk: f64,
    pub phi2_bulk: f64,
    pub m1: f64,
    pub m2: f64,
    /// Scenario constants when a theta description was supplied.
    pub constants: Option<ScenarioConstants>,
}

/// Evaluates the full coefficient bundle for a spike configuration; with a
/// theta description the scenario constants are included (adjustment
/// dimension `k`).
pub fn limit_coefficients(
    spikes: &[f64],
    h: &SpectralLaw,
    theta: Option<(&ThetaSpec, usize)>,
) -> Result<LimitCoefficients> {
    h.validate()?;
    let bulk_value = h.single_atom().unwrap_or(1.0);
    let mut classes = Vec::with_capacity(spikes.len());
    let mut psis = Vec::with_capacity(spikes.len());
    let mut psi_primes = Vec::with_capacity(spikes.len());
    let mut xi1 = Vec::with_capacity(spikes.len());
    let mut xi2 = Vec::with_capacity(spikes.len());
    let mut phi1 = Vec::with_capacity(spikes.len());
    let mut phi2 = Vec::with_capacity(spikes.len());
    for (j, &alpha) in spikes.iter().enumerate() {
        if j > 0 && spikes[j - 1] <= alpha {
            return Err(Error::InvalidSpec(format!(
                "limit_coefficients: spikes must be strictly decreasing, violated at {j}"
            )));
        }
        let class = classify_spike(alpha, h)?;
        classes.push(class);
        psis.push(psi(alpha, h)?);
        psi_primes.push(psi_prime(alpha, h)?);
        if class == SpikeClass::Distant {
            xi1.push(Some(xi(1, j, spikes, h)?));
            xi2.push(Some(xi(2, j, spikes, h)?));
        } else {
            xi1.push(None);
            xi2.push(None);
        }
        phi1.push(phi_spike(1, j, spikes, h)?);
        phi2.push(phi_spike(2, j, spikes, h)?);
    }
    let (m1, m2) = mp_moments(h)?;
    let constants = match theta {
        Some((spec, k)) => Some(scenario_constants(spikes, h, spec, k)?),
        None => None,
    };
    Ok(LimitCoefficients {
        gamma: h.gamma,
        spikes: spikes.to_vec(),
        classes,
        psi: psis,
        psi_prime: psi_primes,
        xi1,
        xi2,
        phi1_spike: phi1,
        phi2_spike: phi2,
        phi1_bulk: phi_bulk(1, bulk_value, h)?,
        phi2_bulk: phi_bulk(2, bulk_value, h)?,
        m1,
        m2,
        constants,
    })
}
