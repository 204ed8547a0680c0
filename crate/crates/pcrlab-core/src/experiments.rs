//! Reproducible Monte Carlo engine for the Type I error and power studies:
//! covariate generation, exposure and outcome regression, coefficient-mode
//! grids over the strength exponent tau0, theoretical overlays, and CSV
//! emission.
//!
//! Determinism contract: every replication derives all of its randomness
//! from `(master_seed, tau0_index, rep_index, component_tag)` through a
//! hash, so results are bit-identical for any thread count and any subset
//! of scenarios consumed.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::limits::{
    asymptotic_power, kappa2_limit_law, mp_moments, scenario_constants, LimitLaw, Scenario,
    ScenarioParams, SpectralLaw, ThetaSpec,
};
use crate::linalg::{chi1_upper_quantile, top_left_basis, BasisMethod};
use crate::models::{
    complete_orthonormal_pair, gen_binomial_mixture, gen_exposure_binomial, gen_exposure_linear,
    gen_gaussian_mixture, gen_spiked, make_beta, mixture_covariance, random_unit_vector,
    CoefficientContext, CoefficientSpec, FixedCoefficient, MixtureSpec, RandomKind, SpikeSpec,
};
use crate::pcr::{residual_exposure, TestOutcome, Variant};

/// Component tags for seed derivation: covariates, random exposure
/// coefficient, exposure noise, random outcome coefficient, outcome noise,
/// and the cell-level spike direction.
const TAG_COVARIATES: u8 = 0;
const TAG_THETA: u8 = 1;
const TAG_EXPOSURE: u8 = 2;
const TAG_BETA: u8 = 3;
const TAG_NOISE: u8 = 4;
const TAG_DIRECTION: u8 = 5;

/// Master seed used by the shipped presets.
pub const DEFAULT_MASTER_SEED: u64 = 1729;

/// Marginal distribution of the covariate rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    /// Gaussian rows with a single spiked covariance direction of strength
    /// `p^tau0`.
    Spiked,
    /// Two-group Gaussian mean-shift mixture with `ceil(p^tau0)`
    /// differentiated coordinates.
    GaussMixture { shift: f64 },
    /// Two-group binomial mixture with `ceil(p^tau0)` differentiated
    /// coordinates.
    BinomMixture { q1: f64, q2: f64, q_null: f64 },
}

impl ModelKind {
    /// Standard Gaussian mixture with unit shift.
    pub fn gauss_mixture() -> Self {
        ModelKind::GaussMixture { shift: 1.0 }
    }

    /// Standard two-group binomial mixture.
    pub fn binom_mixture() -> Self {
        ModelKind::BinomMixture {
            q1: 0.3,
            q2: 0.7,
            q_null: 0.5,
        }
    }

    /// Stable lowercase token used in result tables.
    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::Spiked => "spiked",
            ModelKind::GaussMixture { .. } => "gauss_mixture",
            ModelKind::BinomMixture { .. } => "binom_mixture",
        }
    }
}

/// Conditional distribution of the exposure given the covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureKind {
    /// `A = W theta + eta`, Gaussian noise with standard deviation
    /// `sigma_g`.
    Linear,
    /// `A ~ Bin(2, logistic(W theta))`.
    BinomialLogistic,
}

impl ExposureKind {
    pub fn label(&self) -> &'static str {
        match self {
            ExposureKind::Linear => "linear",
            ExposureKind::BinomialLogistic => "binomial_logistic",
        }
    }
}

/// Fixed or random treatment of a regression coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientMode {
    Fixed,
    Random,
}

impl CoefficientMode {
    pub fn label(&self) -> &'static str {
        match self {
            CoefficientMode::Fixed => "fixed",
            CoefficientMode::Random => "random",
        }
    }
}

/// How the leading population direction is chosen for the spiked model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeVectors {
    /// Leading coordinate axes.
    Canonical,
    /// A normalized Gaussian draw, fixed across replications of a cell.
    Random,
}

/// Preset sizes: reduced grids for workstation runs, full grids matching
/// the published protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetScale {
    Desk,
    Paper,
}

/// Complete description of one experiment: model, exposure, dimensions,
/// replication budget, strength grid, coefficient treatments, and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub model: ModelKind,
    /// Ignored by the in-model variant, where the exposure is the first
    /// design column.
    pub exposure: ExposureKind,
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub alpha: f64,
    pub reps: usize,
    /// Spike-strength exponents: the leading eigenvalue is `p^tau0`
    /// (spiked model) or `ceil(p^tau0)` differentiated coordinates
    /// (mixtures).
    pub tau0_grid: Vec<f64>,
    /// Optional separate angle exponents for the fixed-coefficient
    /// construction, aligned with `tau0_grid`; when absent the angle
    /// exponent is coupled to the strength exponent.
    #[serde(default)]
    pub angle_tau0: Option<Vec<f64>>,
    /// Coefficient treatments used by [`run_cell`]; [`run_experiment`]
    /// sweeps every combination instead.
    pub beta_mode: CoefficientMode,
    pub theta_mode: CoefficientMode,
    pub sigma_y: f64,
    /// Exposure-noise standard deviation of the linear exposure.
    pub sigma_g: f64,
    /// Scale of the random outcome coefficient: coordinates are
    /// `N(0, sigma_beta^2 / dim)`.
    pub sigma_beta: f64,
    /// Scale of the random exposure coefficient.
    pub sigma_theta: f64,
    /// Local-alternative strength: `delta = h / sqrt(n)`; zero for size
    /// studies.
    pub h: f64,
    pub master_seed: u64,
    #[serde(default = "default_spike_vectors")]
    pub spike_vectors: SpikeVectors,
}

fn default_spike_vectors() -> SpikeVectors {
    SpikeVectors::Canonical
}

impl Default for ExperimentConfig {
    /// Published protocol defaults: `p = 1000`, `gamma = 2`, 2000
    /// replications, `k = 1`, level 0.05, the full strength grid, unit
    /// scales, and the null hypothesis.
    fn default() -> Self {
        ExperimentConfig {
            variant: Variant::Out,
            model: ModelKind::Spiked,
            exposure: ExposureKind::Linear,
            n: 500,
            p: 1000,
            k: 1,
            alpha: 0.05,
            reps: 2000,
            tau0_grid: (0..=20).map(|i| i as f64 / 20.0).collect(),
            angle_tau0: None,
            beta_mode: CoefficientMode::Fixed,
            theta_mode: CoefficientMode::Fixed,
            sigma_y: 1.0,
            sigma_g: 1.0,
            sigma_beta: 1.0,
            sigma_theta: 1.0,
            h: 0.0,
            master_seed: DEFAULT_MASTER_SEED,
            spike_vectors: SpikeVectors::Canonical,
        }
    }
}

impl ExperimentConfig {
    /// One out-of-model panel of the first figure: a model and exposure
    /// pair at aspect ratio `gamma` in `{2, 0.5}`.
    pub fn fig1(
        model: ModelKind,
        exposure: ExposureKind,
        gamma: f64,
        scale: PresetScale,
    ) -> Result<Self> {
        let (p, reps, grid_len) = preset_dimensions(scale);
        let n = preset_n(p, gamma)?;
        Ok(ExperimentConfig {
            variant: Variant::Out,
            model,
            exposure,
            n,
            p,
            reps,
            tau0_grid: uniform_grid(grid_len),
            ..Default::default()
        })
    }

    /// One in-model panel of the second figure at aspect ratio `gamma`.
    pub fn fig2(gamma: f64, scale: PresetScale) -> Result<Self> {
        let (p, reps, grid_len) = preset_dimensions(scale);
        let n = preset_n(p, gamma)?;
        Ok(ExperimentConfig {
            variant: Variant::In,
            model: ModelKind::Spiked,
            exposure: ExposureKind::Linear,
            n,
            p,
            reps,
            tau0_grid: uniform_grid(grid_len),
            spike_vectors: SpikeVectors::Random,
            ..Default::default()
        })
    }

    /// Checks every field against its contract.
    pub fn validate(&self) -> Result<()> {
        if self.n < 4 || self.p < 4 {
            return Err(Error::Config(format!(
                "dimensions too small: n = {}, p = {}",
                self.n, self.p
            )));
        }
        let design_cols = match self.variant {
            Variant::Out => self.p,
            Variant::In => self.p,
        };
        if self.k == 0 || self.k >= self.n.min(design_cols) {
            return Err(Error::Config(format!(
                "adjustment dimension k = {} must satisfy 1 <= k < min(n, p)",
                self.k
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".to_string()));
        }
        if self.tau0_grid.is_empty() {
            return Err(Error::Config("tau0_grid must be non-empty".to_string()));
        }
        for &t in &self.tau0_grid {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!(
                    "tau0 values must lie in [0, 1], got {t}"
                )));
            }
        }
        if let Some(angles) = &self.angle_tau0 {
            if angles.len() != self.tau0_grid.len() {
                return Err(Error::Config(format!(
                    "angle_tau0 has {} entries but tau0_grid has {}",
                    angles.len(),
                    self.tau0_grid.len()
                )));
            }
            for &t in angles {
                if !t.is_finite() || t < 0.0 {
                    return Err(Error::Config(format!(
                        "angle exponents must be nonnegative, got {t}"
                    )));
                }
            }
        }
        for (name, v) in [
            ("sigma_y", self.sigma_y),
            ("sigma_g", self.sigma_g),
            ("sigma_beta", self.sigma_beta),
            ("sigma_theta", self.sigma_theta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if !self.h.is_finite() {
            return Err(Error::Config(format!("h must be finite, got {}", self.h)));
        }
        if let ModelKind::GaussMixture { shift } = self.model {
            if !shift.is_finite() || shift == 0.0 {
                return Err(Error::Config(format!(
                    "mixture shift must be finite and nonzero, got {shift}"
                )));
            }
        }
        if let ModelKind::BinomMixture { q1, q2, q_null } = self.model {
            for (name, q) in [("q1", q1), ("q2", q2), ("q_null", q_null)] {
                if !(q > 0.0 && q < 1.0) {
                    return Err(Error::Config(format!(
                        "{name} must lie strictly in (0, 1), got {q}"
                    )));
                }
            }
        }
        if self.variant == Variant::In && self.model != ModelKind::Spiked {
            return Err(Error::Config(
                "the in-model variant is defined for the spiked model".to_string(),
            ));
        }
        Ok(())
    }

    /// Aspect ratio `p / n`.
    pub fn gamma(&self) -> f64 {
        self.p as f64 / self.n as f64
    }

    /// Coefficient-mode combinations swept by [`run_experiment`]: four for
    /// the out-of-model variant, two (no exposure coefficient) for the
    /// in-model variant.
    pub fn scenarios(&self) -> Vec<(CoefficientMode, Option<CoefficientMode>)> {
        match self.variant {
            Variant::Out => vec![
                (CoefficientMode::Fixed, Some(CoefficientMode::Fixed)),
                (CoefficientMode::Fixed, Some(CoefficientMode::Random)),
                (CoefficientMode::Random, Some(CoefficientMode::Fixed)),
                (CoefficientMode::Random, Some(CoefficientMode::Random)),
            ],
            Variant::In => vec![
                (CoefficientMode::Fixed, None),
                (CoefficientMode::Random, None),
            ],
        }
    }

    /// Angle exponent paired with a grid position.
    fn angle_at(&self, tau0_idx: usize) -> f64 {
        match &self.angle_tau0 {
            Some(angles) => angles[tau0_idx],
            None => self.tau0_grid[tau0_idx],
        }
    }
}

// Both preset scales keep the full 21-point strength grid; desk runs
// reduce only the dimension and the replication budget.
fn preset_dimensions(scale: PresetScale) -> (usize, usize, usize) {
    match scale {
        PresetScale::Desk => (200, 500, 21),
        PresetScale::Paper => (1000, 2000, 21),
    }
}

fn preset_n(p: usize, gamma: f64) -> Result<usize> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Config(format!(
            "aspect ratio must be positive, got {gamma}"
        )));
    }
    let n = (p as f64 / gamma).round();
    if n < 4.0 {
        return Err(Error::Config(format!(
            "aspect ratio {gamma} leaves too few rows for p = {p}"
        )));
    }
    Ok(n as usize)
}

fn uniform_grid(len: usize) -> Vec<f64> {
    (0..len).map(|i| i as f64 / (len - 1) as f64).collect()
}

/// Aggregated results for one `(tau0, coefficient-mode)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub tau0: f64,
    pub beta_mode: CoefficientMode,
    /// Absent for the in-model variant, which has no exposure regression.
    pub theta_mode: Option<CoefficientMode>,
    /// Non-degenerate replications: the denominator of `rate`.
    pub reps: usize,
    /// Replications excluded because the adjustment absorbed the exposure.
    pub degenerate: usize,
    pub rejections: usize,
    pub rate: f64,
    /// Binomial standard error `sqrt(rate (1 - rate) / reps)`.
    pub mc_se: f64,
    /// Asymptotic size or power where a closed-form limit exists.
    pub theory_rate: Option<f64>,
    /// Mean conditional noncentrality across non-degenerate replications.
    pub kappa2_mean: Option<f64>,
    /// Wall-clock milliseconds of the tau0 block this cell belongs to.
    pub runtime_ms: u128,
}

/// A full experiment: configuration plus one row per grid cell.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
}

/// Frozen column order of every results table.
pub const CSV_HEADER: &str =
    "variant,model,exposure,n,p,k,alpha,tau0,beta_mode,theta_mode,h,reps,degenerate,rejections,rate,mc_se,theory_rate,seed";

impl ExperimentResult {
    /// Renders the frozen CSV schema.
    pub fn to_csv(&self) -> String {
        let c = &self.config;
        let mut out = String::with_capacity(128 * (self.cells.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        let exposure_label = match c.variant {
            Variant::Out => c.exposure.label(),
            Variant::In => "na",
        };
        for cell in &self.cells {
            let theta_label = match cell.theta_mode {
                Some(mode) => mode.label(),
                None => "na",
            };
            let theory = match cell.theory_rate {
                Some(v) => format_float(v),
                None => "na".to_string(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                c.variant.label(),
                c.model.label(),
                exposure_label,
                c.n,
                c.p,
                c.k,
                format_float(c.alpha),
                format_float(cell.tau0),
                cell.beta_mode.label(),
                theta_label,
                format_float(c.h),
                cell.reps,
                cell.degenerate,
                cell.rejections,
                format_float(cell.rate),
                format_float(cell.mc_se),
                theory,
                c.master_seed,
            ));
        }
        out
    }

    /// Hex-encoded content hash of the rendered CSV.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_csv().as_bytes())
    }
}

/// Hex-encoded SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Renders a float with six significant digits, trimming trailing zeros;
/// the stable formatter behind every numeric CSV column.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        return "na".to_string();
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-4..1e7).contains(&a) {
        let digits_before = a.log10().floor() as i32 + 1;
        let decimals = (6 - digits_before).max(0) as usize;
        let s = format!("{v:.decimals$}");
        trim_trailing_zeros(s)
    } else {
        format!("{v:.5e}")
    }
}

fn trim_trailing_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let trimmed = s.trim_end_matches('0').trim_end_matches('.');
    trimmed.to_string()
}

/// Seed for one generator component of one replication.
fn component_seed(master: u64, tau0_idx: usize, rep: usize, tag: u8) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((tau0_idx as u64).to_le_bytes());
    hasher.update((rep as u64).to_le_bytes());
    hasher.update([tag]);
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest too short"))
}

/// Covariate generator resolved for one grid cell.
#[derive(Debug, Clone)]
enum CovariateModel {
    Spiked(SpikeSpec),
    Gauss(MixtureSpec),
    Binom(MixtureSpec),
}

/// Everything about a grid cell that is shared across its replications.
#[derive(Debug, Clone)]
struct CellSetup {
    tau0_idx: usize,
    tau0: f64,
    delta: f64,
    covariates: CovariateModel,
    /// Fixed exposure coefficient (out-of-model only).
    theta_fixed: Option<Array1<f64>>,
    /// Fixed outcome coefficient: angle construction (out-of-model) or the
    /// population least-squares vector (in-model).
    beta_fixed: Array1<f64>,
}

/// Number of differentiated mixture coordinates at strength exponent tau0.
fn mixture_m(p: usize, tau0: f64) -> usize {
    let raw = (p as f64).powf(tau0).ceil();
    (raw as usize).clamp(1, p)
}

fn cell_setup(config: &ExperimentConfig, tau0_idx: usize) -> Result<CellSetup> {
    let tau0 = config.tau0_grid[tau0_idx];
    let angle = config.angle_at(tau0_idx);
    let p = config.p;
    let delta = config.h / (config.n as f64).sqrt();
    match config.variant {
        Variant::Out => {
            // Top two population directions of the uncentered second
            // moment, for the fixed-coefficient construction.
            let (covariates, v1, v2) = match config.model {
                ModelKind::Spiked => {
                    let lambda = (p as f64).powf(tau0);
                    let (v1, v2) = match config.spike_vectors {
                        SpikeVectors::Canonical => {
                            let mut e1 = Array1::zeros(p);
                            e1[0] = 1.0;
                            let mut e2 = Array1::zeros(p);
                            e2[1] = 1.0;
                            (e1, e2)
                        }
                        SpikeVectors::Random => {
                            let v1 = random_unit_vector(
                                p,
                                component_seed(config.master_seed, tau0_idx, 0, TAG_DIRECTION),
                            )?;
                            let v2 = complete_orthonormal_pair(&v1)?;
                            (v1, v2)
                        }
                    };
                    let spec = SpikeSpec::unit_bulk(vec![(lambda, v1.clone())]);
                    spec.validate(p)?;
                    (CovariateModel::Spiked(spec), v1, v2)
                }
                ModelKind::GaussMixture { shift } => {
                    let spec = MixtureSpec::gaussian(shift, mixture_m(p, tau0));
                    let cov = mixture_covariance(&spec, p)?;
                    let (v1, v2) = top_pair_from_mixture(&cov)?;
                    (CovariateModel::Gauss(spec), v1, v2)
                }
                ModelKind::BinomMixture { q1, q2, q_null } => {
                    let spec = MixtureSpec::binomial(q1, q2, q_null, mixture_m(p, tau0));
                    let cov = mixture_covariance(&spec, p)?;
                    let (v1, v2) = top_pair_from_mixture(&cov)?;
                    (CovariateModel::Binom(spec), v1, v2)
                }
            };
            let ctx = CoefficientContext::dimension(p).with_spike_pair(v1, v2);
            let fixed = CoefficientSpec::Fixed(FixedCoefficient::AngleToSpike { tau0: angle });
            let beta_fixed = make_beta(&fixed, &ctx, 0)?;
            let theta_fixed = make_beta(&fixed, &ctx, 0)?;
            Ok(CellSetup {
                tau0_idx,
                tau0,
                delta,
                covariates,
                theta_fixed: Some(theta_fixed),
                beta_fixed,
            })
        }
        Variant::In => {
            // The joint design is spiked in a delocalized (or canonical)
            // direction; the exposure is its first column.
            let lambda = (p as f64).powf(tau0);
            let v = match config.spike_vectors {
                SpikeVectors::Canonical => {
                    let mut e1 = Array1::zeros(p);
                    e1[0] = 1.0;
                    e1
                }
                SpikeVectors::Random => random_unit_vector(
                    p,
                    component_seed(config.master_seed, tau0_idx, 0, TAG_DIRECTION),
                )?,
            };
            let spec = SpikeSpec::unit_bulk(vec![(lambda, v.clone())]);
            spec.validate(p)?;
            let ctx = CoefficientContext::dimension(p - 1).with_population(lambda, v);
            let beta_fixed = make_beta(
                &CoefficientSpec::Fixed(FixedCoefficient::PopulationLeastSquares),
                &ctx,
                0,
            )?;
            Ok(CellSetup {
                tau0_idx,
                tau0,
                delta,
                covariates: CovariateModel::Spiked(spec),
                theta_fixed: None,
                beta_fixed,
            })
        }
    }
}

/// Extracts the two leading population directions from a mixture second
/// moment, completing deterministically when only one separates.
fn top_pair_from_mixture(
    cov: &crate::models::MixtureCovariance,
) -> Result<(Array1<f64>, Array1<f64>)> {
    match cov.uncentered_top.len() {
        0 => Err(Error::InvalidSpec(
            "mixture has no separated population direction".to_string(),
        )),
        1 => {
            let v1 = cov.uncentered_top[0].1.clone();
            let v2 = complete_orthonormal_pair(&v1)?;
            Ok((v1, v2))
        }
        _ => Ok((
            cov.uncentered_top[0].1.clone(),
            cov.uncentered_top[1].1.clone(),
        )),
    }
}

/// All stochastic components of one replication, generated for every
/// scenario regardless of which are consumed so that outcomes do not
/// depend on the scenario subset.
enum RepComponents {
    Out {
        w: Array2<f64>,
        basis: Array2<f64>,
        a_fixed: Array1<f64>,
        a_random: Array1<f64>,
        beta_random: Array1<f64>,
        eps: Array1<f64>,
    },
    In {
        w: Array2<f64>,
        a: Array1<f64>,
        basis: Array2<f64>,
        beta_random: Array1<f64>,
        eps: Array1<f64>,
    },
}

fn standard_normal_vector(n: usize, seed: u64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array1::from_shape_fn(n, |_| rng.sample(StandardNormal))
}

fn rep_components(
    config: &ExperimentConfig,
    setup: &CellSetup,
    rep: usize,
) -> Result<RepComponents> {
    let (n, p, k) = (config.n, config.p, config.k);
    let seed = |tag: u8| component_seed(config.master_seed, setup.tau0_idx, rep, tag);
    match config.variant {
        Variant::Out => {
            let w = match &setup.covariates {
                CovariateModel::Spiked(spec) => gen_spiked(n, p, spec, seed(TAG_COVARIATES))?,
                CovariateModel::Gauss(spec) => {
                    gen_gaussian_mixture(n, p, spec, seed(TAG_COVARIATES))?
                }
                CovariateModel::Binom(spec) => {
                    gen_binomial_mixture(n, p, spec, seed(TAG_COVARIATES))?
                }
            };
            let basis = top_left_basis(&w.view(), k, BasisMethod::Adaptive)?;
            let theta_random = make_beta(
                &CoefficientSpec::Random {
                    sigma2: config.sigma_theta * config.sigma_theta,
                    kind: RandomKind::Gaussian,
                },
                &CoefficientContext::dimension(p),
                seed(TAG_THETA),
            )?;
            let theta_fixed = setup
                .theta_fixed
                .as_ref()
                .expect("out-of-model cells carry a fixed exposure coefficient");
            // The same exposure-noise seed is shared by both coefficient
            // treatments, so the scenarios differ only through theta.
            let (a_fixed, a_random) = match config.exposure {
                ExposureKind::Linear => (
                    gen_exposure_linear(&w, theta_fixed, config.sigma_g, seed(TAG_EXPOSURE))?,
                    gen_exposure_linear(&w, &theta_random, config.sigma_g, seed(TAG_EXPOSURE))?,
                ),
                ExposureKind::BinomialLogistic => (
                    gen_exposure_binomial(&w, theta_fixed, seed(TAG_EXPOSURE))?,
                    gen_exposure_binomial(&w, &theta_random, seed(TAG_EXPOSURE))?,
                ),
            };
            let beta_random = make_beta(
                &CoefficientSpec::Random {
                    sigma2: config.sigma_beta * config.sigma_beta,
                    kind: RandomKind::Gaussian,
                },
                &CoefficientContext::dimension(p),
                seed(TAG_BETA),
            )?;
            let eps = standard_normal_vector(n, seed(TAG_NOISE));
            Ok(RepComponents::Out {
                w,
                basis,
                a_fixed,
                a_random,
                beta_random,
                eps,
            })
        }
        Variant::In => {
            let spec = match &setup.covariates {
                CovariateModel::Spiked(spec) => spec,
                _ => unreachable!("in-model cells are spiked"),
            };
            let x = gen_spiked(n, p, spec, seed(TAG_COVARIATES))?;
            let basis = top_left_basis(&x.view(), k, BasisMethod::Adaptive)?;
            let a = x.column(0).to_owned();
            let w = x.slice(ndarray::s![.., 1..]).to_owned();
            let beta_random = make_beta(
                &CoefficientSpec::Random {
                    sigma2: config.sigma_beta * config.sigma_beta,
                    kind: RandomKind::Gaussian,
                },
                &CoefficientContext::dimension(p - 1),
                seed(TAG_BETA),
            )?;
            let eps = standard_normal_vector(n, seed(TAG_NOISE));
            Ok(RepComponents::In {
                w,
                a,
                basis,
                beta_random,
                eps,
            })
        }
    }
}

/// Assembles one scenario's test outcome from shared components.
fn scenario_outcome(
    config: &ExperimentConfig,
    setup: &CellSetup,
    comps: &RepComponents,
    cutoff: f64,
    beta_mode: CoefficientMode,
    theta_mode: Option<CoefficientMode>,
) -> Result<TestOutcome> {
    let (w, a, basis, beta, eps) = match comps {
        RepComponents::Out {
            w,
            basis,
            a_fixed,
            a_random,
            beta_random,
            eps,
        } => {
            let a = match theta_mode {
                Some(CoefficientMode::Fixed) => a_fixed,
                Some(CoefficientMode::Random) => a_random,
                None => {
                    return Err(Error::InvalidInput(
                        "out-of-model scenarios need an exposure-coefficient mode".to_string(),
                    ))
                }
            };
            let beta = match beta_mode {
                CoefficientMode::Fixed => &setup.beta_fixed,
                CoefficientMode::Random => beta_random,
            };
            (w, a, basis, beta, eps)
        }
        RepComponents::In {
            w,
            a,
            basis,
            beta_random,
            eps,
        } => {
            let beta = match beta_mode {
                CoefficientMode::Fixed => &setup.beta_fixed,
                CoefficientMode::Random => beta_random,
            };
            (w, a, basis, beta, eps)
        }
    };
    let residual = residual_exposure(a, basis)?;
    // Outcome mean W beta + delta A serves both the draw and the
    // conditional noncentrality.
    let mut mean = crate::linalg::matvec(&w.view(), false, &beta.view());
    mean.scaled_add(setup.delta, a);
    let res_norm2 = residual.dot(&residual);
    let mean_inner = mean.dot(&residual);
    let kappa2 = mean_inner * mean_inner / res_norm2;
    let mut y = mean;
    y.scaled_add(config.sigma_y, eps);
    let inner = y.dot(&residual);
    let statistic = inner * inner / res_norm2;
    Ok(TestOutcome {
        statistic,
        kappa2: Some(kappa2),
        k: config.k,
        variant: config.variant,
        cutoff,
        reject: statistic > cutoff,
    })
}

/// Runs one replication of one cell with the coefficient modes taken from
/// the configuration. Deterministic in `(config, tau0, rep_index)`; the
/// strength value must be a grid member because seeds derive from its
/// index.
pub fn run_cell(config: &ExperimentConfig, tau0: f64, rep_index: usize) -> Result<TestOutcome> {
    config.validate()?;
    let tau0_idx = config
        .tau0_grid
        .iter()
        .position(|&t| t == tau0)
        .ok_or_else(|| Error::InvalidInput(format!("tau0 = {tau0} is not a member of the grid")))?;
    let setup = cell_setup(config, tau0_idx)?;
    let comps = rep_components(config, &setup, rep_index)?;
    let cutoff = chi1_upper_quantile(config.alpha)?;
    let theta_mode = match config.variant {
        Variant::Out => Some(config.theta_mode),
        Variant::In => None,
    };
    scenario_outcome(config, &setup, &comps, cutoff, config.beta_mode, theta_mode)
}

/// Asymptotic size or power of a cell where a closed-form limit law
/// exists: out-of-model, linear exposure, unit-bulk covariates, and a
/// random outcome coefficient. Returns `None` elsewhere (fixed-fixed and
/// beta-fixed-theta-random limits have no closed form; the in-model and
/// binomial-exposure settings are not covered).
pub fn overlay_theory(config: &ExperimentConfig, tau0: f64) -> Option<f64> {
    if config.variant != Variant::Out
        || config.exposure != ExposureKind::Linear
        || config.beta_mode != CoefficientMode::Random
    {
        return None;
    }
    let tau0_idx = config.tau0_grid.iter().position(|&t| t == tau0)?;
    let p = config.p as f64;
    let spike_strength = match config.model {
        ModelKind::Spiked => p.powf(tau0),
        ModelKind::GaussMixture { shift } => shift * shift * mixture_m(config.p, tau0) as f64,
        ModelKind::BinomMixture { .. } => return None,
    };
    let alpha_spike = 1.0 + spike_strength;
    let h_law = SpectralLaw::classical(config.gamma()).ok()?;
    let (m1, m2) = mp_moments(&h_law).ok()?;
    let sigma2_g = config.sigma_g * config.sigma_g;
    let sigma2_beta = config.sigma_beta * config.sigma_beta;
    let sigma2_theta = config.sigma_theta * config.sigma_theta;
    let params = match config.theta_mode {
        CoefficientMode::Fixed => {
            // theta = a v1 + sqrt(1 - a^2) v2: projection a on the spike,
            // the rest in the bulk.
            let a = 1.0 - p.powf(-config.angle_at(tau0_idx));
            let theta = ThetaSpec::FixedProjections {
                projections: vec![a],
                norm2: 1.0,
            };
            let constants = scenario_constants(&[alpha_spike], &h_law, &theta, config.k).ok()?;
            ScenarioParams {
                sigma2_beta,
                sigma2_theta,
                sigma2_g,
                gamma: config.gamma(),
                h: config.h,
                c0: Some(constants.c0),
                c4: Some(constants.c4),
                m1,
                m2,
                c1: None,
            }
        }
        CoefficientMode::Random => ScenarioParams {
            sigma2_beta,
            sigma2_theta,
            sigma2_g,
            gamma: config.gamma(),
            h: config.h,
            c0: None,
            c4: None,
            m1,
            m2,
            c1: None,
        },
    };
    let scenario = match config.theta_mode {
        CoefficientMode::Fixed => Scenario::BetaRandomThetaFixed,
        CoefficientMode::Random => Scenario::BothRandom,
    };
    let law: LimitLaw = kappa2_limit_law(scenario, &params).ok()?;
    let t = chi1_upper_quantile(config.alpha).ok()?;
    asymptotic_power(t, &law).ok()
}

/// Per-replication outcome of one scenario inside the engine.
enum RepOutcome {
    Tested(TestOutcome),
    Degenerate,
}

/// Pure aggregation of scenario outcomes into cell statistics:
/// `(effective reps, degenerate, rejections, rate, mc_se, kappa2 mean)`.
fn summarize(outcomes: &[RepOutcome]) -> (usize, usize, usize, f64, f64, Option<f64>) {
    let mut effective = 0usize;
    let mut degenerate = 0usize;
    let mut rejections = 0usize;
    let mut kappa_sum = 0.0f64;
    let mut kappa_count = 0usize;
    for outcome in outcomes {
        match outcome {
            RepOutcome::Tested(t) => {
                effective += 1;
                if t.reject {
                    rejections += 1;
                }
                if let Some(k2) = t.kappa2 {
                    kappa_sum += k2;
                    kappa_count += 1;
                }
            }
            RepOutcome::Degenerate => degenerate += 1,
        }
    }
    let (rate, mc_se) = if effective > 0 {
        let r = rejections as f64 / effective as f64;
        (r, (r * (1.0 - r) / effective as f64).sqrt())
    } else {
        (f64::NAN, f64::NAN)
    };
    let kappa2_mean = if kappa_count > 0 {
        Some(kappa_sum / kappa_count as f64)
    } else {
        None
    };
    (effective, degenerate, rejections, rate, mc_se, kappa2_mean)
}

/// Runs the full grid: every tau0 against every coefficient-mode
/// combination, sharing covariates, components, and noise across the
/// scenarios of a replication. Degenerate replications are counted and
/// excluded; any other failure aborts the run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let scenarios = config.scenarios();
    let cutoff = chi1_upper_quantile(config.alpha)?;
    let mut cells = Vec::with_capacity(config.tau0_grid.len() * scenarios.len());
    for tau0_idx in 0..config.tau0_grid.len() {
        let started = std::time::Instant::now();
        let setup = cell_setup(config, tau0_idx)?;
        // One pass over replications, all scenarios per pass.
        let per_rep: Vec<Result<Vec<RepOutcome>>> = (0..config.reps)
            .into_par_iter()
            .map(|rep| {
                let comps = rep_components(config, &setup, rep)?;
                let mut outcomes = Vec::with_capacity(scenarios.len());
                for &(beta_mode, theta_mode) in &scenarios {
                    match scenario_outcome(config, &setup, &comps, cutoff, beta_mode, theta_mode) {
                        Ok(outcome) => outcomes.push(RepOutcome::Tested(outcome)),
                        Err(Error::DegenerateExposure { .. }) => {
                            outcomes.push(RepOutcome::Degenerate)
                        }
                        Err(other) => return Err(other),
                    }
                }
                Ok(outcomes)
            })
            .collect();
        // Transpose into per-scenario outcome lists, propagating fatal
        // errors.
        let mut by_scenario: Vec<Vec<RepOutcome>> = scenarios
            .iter()
            .map(|_| Vec::with_capacity(config.reps))
            .collect();
        for rep_result in per_rep {
            let outcomes = rep_result?;
            for (s, outcome) in outcomes.into_iter().enumerate() {
                by_scenario[s].push(outcome);
            }
        }
        let elapsed_ms = started.elapsed().as_millis();
        for (s, &(beta_mode, theta_mode)) in scenarios.iter().enumerate() {
            let (effective, degenerate, rejections, rate, mc_se, kappa2_mean) =
                summarize(&by_scenario[s]);
            let mut scenario_config = config.clone();
            scenario_config.beta_mode = beta_mode;
            if let Some(tm) = theta_mode {
                scenario_config.theta_mode = tm;
            }
            let theory_rate = overlay_theory(&scenario_config, setup.tau0);
            cells.push(CellResult {
                tau0: setup.tau0,
                beta_mode,
                theta_mode,
                reps: effective,
                degenerate,
                rejections,
                rate,
                mc_se,
                theory_rate,
                kappa2_mean,
                runtime_ms: elapsed_ms,
            });
        }
    }
    Ok(ExperimentResult {
        config: config.clone(),
        cells,
    })
}
