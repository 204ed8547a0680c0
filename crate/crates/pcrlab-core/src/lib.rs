//! Core library for principal-component-adjusted regression testing:
//! numerical linear algebra, data-generating models, the adjusted
//! likelihood-ratio test, random-matrix limit formulas, and a reproducible
//! Monte Carlo engine.

pub mod error;
pub mod experiments;
pub mod limits;
pub mod linalg;
pub mod models;
pub mod oracle;
pub mod pcr;

pub use error::{Error, Result};
pub use experiments::{
    format_float, overlay_theory, run_cell, run_experiment, sha256_hex, CellResult,
    CoefficientMode, ExperimentConfig, ExperimentResult, ExposureKind, ModelKind, PresetScale,
    SpikeVectors, CSV_HEADER, DEFAULT_MASTER_SEED,
};
pub use limits::{
    asymptotic_power, asymptotic_size, classify_spike, estimate_c1, kappa2_limit_law,
    limit_coefficients, mp_moments, phi_bulk, phi_classical_bulk, phi_classical_spike, phi_spike,
    psi, psi_prime, scenario_constants, xi, BulkLaw, LimitCoefficients, LimitLaw, Scenario,
    ScenarioConstants, ScenarioParams, SpectralLaw, SpikeClass, ThetaSpec,
};
pub use linalg::{
    chi1_upper_quantile, noncentral_chi1_sf, normal_sf, residualize, sample_covariance_eigenvalues,
    thin_svd, top_right_vectors, ThinSvd,
};
pub use models::{
    gen_binomial_mixture, gen_exposure_binomial, gen_exposure_linear, gen_gaussian_mixture,
    gen_outcome, gen_spiked, make_beta, mixture_covariance, subspace_distance, BaseSpectrum,
    CoefficientContext, CoefficientSpec, Dataset, FixedCoefficient, MixtureCovariance, MixtureKind,
    MixtureSpec, RandomKind, SpikeSpec,
};
pub use pcr::{
    c_star_p, kappa2, lr_in, lr_out, run_test, run_test_with_variance, TestOutcome, VarianceMode,
    Variant,
};
