//! End-to-end checks of the Monte Carlo engine against the published
//! protocol: overlay convergence at full scale, the qualitative ordering of
//! the out-of-model curves, the in-model inflation under a random outcome
//! coefficient, and the phase transition in the angle-coupled construction.

use pcrlab_core::{
    run_experiment, CellResult, CoefficientMode, ExperimentConfig, ExposureKind, ModelKind,
    PresetScale, Variant,
};

/// Absolute floor of the overlay-agreement tolerance.
const OVERLAY_ABS_TOL: f64 = 0.02;
/// Acceptance band for rates that converge to the nominal level.
const ALPHA_BAND: (f64, f64) = (0.01, 0.12);

fn cell<'a>(
    cells: &'a [CellResult],
    tau0: f64,
    beta: CoefficientMode,
    theta: Option<CoefficientMode>,
) -> &'a CellResult {
    cells
        .iter()
        .find(|c| c.tau0 == tau0 && c.beta_mode == beta && c.theta_mode == theta)
        .expect("cell present")
}

/// At p = 1000, n = 2000 with 2000 replications, the closed-form overlays of
/// the random-outcome-coefficient scenarios match the empirical rejection
/// rates within max(0.02, 3 mc_se).
#[test]
fn overlay_matches_empirical_rates_at_paper_scale() {
    let mut config = ExperimentConfig::fig1(
        ModelKind::Spiked,
        ExposureKind::Linear,
        0.5,
        PresetScale::Paper,
    )
    .unwrap();
    config.tau0_grid = vec![0.25];
    assert_eq!((config.n, config.p, config.reps), (2000, 1000, 2000));
    let result = run_experiment(&config).unwrap();
    assert_eq!(result.cells.len(), 4);

    for theta in [CoefficientMode::Fixed, CoefficientMode::Random] {
        let cell = cell(&result.cells, 0.25, CoefficientMode::Random, Some(theta));
        let theory = cell.theory_rate.expect("closed-form overlay available");
        let tol = OVERLAY_ABS_TOL.max(3.0 * cell.mc_se);
        assert!(
            (cell.rate - theory).abs() <= tol,
            "theta {theta:?}: empirical {} vs theory {theory} (tol {tol})",
            cell.rate
        );
    }
    for theta in [CoefficientMode::Fixed, CoefficientMode::Random] {
        let cell = cell(&result.cells, 0.25, CoefficientMode::Fixed, Some(theta));
        assert!(cell.theory_rate.is_none(), "fixed beta has no closed form");
    }
}

/// Desk-scale out-of-model grid at gamma = 2: the fixed-fixed curve
/// dominates at small tau0, the fixed-outcome-coefficient curves settle at
/// the nominal level as tau0 reaches one, and the random-outcome curves
/// stay inflated at their flat limits.
#[test]
fn out_grid_ordering_and_convergence_to_alpha() {
    let mut config = ExperimentConfig::fig1(
        ModelKind::Spiked,
        ExposureKind::Linear,
        2.0,
        PresetScale::Desk,
    )
    .unwrap();
    config.tau0_grid = vec![0.05, 1.0];
    let result = run_experiment(&config).unwrap();
    assert_eq!(result.cells.len(), 8);

    let ff_small = cell(
        &result.cells,
        0.05,
        CoefficientMode::Fixed,
        Some(CoefficientMode::Fixed),
    );
    for theta in [CoefficientMode::Fixed, CoefficientMode::Random] {
        let random_beta = cell(&result.cells, 0.05, CoefficientMode::Random, Some(theta));
        assert!(
            ff_small.rate >= random_beta.rate + 0.25,
            "fixed-fixed {} should dominate random-beta {} at small tau0",
            ff_small.rate,
            random_beta.rate
        );
    }
    let fr_small = cell(
        &result.cells,
        0.05,
        CoefficientMode::Fixed,
        Some(CoefficientMode::Random),
    );
    assert!(ff_small.rate >= fr_small.rate + 0.25);

    // Angle-coupled (fixed-beta) curves settle at the level; random-beta
    // curves keep their bulk-confounding inflation.
    for theta in [CoefficientMode::Fixed, CoefficientMode::Random] {
        let fixed_beta = cell(&result.cells, 1.0, CoefficientMode::Fixed, Some(theta));
        assert!(
            fixed_beta.rate >= ALPHA_BAND.0 && fixed_beta.rate <= ALPHA_BAND.1,
            "fixed-beta rate {} outside the alpha band",
            fixed_beta.rate
        );
        let random_beta = cell(&result.cells, 1.0, CoefficientMode::Random, Some(theta));
        assert!(
            random_beta.rate >= 0.10,
            "random-beta rate {} should stay inflated",
            random_beta.rate
        );
    }
    assert!(
        ff_small.rate
            > cell(
                &result.cells,
                1.0,
                CoefficientMode::Fixed,
                Some(CoefficientMode::Fixed)
            )
            .rate
                + 0.5
    );
}

/// In-model testing with a random outcome coefficient rejects well above
/// the nominal level even with no spike to remove, while the population
/// least-squares coefficient keeps the size near the level.
#[test]
fn in_model_random_beta_is_inflated() {
    let mut config = ExperimentConfig::fig2(2.0, PresetScale::Desk).unwrap();
    config.tau0_grid = vec![0.0];
    assert_eq!(config.variant, Variant::In);
    let result = run_experiment(&config).unwrap();
    assert_eq!(result.cells.len(), 2);

    let fixed = cell(&result.cells, 0.0, CoefficientMode::Fixed, None);
    let random = cell(&result.cells, 0.0, CoefficientMode::Random, None);
    assert!(
        random.rate >= 0.09,
        "random-beta in-model rate {} not bounded away from the level",
        random.rate
    );
    assert!(
        fixed.rate <= 0.11,
        "population least-squares rate {} unexpectedly inflated",
        fixed.rate
    );
}

/// Phase transition of the angle-coupled construction at p = 500, gamma = 2:
/// the fixed-fixed size collapses by at least 0.5 between tau0 = 0.2 and
/// tau0 = 0.8.
#[test]
fn phase_transition_gap_at_desk_scale() {
    let mut config = ExperimentConfig::fig1(
        ModelKind::Spiked,
        ExposureKind::Linear,
        2.0,
        PresetScale::Desk,
    )
    .unwrap();
    config.p = 500;
    config.n = 250;
    config.reps = 300;
    config.tau0_grid = vec![0.2, 0.8];
    let result = run_experiment(&config).unwrap();

    let low = cell(
        &result.cells,
        0.2,
        CoefficientMode::Fixed,
        Some(CoefficientMode::Fixed),
    );
    let high = cell(
        &result.cells,
        0.8,
        CoefficientMode::Fixed,
        Some(CoefficientMode::Fixed),
    );
    assert!(
        low.rate - high.rate >= 0.5,
        "size gap {} - {} below 0.5",
        low.rate,
        high.rate
    );
    assert!(high.rate >= 0.01 && high.rate <= 0.12);
}

/// A one-replication grid completes and emits well-formed CSV.
#[test]
fn single_rep_smoke_grid() {
    let mut config = ExperimentConfig::fig1(
        ModelKind::Spiked,
        ExposureKind::Linear,
        2.0,
        PresetScale::Desk,
    )
    .unwrap();
    config.n = 32;
    config.p = 64;
    config.reps = 1;
    config.tau0_grid = vec![0.0, 0.5, 1.0];
    let result = run_experiment(&config).unwrap();
    assert_eq!(result.cells.len(), 12);

    let csv = result.to_csv();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    let width = header.split(',').count();
    let mut rows = 0;
    for line in lines {
        assert_eq!(line.split(',').count(), width, "ragged row: {line}");
        rows += 1;
    }
    assert_eq!(rows, 12);
    for cell in &result.cells {
        assert_eq!(cell.reps + cell.degenerate, 1);
        if cell.reps == 1 {
            assert!(cell.rate == 0.0 || cell.rate == 1.0);
        }
    }
}
