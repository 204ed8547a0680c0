//! Fast invariant suite behind the selftest subcommand: distribution
//! function inversion, closed-form coefficient agreement, the conditional
//! law of the adjusted statistic, and bitwise determinism of the engine.

use std::process::ExitCode;
use std::time::Instant;

use pcrlab_core::models::{
    gen_exposure_linear, gen_outcome, gen_spiked, make_beta, CoefficientContext, CoefficientSpec,
    RandomKind, SpikeSpec,
};
use pcrlab_core::pcr::{kappa2, run_test, Variant};
use pcrlab_core::{
    chi1_upper_quantile, mp_moments, noncentral_chi1_sf, phi_classical_spike, phi_spike, psi,
    run_cell, run_experiment, ExperimentConfig, Result as CoreResult, SpectralLaw,
};

/// Runs every check, prints one line per check, and returns exit code 0
/// only if all pass.
pub fn run() -> ExitCode {
    let checks: [(&str, fn() -> CoreResult<String>); 4] = [
        ("noncentral-sf-inversion", check_sf_inversion),
        ("coefficient-oracle", check_coefficient_oracle),
        ("conditional-law", check_conditional_law),
        ("determinism", check_determinism),
    ];
    let mut all_ok = true;
    for (name, check) in checks {
        let started = Instant::now();
        match check() {
            Ok(detail) => {
                println!(
                    "PASS {name} ({detail}; {:.2}s)",
                    started.elapsed().as_secs_f64()
                );
            }
            Err(err) => {
                all_ok = false;
                println!(
                    "FAIL {name} ({err}; {:.2}s)",
                    started.elapsed().as_secs_f64()
                );
            }
        }
    }
    if all_ok {
        println!("selftest: all checks passed");
        ExitCode::SUCCESS
    } else {
        println!("selftest: FAILURES detected");
        ExitCode::from(1)
    }
}

fn fail(msg: String) -> pcrlab_core::Error {
    pcrlab_core::Error::Numerical(msg)
}

/// Quantile/survival inversion and monotonicity of the noncentral
/// survival function.
fn check_sf_inversion() -> CoreResult<String> {
    for alpha in [0.2, 0.1, 0.05, 0.01, 0.005, 0.001] {
        let t = chi1_upper_quantile(alpha)?;
        let back = noncentral_chi1_sf(t, 0.0)?;
        if (back - alpha).abs() > 1e-10 {
            return Err(fail(format!(
                "sf(quantile({alpha})) = {back}, expected {alpha}"
            )));
        }
    }
    let reference = chi1_upper_quantile(0.05)?;
    if (reference - 3.841459).abs() > 1e-5 {
        return Err(fail(format!("quantile(0.05) = {reference}")));
    }
    let t = reference;
    let mut last = noncentral_chi1_sf(t, 0.0)?;
    for ncp in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
        let v = noncentral_chi1_sf(t, ncp)?;
        if v <= last {
            return Err(fail(format!("sf not increasing in ncp at {ncp}")));
        }
        last = v;
    }
    Ok(format!("quantile(0.05) = {reference:.6}"))
}

/// General spike coefficients against the independent closed forms for a
/// unit bulk, plus the bulk moment identities.
fn check_coefficient_oracle() -> CoreResult<String> {
    let mut worst: f64 = 0.0;
    for gamma in [0.5, 1.0, 2.0] {
        let h = SpectralLaw::classical(gamma)?;
        let (m1, m2) = mp_moments(&h)?;
        if (m1 - 1.0).abs() > 1e-12 || (m2 - (1.0 + gamma)).abs() > 1e-12 {
            return Err(fail(format!("moments ({m1}, {m2}) at gamma {gamma}")));
        }
        for lambda in [2.0, 4.0, 9.0] {
            let alpha = 1.0 + lambda;
            let expected_psi = alpha + gamma * alpha / (alpha - 1.0);
            let got_psi = psi(alpha, &h)?;
            if (got_psi - expected_psi).abs() > 1e-12 {
                return Err(fail(format!("psi({alpha}) = {got_psi} vs {expected_psi}")));
            }
            for r in [1u8, 2] {
                let general = phi_spike(r, 0, &[alpha], &h)?;
                let classical = phi_classical_spike(r, lambda, gamma)?;
                let diff = (general - classical).abs();
                worst = worst.max(diff);
                if diff > 1e-10 {
                    return Err(fail(format!(
                        "phi_{r} mismatch at lambda {lambda}, gamma {gamma}: {general} vs {classical}"
                    )));
                }
            }
        }
    }
    Ok(format!("max closed-form gap {worst:.2e}"))
}

/// Kolmogorov-Smirnov test of the adjusted statistic against its
/// conditional noncentral chi-square law on one fixed design.
fn check_conditional_law() -> CoreResult<String> {
    let (n, p, k) = (80usize, 40usize, 2usize);
    let delta = 0.25;
    let redraws = 1500usize;
    let spec = SpikeSpec::canonical(&[8.0, 3.0], p);
    let w = gen_spiked(n, p, &spec, 11)?;
    let ctx = CoefficientContext::dimension(p);
    let theta = make_beta(
        &CoefficientSpec::Random {
            sigma2: 1.0,
            kind: RandomKind::Gaussian,
        },
        &ctx,
        12,
    )?;
    let a = gen_exposure_linear(&w, &theta, 1.0, 13)?;
    let beta = make_beta(
        &CoefficientSpec::Random {
            sigma2: 1.0,
            kind: RandomKind::Gaussian,
        },
        &ctx,
        14,
    )?;
    let ncp = kappa2(&a, &w, &beta, None, delta, k, Variant::Out)?;
    let mut probs = Vec::with_capacity(redraws);
    for i in 0..redraws {
        let y = gen_outcome(&a, &w, &beta, delta, 1.0, 1000 + i as u64)?;
        let outcome = run_test(&y, &a, &w, k, Variant::Out, 0.05)?;
        probs.push(1.0 - noncentral_chi1_sf(outcome.statistic, ncp)?);
    }
    probs.sort_by(|x, y| x.partial_cmp(y).expect("probabilities are finite"));
    let m = probs.len() as f64;
    let mut ks: f64 = 0.0;
    for (i, u) in probs.iter().enumerate() {
        let hi = (i + 1) as f64 / m - u;
        let lo = u - i as f64 / m;
        ks = ks.max(hi.max(lo));
    }
    // Asymptotic 1% Kolmogorov-Smirnov critical value.
    let critical = 1.62762 / m.sqrt();
    if ks >= critical {
        return Err(fail(format!("KS {ks:.4} >= critical {critical:.4}")));
    }
    Ok(format!("KS {ks:.4} < {critical:.4}"))
}

/// Bitwise reproducibility of single cells and full grids across thread
/// counts.
fn check_determinism() -> CoreResult<String> {
    let config = ExperimentConfig {
        n: 24,
        p: 16,
        reps: 6,
        tau0_grid: vec![0.0, 0.5, 1.0],
        ..Default::default()
    };
    let first = run_cell(&config, 0.5, 2)?;
    let second = run_cell(&config, 0.5, 2)?;
    if first.statistic.to_bits() != second.statistic.to_bits() {
        return Err(fail("run_cell is not reproducible".to_string()));
    }
    let run_with = |threads: usize| -> CoreResult<String> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| fail(format!("pool construction failed: {e}")))?;
        pool.install(|| run_experiment(&config).map(|r| r.to_csv()))
    };
    let serial = run_with(1)?;
    let parallel = run_with(2)?;
    if serial != parallel {
        return Err(fail("thread count changed output bytes".to_string()));
    }
    Ok(format!("{} identical bytes across pools", serial.len()))
}
