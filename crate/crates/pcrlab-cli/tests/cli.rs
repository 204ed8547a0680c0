//! End-to-end tests of the command-line interface: exit codes, output
//! schemas, closed-form coefficient values, manifest integrity, and
//! byte-level determinism across thread counts and seeds.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

use pcrlab_core::{
    asymptotic_power, asymptotic_size, chi1_upper_quantile, kappa2_limit_law, mp_moments,
    scenario_constants, sha256_hex, Scenario, ScenarioParams, SpectralLaw, ThetaSpec, CSV_HEADER,
};

/// Agreement between a six-significant-digit CSV field and a direct
/// evaluation of the same quantity.
const PRINTED_FLOAT_TOL: f64 = 1e-5;
/// Closed-form coefficient agreement through the JSON round trip.
const COEFF_TOL: f64 = 1e-12;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pcrlab"))
}

fn run(args: &[&str]) -> Output {
    bin()
        .args(args)
        .output()
        .expect("the binary under test launches")
}

/// Runs the binary expecting success; returns captured stdout.
fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "expected success for {:?}\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout is UTF-8")
}

/// Runs the binary expecting the given exit code; returns captured stderr.
fn run_err(args: &[&str], code: i32) -> String {
    let out = run(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "expected exit code {code} for {:?}\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).expect("stderr is UTF-8")
}

fn write_json(dir: &Path, name: &str, body: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(body).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    let raw = std::fs::read_to_string(path).unwrap();
    serde_json::from_str(&raw).unwrap()
}

fn path_str(path: &Path) -> &str {
    path.to_str().expect("temporary paths are UTF-8")
}

/// A small but complete out-of-model experiment configuration.
fn spiked_config(master_seed: u64) -> Value {
    json!({
        "variant": "out",
        "model": {"kind": "spiked"},
        "exposure": "linear",
        "n": 32,
        "p": 64,
        "k": 1,
        "alpha": 0.05,
        "reps": 2,
        "tau0_grid": [0.0, 0.5, 1.0],
        "beta_mode": "fixed",
        "theta_mode": "fixed",
        "sigma_y": 1.0,
        "sigma_g": 1.0,
        "sigma_beta": 1.0,
        "sigma_theta": 1.0,
        "h": 0.0,
        "master_seed": master_seed
    })
}

fn parse_printed(field: &str) -> f64 {
    field
        .parse::<f64>()
        .unwrap_or_else(|_| panic!("numeric CSV field, got {field:?}"))
}

#[test]
fn simulate_writes_frozen_schema_and_manifest() {
    let dir = TempDir::new().unwrap();
    let config = write_json(dir.path(), "config.json", &spiked_config(7));
    let out = dir.path().join("results.csv");
    run_ok(&[
        "simulate",
        "--config",
        path_str(&config),
        "--out",
        path_str(&out),
    ]);

    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    // Three grid points times four coefficient-mode combinations.
    assert_eq!(lines.len(), 1 + 12);
    for row in &lines[1..] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), CSV_HEADER.split(',').count());
        assert_eq!(fields[0], "out");
        assert_eq!(fields[1], "spiked");
        assert_eq!(fields[2], "linear");
        assert_eq!(fields[3], "32");
        assert_eq!(fields[17], "7");
        let rate = parse_printed(fields[14]);
        assert!((0.0..=1.0).contains(&rate));
    }

    let manifest = read_json(&dir.path().join("results.manifest.json"));
    assert_eq!(manifest["master_seed"], 7);
    assert_eq!(manifest["rows"], 12);
    assert_eq!(manifest["csv_file"], "results.csv");
    assert_eq!(manifest["sha256"], sha256_hex(csv.as_bytes()));
    assert_eq!(manifest["config"]["n"], 32);
}

#[test]
fn simulate_is_thread_invariant_and_seed_sensitive() {
    let dir = TempDir::new().unwrap();
    let config = write_json(dir.path(), "config.json", &spiked_config(7));
    let serial = dir.path().join("serial.csv");
    let parallel = dir.path().join("parallel.csv");
    let reseeded = dir.path().join("reseeded.csv");

    run_ok(&[
        "--threads",
        "1",
        "simulate",
        "--config",
        path_str(&config),
        "--out",
        path_str(&serial),
    ]);
    run_ok(&[
        "--threads",
        "3",
        "simulate",
        "--config",
        path_str(&config),
        "--out",
        path_str(&parallel),
    ]);
    assert_eq!(
        std::fs::read(&serial).unwrap(),
        std::fs::read(&parallel).unwrap(),
        "thread count must not change output bytes"
    );

    run_ok(&[
        "--seed",
        "8",
        "simulate",
        "--config",
        path_str(&config),
        "--out",
        path_str(&reseeded),
    ]);
    assert_ne!(
        std::fs::read(&serial).unwrap(),
        std::fs::read(&reseeded).unwrap(),
        "a different master seed must change the replication stream"
    );
    let manifest = read_json(&dir.path().join("reseeded.manifest.json"));
    assert_eq!(manifest["master_seed"], 8);
}

#[test]
fn simulate_rejects_invalid_configurations() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("results.csv");

    let mut bad_k = spiked_config(1);
    bad_k["k"] = json!(0);
    let config = write_json(dir.path(), "bad_k.json", &bad_k);
    let stderr = run_err(
        &[
            "simulate",
            "--config",
            path_str(&config),
            "--out",
            path_str(&out),
        ],
        2,
    );
    assert!(stderr.contains("k"), "diagnostic names the field: {stderr}");

    let mut bad_variant = spiked_config(1);
    bad_variant["variant"] = json!("in");
    bad_variant["model"] = json!({"kind": "gauss_mixture", "shift": 1.0});
    let config = write_json(dir.path(), "bad_variant.json", &bad_variant);
    run_err(
        &[
            "simulate",
            "--config",
            path_str(&config),
            "--out",
            path_str(&out),
        ],
        2,
    );

    let malformed = dir.path().join("malformed.json");
    std::fs::write(&malformed, "{\"variant\": \"out\",").unwrap();
    let stderr = run_err(
        &[
            "simulate",
            "--config",
            path_str(&malformed),
            "--out",
            path_str(&out),
        ],
        2,
    );
    assert!(stderr.contains("parse"), "diagnostic: {stderr}");
    assert!(
        !out.exists(),
        "a rejected configuration must not leave partial output"
    );
}

#[test]
fn simulate_reports_missing_paths_as_io_errors() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("results.csv");
    run_err(
        &[
            "simulate",
            "--config",
            path_str(&dir.path().join("absent.json")),
            "--out",
            path_str(&out),
        ],
        3,
    );

    let config = write_json(dir.path(), "config.json", &spiked_config(1));
    run_err(
        &[
            "simulate",
            "--config",
            path_str(&config),
            "--out",
            path_str(&dir.path().join("no_such_dir").join("results.csv")),
        ],
        3,
    );
}

#[test]
fn limits_matches_unit_bulk_closed_forms() {
    let dir = TempDir::new().unwrap();
    let config = write_json(dir.path(), "limits.json", &json!({"gamma": 1.0, "spikes": [4.0]}));
    let stdout = run_ok(&["limits", "--config", path_str(&config)]);
    let body: Value = serde_json::from_str(&stdout).unwrap();

    // Unit bulk at gamma = 1 with population eigenvalue 4:
    //   psi = 4 + 4/3, psi' = 1 - 1/9, xi_r = alpha psi^{r-1} psi',
    //   phi_1 = alpha (1 - psi'), phi_2 = alpha (alpha + gamma m1) - xi_2.
    let close = |v: &Value, expected: f64| {
        let got = v.as_f64().expect("numeric field");
        assert!(
            (got - expected).abs() <= COEFF_TOL * expected.abs().max(1.0),
            "got {got}, expected {expected}"
        );
    };
    assert_eq!(body["classes"][0], "distant");
    close(&body["psi"][0], 16.0 / 3.0);
    close(&body["psi_prime"][0], 8.0 / 9.0);
    close(&body["xi1"][0], 32.0 / 9.0);
    close(&body["xi2"][0], 512.0 / 27.0);
    close(&body["phi1_spike"][0], 4.0 / 9.0);
    close(&body["phi2_spike"][0], 28.0 / 27.0);
    close(&body["phi1_bulk"], 1.0);
    close(&body["phi2_bulk"], 2.0);
    close(&body["m1"], 1.0);
    close(&body["m2"], 2.0);
    assert!(body["constants"].is_null());

    // Bulk-only query at gamma = 1/2, written to a file.
    let config = write_json(dir.path(), "bulk.json", &json!({"gamma": 0.5}));
    let out = dir.path().join("bulk_out.json");
    run_ok(&[
        "limits",
        "--config",
        path_str(&config),
        "--out",
        path_str(&out),
    ]);
    let body = read_json(&out);
    close(&body["m1"], 1.0);
    close(&body["m2"], 1.5);
    assert_eq!(body["spikes"].as_array().unwrap().len(), 0);
}

#[test]
fn limits_reports_scenario_constants_and_distance_gate() {
    let dir = TempDir::new().unwrap();
    let query = json!({
        "gamma": 1.0,
        "spikes": [4.0],
        "theta": {"mode": "fixed_projections", "projections": [0.8], "norm2": 1.0},
        "k": 1
    });
    let config = write_json(dir.path(), "constants.json", &query);
    let stdout = run_ok(&["limits", "--config", path_str(&config)]);
    let body: Value = serde_json::from_str(&stdout).unwrap();
    let expected = scenario_constants(
        &[4.0],
        &SpectralLaw::classical(1.0).unwrap(),
        &ThetaSpec::FixedProjections {
            projections: vec![0.8],
            norm2: 1.0,
        },
        1,
    )
    .unwrap();
    let got_c0 = body["constants"]["c0"].as_f64().unwrap();
    let got_c4 = body["constants"]["c4"].as_f64().unwrap();
    assert!((got_c0 - expected.c0).abs() <= COEFF_TOL);
    assert!((got_c4 - expected.c4).abs() <= COEFF_TOL);

    // A spike below the phase transition has no distant-spike limits.
    let query = json!({"gamma": 1.0, "spikes": [1.5], "require_distant": true});
    let config = write_json(dir.path(), "close.json", &query);
    let stderr = run_err(&["limits", "--config", path_str(&config)], 2);
    assert!(stderr.contains("close"), "diagnostic: {stderr}");

    // Spikes must be strictly decreasing; atom weights must be positive.
    let config = write_json(dir.path(), "ties.json", &json!({"gamma": 1.0, "spikes": [3.0, 3.0]}));
    run_err(&["limits", "--config", path_str(&config)], 2);
    let config = write_json(
        dir.path(),
        "bad_bulk.json",
        &json!({"gamma": 1.0, "bulk": [[1.0, -0.5]]}),
    );
    run_err(&["limits", "--config", path_str(&config)], 2);
}

#[test]
fn power_table_matches_direct_evaluation() {
    let dir = TempDir::new().unwrap();
    let query = json!({
        "scenario": "both_random",
        "gamma": 2.0,
        "h_grid": [0.0, 1.0, 2.0]
    });
    let config = write_json(dir.path(), "power.json", &query);
    let stdout = run_ok(&["power", "--config", path_str(&config)]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "h,t,upsilon");
    assert_eq!(lines.len(), 4);

    let spectral = SpectralLaw::classical(2.0).unwrap();
    let (m1, m2) = mp_moments(&spectral).unwrap();
    let t = chi1_upper_quantile(0.05).unwrap();
    let mut last = 0.0;
    for (row, h) in lines[1..].iter().zip([0.0, 1.0, 2.0]) {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 3);
        let params = ScenarioParams {
            sigma2_beta: 1.0,
            sigma2_theta: 1.0,
            sigma2_g: 1.0,
            gamma: 2.0,
            h,
            c0: None,
            c4: None,
            m1,
            m2,
            c1: None,
        };
        let law = kappa2_limit_law(Scenario::BothRandom, &params).unwrap();
        let expected = asymptotic_power(t, &law).unwrap();
        let got = parse_printed(fields[2]);
        assert!(
            (got - expected).abs() <= PRINTED_FLOAT_TOL * expected.max(1.0),
            "h = {h}: got {got}, expected {expected}"
        );
        if h == 0.0 {
            let size = asymptotic_size(0.05, &law).unwrap();
            assert!((got - size).abs() <= PRINTED_FLOAT_TOL);
        }
        assert!(got >= last, "power must be nondecreasing in h");
        last = got;
    }
}

#[test]
fn power_scenario_requirements_are_enforced() {
    let dir = TempDir::new().unwrap();

    // The fixed-outcome, random-exposure variance has no closed form.
    let query = json!({
        "scenario": "beta_fixed_theta_random",
        "gamma": 2.0,
        "h_grid": [0.0, 1.0]
    });
    let config = write_json(dir.path(), "no_c1.json", &query);
    let stderr = run_err(&["power", "--config", path_str(&config)], 2);
    assert!(stderr.contains("c1"), "diagnostic: {stderr}");

    // Supplying the empirical constant unlocks the table.
    let query = json!({
        "scenario": "beta_fixed_theta_random",
        "gamma": 2.0,
        "c1": 0.7,
        "h_grid": [0.0, 1.0]
    });
    let config = write_json(dir.path(), "with_c1.json", &query);
    let stdout = run_ok(&["power", "--config", path_str(&config)]);
    assert_eq!(stdout.lines().count(), 3);

    // A fixed exposure coefficient needs its projection description.
    let query = json!({
        "scenario": "beta_random_theta_fixed",
        "gamma": 2.0,
        "h_grid": [0.0]
    });
    let config = write_json(dir.path(), "no_theta.json", &query);
    let stderr = run_err(&["power", "--config", path_str(&config)], 2);
    assert!(stderr.contains("theta"), "diagnostic: {stderr}");

    let query = json!({"scenario": "both_random", "gamma": 2.0, "h_grid": []});
    let config = write_json(dir.path(), "empty.json", &query);
    run_err(&["power", "--config", path_str(&config)], 2);
}

#[test]
fn power_with_scenario_constants_matches_core_composition() {
    let dir = TempDir::new().unwrap();
    let query = json!({
        "scenario": "beta_random_theta_fixed",
        "gamma": 1.0,
        "spikes": [4.0],
        "theta": {"mode": "fixed_projections", "projections": [0.8], "norm2": 1.0},
        "k": 1,
        "h_grid": [0.0, 1.5]
    });
    let config = write_json(dir.path(), "theta_power.json", &query);
    let out = dir.path().join("theta_power.csv");
    run_ok(&[
        "power",
        "--config",
        path_str(&config),
        "--out",
        path_str(&out),
    ]);
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);

    let spectral = SpectralLaw::classical(1.0).unwrap();
    let (m1, m2) = mp_moments(&spectral).unwrap();
    let constants = scenario_constants(
        &[4.0],
        &spectral,
        &ThetaSpec::FixedProjections {
            projections: vec![0.8],
            norm2: 1.0,
        },
        1,
    )
    .unwrap();
    let t = chi1_upper_quantile(0.05).unwrap();
    for (row, h) in lines[1..].iter().zip([0.0, 1.5]) {
        let fields: Vec<&str> = row.split(',').collect();
        let params = ScenarioParams {
            sigma2_beta: 1.0,
            sigma2_theta: 1.0,
            sigma2_g: 1.0,
            gamma: 1.0,
            h,
            c0: Some(constants.c0),
            c4: Some(constants.c4),
            m1,
            m2,
            c1: None,
        };
        let law = kappa2_limit_law(Scenario::BetaRandomThetaFixed, &params).unwrap();
        let expected = asymptotic_power(t, &law).unwrap();
        let got = parse_printed(fields[2]);
        assert!(
            (got - expected).abs() <= PRINTED_FLOAT_TOL * expected.max(1.0),
            "h = {h}: got {got}, expected {expected}"
        );
    }
}

#[test]
fn reproduce_fig2_desk_writes_deterministic_tables() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("fig2");
    run_ok(&[
        "--seed",
        "4242",
        "reproduce",
        "fig2",
        "desk",
        "--out-dir",
        path_str(&out_dir),
    ]);

    let manifest = read_json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["figure"], "fig2");
    assert_eq!(manifest["scale"], "desk");
    assert_eq!(manifest["master_seed"], 4242);
    let files = manifest["files"].as_array().unwrap();
    assert_eq!(files.len(), 2);

    for entry in files {
        let name = entry["name"].as_str().unwrap();
        assert!(name == "fig2_gamma2.csv" || name == "fig2_gamma05.csv");
        let csv = std::fs::read_to_string(out_dir.join(name)).unwrap();
        assert_eq!(entry["sha256"], sha256_hex(csv.as_bytes()));
        let lines: Vec<&str> = csv.lines().collect();
        // Header plus 21 grid points times two coefficient treatments.
        assert_eq!(lines.len(), 1 + 42, "{name}");
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(entry["rows"], 42);
        for row in &lines[1..] {
            let fields: Vec<&str> = row.split(',').collect();
            assert_eq!(fields[0], "in");
            assert_eq!(fields[2], "na", "the in-model design has no separate exposure");
            assert_eq!(fields[9], "na", "no exposure coefficient in the in-model run");
            assert_eq!(fields[17], "4242");
        }
    }
}

#[test]
fn selftest_passes_and_reports_each_check() {
    let out = run(&["selftest"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(
        out.status.success(),
        "selftest failed:\n{stdout}"
    );
    assert_eq!(stdout.matches("PASS").count(), 4, "output:\n{stdout}");
    assert!(!stdout.contains("FAIL"), "output:\n{stdout}");
    assert!(stdout.contains("selftest: all checks passed"));
}
