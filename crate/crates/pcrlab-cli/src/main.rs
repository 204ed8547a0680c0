//! Command-line front end: experiment dispatch, limit-coefficient queries,
//! asymptotic power tables, figure reproduction recipes, and a fast
//! self-test.
//!
//! Exit codes: 0 success, 1 self-test failure, 2 configuration error,
//! 3 IO error. Output files are UTF-8 with LF line endings; numeric
//! fields use a stable six-significant-digit format; no timestamps are
//! embedded, so identical invocations produce identical bytes.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pcrlab_core::{
    asymptotic_power, chi1_upper_quantile, format_float, kappa2_limit_law, limit_coefficients,
    mp_moments, run_experiment, scenario_constants, sha256_hex, Error as CoreError,
    ExperimentConfig, ExperimentResult, ExposureKind, LimitLaw, ModelKind, PresetScale,
    Result as CoreResult, Scenario, ScenarioParams, SpectralLaw, SpikeClass, ThetaSpec,
};

mod selftest;

#[derive(Parser)]
#[command(
    name = "pcrlab",
    version,
    about = "Simulation laboratory for principal-component-adjusted regression tests"
)]
struct Cli {
    /// Worker threads; falls back to the PCRLAB_THREADS environment
    /// variable, then to the number of cores. Never affects output bytes.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Master-seed override for simulate and reproduce.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print progress to standard error.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment configuration; write a results CSV and a JSON
    /// manifest.
    Simulate {
        /// Experiment configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Manifest path; defaults to the CSV path with a manifest.json
        /// extension.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Print spike/bulk limit coefficients for an atomic bulk law.
    Limits {
        /// Coefficient query (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output path; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the asymptotic power curve over a grid of drifts.
    Power {
        /// Scenario description (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate the figure tables at desk or paper scale.
    Reproduce {
        #[arg(value_enum)]
        figure: Figure,
        #[arg(value_enum, default_value = "desk")]
        scale: Scale,
        /// Output directory; created if absent.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the fast invariant checks and report pass/fail per check.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Figure {
    Fig1,
    Fig2,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Scale {
    Desk,
    Paper,
}

impl Scale {
    fn preset(self) -> PresetScale {
        match self {
            Scale::Desk => PresetScale::Desk,
            Scale::Paper => PresetScale::Paper,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(cli.threads);
    let outcome = match &cli.command {
        Command::Simulate {
            config,
            out,
            manifest,
        } => cmd_simulate(config, out, manifest.as_deref(), cli.seed, cli.verbose),
        Command::Limits { config, out } => cmd_limits(config, out.as_deref()),
        Command::Power { config, out } => cmd_power(config, out.as_deref()),
        Command::Reproduce {
            figure,
            scale,
            out_dir,
        } => cmd_reproduce(*figure, *scale, out_dir, cli.seed, cli.verbose),
        Command::Selftest => return selftest::run(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                CoreError::Io(_) => 3u8,
                _ => 2u8,
            })
        }
    }
}

/// Builds the global worker pool from --threads or PCRLAB_THREADS.
fn init_threads(flag: Option<usize>) {
    let from_env = std::env::var("PCRLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    if let Some(threads) = flag.or(from_env) {
        if threads > 0 {
            // Ignore the error if a pool already exists.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global();
        }
    }
}

fn read_config(path: &Path) -> CoreResult<String> {
    std::fs::read_to_string(path).map_err(CoreError::Io)
}

fn write_output(path: &Path, contents: &str) -> CoreResult<()> {
    std::fs::write(path, contents).map_err(CoreError::Io)
}

/// Manifest written beside every simulate CSV.
#[derive(Serialize)]
struct SimulateManifest {
    master_seed: u64,
    rows: usize,
    sha256: String,
    csv_file: String,
    config: ExperimentConfig,
}

fn cmd_simulate(
    config_path: &Path,
    out_path: &Path,
    manifest_path: Option<&Path>,
    seed: Option<u64>,
    verbose: u8,
) -> CoreResult<()> {
    let raw = read_config(config_path)?;
    let mut config: ExperimentConfig = serde_json::from_str(&raw)
        .map_err(|e| CoreError::Config(format!("config parse failed: {e}")))?;
    if let Some(s) = seed {
        config.master_seed = s;
    }
    config.validate()?;
    if verbose > 0 {
        eprintln!(
            "simulate: {} {} n={} p={} reps={} grid={}",
            config.variant.label(),
            config.model.label(),
            config.n,
            config.p,
            config.reps,
            config.tau0_grid.len()
        );
    }
    let result = run_experiment(&config)?;
    write_result(&result, out_path, manifest_path)?;
    if verbose > 0 {
        eprintln!("simulate: wrote {}", out_path.display());
    }
    Ok(())
}

fn write_result(
    result: &ExperimentResult,
    out_path: &Path,
    manifest_path: Option<&Path>,
) -> CoreResult<()> {
    let csv = result.to_csv();
    write_output(out_path, &csv)?;
    let manifest = SimulateManifest {
        master_seed: result.config.master_seed,
        rows: result.cells.len(),
        sha256: sha256_hex(csv.as_bytes()),
        csv_file: file_name(out_path),
        config: result.config.clone(),
    };
    let manifest_out = match manifest_path {
        Some(p) => p.to_path_buf(),
        None => out_path.with_extension("manifest.json"),
    };
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoreError::Config(format!("manifest serialization failed: {e}")))?;
    write_output(&manifest_out, &body)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

/// Query schema for the limits subcommand.
#[derive(Deserialize)]
struct LimitsRequest {
    gamma: f64,
    /// Population spiked eigenvalues, strictly decreasing.
    #[serde(default)]
    spikes: Vec<f64>,
    /// Atomic bulk law as (value, weight) pairs; point mass at one when
    /// omitted.
    #[serde(default)]
    bulk: Option<Vec<(f64, f64)>>,
    /// Optional exposure-coefficient description for the scenario
    /// constants.
    #[serde(default)]
    theta: Option<ThetaRequest>,
    /// Retained adjustment directions for the scenario constants.
    #[serde(default)]
    k: Option<usize>,
    /// Fail unless every spike is distant.
    #[serde(default)]
    require_distant: bool,
}

#[derive(Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
enum ThetaRequest {
    FixedProjections { projections: Vec<f64>, norm2: f64 },
    Random { sigma2: f64 },
}

impl ThetaRequest {
    fn to_spec(&self) -> ThetaSpec {
        match self {
            ThetaRequest::FixedProjections { projections, norm2 } => ThetaSpec::FixedProjections {
                projections: projections.clone(),
                norm2: *norm2,
            },
            ThetaRequest::Random { sigma2 } => ThetaSpec::Random { sigma2: *sigma2 },
        }
    }
}

fn spectral_law(gamma: f64, bulk: &Option<Vec<(f64, f64)>>) -> CoreResult<SpectralLaw> {
    match bulk {
        Some(atoms) => SpectralLaw::atomic(gamma, atoms.clone()),
        None => SpectralLaw::classical(gamma),
    }
}

fn cmd_limits(config_path: &Path, out_path: Option<&Path>) -> CoreResult<()> {
    let raw = read_config(config_path)?;
    let request: LimitsRequest = serde_json::from_str(&raw)
        .map_err(|e| CoreError::Config(format!("config parse failed: {e}")))?;
    let law = spectral_law(request.gamma, &request.bulk)?;
    let theta_spec = request.theta.as_ref().map(|t| t.to_spec());
    let theta_arg = theta_spec
        .as_ref()
        .map(|spec| (spec, request.k.unwrap_or(request.spikes.len())));
    let coefficients = limit_coefficients(&request.spikes, &law, theta_arg)?;
    if request.require_distant {
        if let Some(close) = coefficients
            .classes
            .iter()
            .position(|c| *c == SpikeClass::Close)
        {
            return Err(CoreError::NotApplicable(format!(
                "spike {} (value {}) is close to the bulk and has no distant-spike limits",
                close, request.spikes[close]
            )));
        }
    }
    let body = serde_json::to_string_pretty(&coefficients)
        .map_err(|e| CoreError::Config(format!("serialization failed: {e}")))?;
    match out_path {
        Some(p) => write_output(p, &body)?,
        None => println!("{body}"),
    }
    Ok(())
}

/// Query schema for the power subcommand.
#[derive(Deserialize)]
struct PowerRequest {
    scenario: ScenarioRequest,
    gamma: f64,
    #[serde(default)]
    spikes: Vec<f64>,
    #[serde(default)]
    bulk: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    theta: Option<ThetaRequest>,
    #[serde(default = "one")]
    sigma2_beta: f64,
    #[serde(default = "one")]
    sigma2_theta: f64,
    #[serde(default = "one")]
    sigma2_g: f64,
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default = "default_k")]
    k: usize,
    /// Empirical variance constant for the fixed-outcome,
    /// random-exposure scenario.
    #[serde(default)]
    c1: Option<f64>,
    h_grid: Vec<f64>,
}

fn one() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    0.05
}
fn default_k() -> usize {
    1
}

#[derive(Deserialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum ScenarioRequest {
    BetaRandomThetaFixed,
    BetaFixedThetaRandom,
    BothRandom,
}

impl ScenarioRequest {
    fn to_scenario(self) -> Scenario {
        match self {
            ScenarioRequest::BetaRandomThetaFixed => Scenario::BetaRandomThetaFixed,
            ScenarioRequest::BetaFixedThetaRandom => Scenario::BetaFixedThetaRandom,
            ScenarioRequest::BothRandom => Scenario::BothRandom,
        }
    }
}

fn cmd_power(config_path: &Path, out_path: Option<&Path>) -> CoreResult<()> {
    let raw = read_config(config_path)?;
    let request: PowerRequest = serde_json::from_str(&raw)
        .map_err(|e| CoreError::Config(format!("config parse failed: {e}")))?;
    if request.h_grid.is_empty() {
        return Err(CoreError::Config("h_grid must be non-empty".to_string()));
    }
    if matches!(request.scenario, ScenarioRequest::BetaFixedThetaRandom) && request.c1.is_none() {
        return Err(CoreError::NotAvailable(
            "the limit variance for a fixed outcome coefficient with a random exposure \
             coefficient has no closed form; estimate the constant empirically and pass it \
             as \"c1\""
                .to_string(),
        ));
    }
    let law = spectral_law(request.gamma, &request.bulk)?;
    let (m1, m2) = mp_moments(&law)?;
    let (c0, c4) = match request.scenario {
        ScenarioRequest::BetaRandomThetaFixed => {
            let theta = request.theta.as_ref().ok_or_else(|| {
                CoreError::Config(
                    "a fixed exposure coefficient requires a \"theta\" description".to_string(),
                )
            })?;
            let constants = scenario_constants(&request.spikes, &law, &theta.to_spec(), request.k)?;
            (Some(constants.c0), Some(constants.c4))
        }
        _ => (None, None),
    };
    let t = chi1_upper_quantile(request.alpha)?;
    let mut out = String::from("h,t,upsilon\n");
    for &h in &request.h_grid {
        let params = ScenarioParams {
            sigma2_beta: request.sigma2_beta,
            sigma2_theta: request.sigma2_theta,
            sigma2_g: request.sigma2_g,
            gamma: request.gamma,
            h,
            c0,
            c4,
            m1,
            m2,
            c1: request.c1,
        };
        let law: LimitLaw = kappa2_limit_law(request.scenario.to_scenario(), &params)?;
        let upsilon = asymptotic_power(t, &law)?;
        out.push_str(&format!(
            "{},{},{}\n",
            format_float(h),
            format_float(t),
            format_float(upsilon)
        ));
    }
    match out_path {
        Some(p) => write_output(p, &out)?,
        None => print!("{out}"),
    }
    Ok(())
}

/// Manifest written by reproduce runs.
#[derive(Serialize)]
struct ReproduceManifest {
    figure: Figure,
    scale: Scale,
    master_seed: u64,
    files: Vec<ReproduceEntry>,
}

#[derive(Serialize)]
struct ReproduceEntry {
    name: String,
    rows: usize,
    sha256: String,
    config: ExperimentConfig,
}

fn gamma_tag(gamma: f64) -> &'static str {
    if gamma == 2.0 {
        "2"
    } else {
        "05"
    }
}

fn cmd_reproduce(
    figure: Figure,
    scale: Scale,
    out_dir: &Path,
    seed: Option<u64>,
    verbose: u8,
) -> CoreResult<()> {
    std::fs::create_dir_all(out_dir).map_err(CoreError::Io)?;
    let gammas = [2.0, 0.5];
    let mut panels: Vec<(String, ExperimentConfig)> = Vec::new();
    match figure {
        Figure::Fig1 => {
            let combos = [
                (ModelKind::Spiked, ExposureKind::Linear),
                (ModelKind::gauss_mixture(), ExposureKind::Linear),
                (ModelKind::binom_mixture(), ExposureKind::BinomialLogistic),
            ];
            for (model, exposure) in combos {
                for gamma in gammas {
                    let mut config = ExperimentConfig::fig1(model, exposure, gamma, scale.preset())?;
                    if let Some(s) = seed {
                        config.master_seed = s;
                    }
                    let name = format!("fig1_{}_gamma{}.csv", model.label(), gamma_tag(gamma));
                    panels.push((name, config));
                }
            }
        }
        Figure::Fig2 => {
            for gamma in gammas {
                let mut config = ExperimentConfig::fig2(gamma, scale.preset())?;
                if let Some(s) = seed {
                    config.master_seed = s;
                }
                let name = format!("fig2_gamma{}.csv", gamma_tag(gamma));
                panels.push((name, config));
            }
        }
    }
    let mut entries = Vec::with_capacity(panels.len());
    let mut master_seed = 0;
    for (name, config) in panels {
        if verbose > 0 {
            eprintln!("reproduce: running {name}");
        }
        let started = std::time::Instant::now();
        let result = run_experiment(&config)?;
        let csv = result.to_csv();
        write_output(&out_dir.join(&name), &csv)?;
        master_seed = config.master_seed;
        entries.push(ReproduceEntry {
            name: name.clone(),
            rows: result.cells.len(),
            sha256: sha256_hex(csv.as_bytes()),
            config,
        });
        if verbose > 0 {
            eprintln!(
                "reproduce: {name} done in {:.1}s",
                started.elapsed().as_secs_f64()
            );
        }
    }
    let manifest = ReproduceManifest {
        figure,
        scale,
        master_seed,
        files: entries,
    };
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoreError::Config(format!("manifest serialization failed: {e}")))?;
    write_output(&out_dir.join("manifest.json"), &body)
}
