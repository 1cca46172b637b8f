//! `pulse-cascade`: runs the scattering scenarios from JSON configs or
//! presets, writes per-run output directories with a manifest, and runs the
//! property battery.

mod check;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use pulse_cascade::experiments::{
    convergence_check, run, ExperimentConfig, InputState, Scenario, WignerConfig, WindowSpec, Windows,
};
use pulse_cascade::Error;

use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "pulse-cascade",
    version,
    about = "Cascaded master-equation simulations of quantum pulses scattering on localized systems",
    long_about = "Times are in units of 1/γ₀ and rates in units of γ₀, where γ₀ = 1 sets the unit."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-level atom driven by a Fock or coherent pulse.
    Rabi(RunArgs),
    /// Pulse reflected by a linear cavity (no Kerr term).
    EmptyCavity(RunArgs),
    /// Kerr squeezing of a coherent pulse.
    Squeeze(RunArgs),
    /// One strong-Kerr pass tuned to the cat condition.
    CatSingle(RunArgs),
    /// Repeated weak-Kerr passes towards a cat state.
    CatMulti(RunArgs),
    /// Property battery against the Schrödinger-picture cascade.
    Check(CheckArgs),
}

#[derive(Args)]
struct CheckArgs {
    /// Coarser time step; same tolerances.
    #[arg(long)]
    small: bool,
}

/// Every numeric flag overrides the config field of the same name.
#[derive(Args)]
struct RunArgs {
    /// JSON config file; defaults to the scenario preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: runs/<scenario>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Desk-scale inputs: Fock n above 5 becomes 5, α above 2 becomes 2.
    #[arg(long)]
    small: bool,
    /// Skip the dt vs dt/2 convergence self-check.
    #[arg(long)]
    skip_convergence_check: bool,

    #[arg(long, conflicts_with_all = ["alpha", "phase"])]
    n: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    phase: Option<f64>,
    #[arg(long)]
    t_p: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    kerr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    kerr_scan: Option<Vec<f64>>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    passes: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    snapshot_passes: Option<Vec<u64>>,
    #[arg(long)]
    snapshot_interval: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    leakage_threshold: Option<f64>,
    #[arg(long)]
    cumulative_leakage_threshold: Option<f64>,
    #[arg(long)]
    record_every: Option<usize>,
    #[arg(long)]
    u_offset: Option<usize>,
    #[arg(long)]
    u_size: Option<usize>,
    #[arg(long)]
    c_size: Option<usize>,
    #[arg(long)]
    v_size: Option<usize>,
    #[arg(long)]
    wigner_extent: Option<f64>,
    #[arg(long)]
    wigner_points: Option<usize>,
    #[arg(long)]
    variance_points: Option<usize>,
    #[arg(long)]
    convergence_horizon: Option<f64>,
    #[arg(long)]
    convergence_tol: Option<f64>,
}

enum Failure {
    /// Invalid configuration or arguments.
    Config(String),
    /// The dt vs dt/2 comparison exceeded its tolerance.
    Convergence(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) => Self::Config(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn build_config(scenario: Scenario, args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let cfg = ExperimentConfig::from_json_file(path)?;
            if cfg.scenario != scenario {
                return Err(Failure::Config(format!(
                    "{}: config is for scenario {}, not {}",
                    path.display(),
                    cfg.scenario.name(),
                    scenario.name()
                )));
            }
            cfg
        }
        None => ExperimentConfig::preset(scenario),
    };
    if args.small {
        cfg = cfg.small();
    }

    if let Some(n) = args.n {
        cfg.input = InputState::Fock { n };
        cfg.windows = None;
    }
    if args.alpha.is_some() || args.phase.is_some() {
        let (alpha, phase) = match cfg.input {
            InputState::Coherent { alpha, phase } => (alpha, phase),
            InputState::Fock { .. } if args.alpha.is_some() => (0.0, 0.0),
            InputState::Fock { .. } => {
                return Err(Failure::Config("--phase needs a coherent input (--alpha)".into()));
            }
        };
        cfg.input = InputState::Coherent {
            alpha: args.alpha.unwrap_or(alpha),
            phase: args.phase.unwrap_or(phase),
        };
        if args.alpha.is_some() {
            cfg.windows = None;
        }
    }
    set(&mut cfg.t_p, args.t_p);
    set(&mut cfg.tau, args.tau);
    set(&mut cfg.gamma, args.gamma);
    set(&mut cfg.dt, args.dt);
    set(&mut cfg.epsilon, args.epsilon);
    set(&mut cfg.leakage_threshold, args.leakage_threshold);
    set(&mut cfg.cumulative_leakage_threshold, args.cumulative_leakage_threshold);
    set(&mut cfg.record_every, args.record_every);
    set(&mut cfg.variance_points, args.variance_points);
    set(&mut cfg.convergence.horizon, args.convergence_horizon);
    set(&mut cfg.convergence.tol, args.convergence_tol);
    if args.kerr.is_some() {
        cfg.kerr = args.kerr;
    }
    if args.kerr_scan.is_some() {
        cfg.kerr_scan = args.kerr_scan.clone();
    }
    if args.t_end.is_some() {
        cfg.t_end = args.t_end;
    }
    if args.passes.is_some() {
        cfg.passes = args.passes;
    }
    if args.snapshot_passes.is_some() {
        cfg.snapshot_passes = args.snapshot_passes.clone();
    }
    if args.snapshot_interval.is_some() {
        cfg.snapshot_interval = args.snapshot_interval;
    }
    if args.wigner_extent.is_some() || args.wigner_points.is_some() {
        let base = cfg.wigner.unwrap_or(WignerConfig {
            extent: 6.0,
            points: 121,
        });
        cfg.wigner = Some(WignerConfig {
            extent: args.wigner_extent.unwrap_or(base.extent),
            points: args.wigner_points.unwrap_or(base.points),
        });
    }
    if args.u_offset.is_some() || args.u_size.is_some() || args.c_size.is_some() || args.v_size.is_some() {
        let [u, c, v] = cfg.resolved_windows()?;
        cfg.windows = Some(Windows {
            u: WindowSpec {
                offset: args.u_offset.unwrap_or(u.offset()),
                size: args.u_size.unwrap_or(u.size()),
            },
            c: Some(WindowSpec {
                offset: 0,
                size: args.c_size.unwrap_or(c.size()),
            }),
            v: WindowSpec {
                offset: 0,
                size: args.v_size.unwrap_or(v.size()),
            },
        });
    }
    if args.skip_convergence_check {
        cfg.convergence.enabled = false;
    }
    cfg.output_dir = Some(
        args.out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs").join(scenario.name())),
    );
    cfg.validate()
        .map_err(|e| Failure::Config(format!("`{}` {}", e.field, e.message)))?;
    Ok(cfg)
}

fn run_scenario(scenario: Scenario, args: &RunArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let cfg = build_config(scenario, args)?;
    let convergence = if cfg.convergence.enabled {
        let report = convergence_check(&cfg)?;
        eprintln!(
            "convergence: dt={} vs dt/2 up to t={:.2}: max |Δρ| {:.2e} (tol {:.1e})",
            report.dt, report.horizon, report.state_delta, report.tol
        );
        if !report.passed {
            return Err(Failure::Convergence(format!(
                "state deviation {:.3e} between dt and dt/2 exceeds {:.1e}; reduce --dt",
                report.state_delta, report.tol
            )));
        }
        Some(report)
    } else {
        None
    };
    let outcome = run(&cfg)?;
    let dir = cfg.output_dir.clone().expect("output directory is always set");
    let manifest = RunManifest::new(&cfg, &outcome, convergence, start.elapsed().as_secs_f64(), &dir);
    let path = manifest.write_atomically(&dir).map_err(Failure::from)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&outcome.summary).map_err(|e| Failure::Runtime(e.to_string()))?
    );
    eprintln!("wrote {} files and {}", outcome.files.len(), path.display());
    Ok(())
}

fn run_check(args: &CheckArgs) -> bool {
    let results = check::battery(args.small);
    let mut all = true;
    for r in &results {
        all &= r.passed;
        println!(
            "{} {} ({}; {:.1}s)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail,
            r.seconds
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
    all
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let scenario = match &cli.command {
        Command::Check(args) => {
            return if run_check(args) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            };
        }
        Command::Rabi(a) => (Scenario::Rabi, a),
        Command::EmptyCavity(a) => (Scenario::EmptyCavity, a),
        Command::Squeeze(a) => (Scenario::Squeeze, a),
        Command::CatSingle(a) => (Scenario::CatSingle, a),
        Command::CatMulti(a) => (Scenario::CatMulti, a),
    };
    match run_scenario(scenario.0, scenario.1) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("invalid configuration: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Convergence(msg)) => {
            eprintln!("convergence check failed: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
