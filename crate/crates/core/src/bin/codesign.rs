//! `codesign` command-line front end.
//!
//! Exit codes: 0 on success, 1 on a domain error (the error name is printed
//! first), 2 on a usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use codesign::optimizer::{ranked_candidates, refine_lambda, snap_and_compare};
use codesign::report::{combine, sim_document, PlanRow, PlanTable, SCHEMA_VERSION};
use codesign::roofline::roofline_matrix;
use codesign::simulator::{run, validate_against_model, SimConfig, StageTimes, ValidationOptions};
use codesign::split_consistency::{lab_step_size, random_instance, rate_check};
use codesign::{evaluate, fusion_check, load_config, ConfigF64, FusionStrategy, OptimizeError, Problem};

type Failure = Box<dyn std::error::Error>;

#[derive(Debug, Parser)]
#[command(name = "codesign", version, about = "Plan, cost and simulate split inference across two edge devices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classify every model against every device as compute- or memory-constrained (CSV).
    Roofline {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Cost of one (cut, theta1, theta2) candidate (JSON).
    Cost {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        devices: DeviceArgs,
        /// Boundary index: layers [0, K) run on device 1.
        #[arg(long, value_name = "K")]
        cut: usize,
        /// Fusion strategy of the first sub-model (S3, S3+Ss, S3+S1, S3+Ss+S1).
        #[arg(long, value_name = "STRATEGY")]
        theta1: FusionStrategy,
        /// Fusion strategy of the second sub-model.
        #[arg(long, value_name = "STRATEGY")]
        theta2: FusionStrategy,
        #[command(flatten)]
        out: OutArg,
    },
    /// Grid search over cuts and strategy pairs; ranked candidate table (CSV).
    Plan {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        devices: DeviceArgs,
        /// Only accept candidates whose sub-model intensities meet both devices' balance.
        #[arg(long)]
        strict: bool,
        /// Refine the cut by gradient descent on the relaxed latency, then snap it.
        #[arg(long)]
        refine: bool,
        /// Learning rate of the refinement.
        #[arg(long, default_value_t = 0.05, value_name = "ALPHA")]
        alpha: f64,
        /// Iterations of the refinement.
        #[arg(long, default_value_t = 200, value_name = "N")]
        iters: usize,
        /// Also write the winning plan as JSON to this path.
        #[arg(long, value_name = "PATH")]
        plan_json: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Randomized check that each fused kernel reproduces its branch sum (CSV).
    FuseCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trials per strategy.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Split gradient descent on a random quadratic, checked against the geometric bound (CSV).
    ConvergenceLab {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of parameters.
        #[arg(long, default_value_t = 16, value_name = "D")]
        dim: usize,
        /// Descent steps.
        #[arg(long, default_value_t = 500, value_name = "K")]
        steps: usize,
        /// Step size; defaults to 0.9·min(2/mu, 2/L)·(mu/L).
        #[arg(long)]
        eta: Option<f64>,
        /// Smallest eigenvalue of the generated matrix.
        #[arg(long, default_value_t = 0.5)]
        mu: f64,
        /// Largest eigenvalue of the generated matrix.
        #[arg(long = "lip", default_value_t = 2.0, value_name = "L")]
        lip: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Discrete-event simulation of the split pipeline (JSON).
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        devices: DeviceArgs,
        /// Arrival rate in requests per second.
        #[arg(long, value_name = "R")]
        rate: f64,
        /// Simulated seconds.
        #[arg(long, value_name = "T")]
        horizon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seconds discarded before measuring; defaults to 10% of the horizon.
        #[arg(long)]
        warmup: Option<f64>,
        /// Cut to simulate; defaults to the best plan of the grid search.
        #[arg(long, value_name = "K", requires_all = ["theta1", "theta2"])]
        cut: Option<usize>,
        /// Fusion strategy of the first sub-model; required with --cut.
        #[arg(long, value_name = "STRATEGY", requires = "cut")]
        theta1: Option<FusionStrategy>,
        /// Fusion strategy of the second sub-model; required with --cut.
        #[arg(long, value_name = "STRATEGY", requires = "cut")]
        theta2: Option<FusionStrategy>,
        /// Also compare saturated throughput against 1/max(t1, t2, t3).
        #[arg(long)]
        validate: bool,
        /// Write per-request timelines to this CSV.
        #[arg(long, value_name = "PATH")]
        requests_csv: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Merge a plan CSV and an optional simulation JSON into one report (JSON).
    Report {
        /// CSV written by `plan`.
        #[arg(long, value_name = "PATH")]
        plan: PathBuf,
        /// JSON written by `simulate`.
        #[arg(long, value_name = "PATH")]
        sim: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Planning configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct DeviceArgs {
    /// Device running the first sub-model; defaults to the first device in the config.
    #[arg(long, value_name = "NAME")]
    device1: Option<String>,
    /// Device running the second sub-model; defaults to the second device in the config.
    #[arg(long, value_name = "NAME")]
    device2: Option<String>,
}

#[derive(Debug, Args)]
struct OutArg {
    /// Write the output here instead of standard output.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("UnknownDevice: {0}")]
    UnknownDevice(String),
    #[error("InvalidThreads: CODESIGN_THREADS={0}")]
    InvalidThreads(String),
    #[error("Io: {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("Parse: {0}: {1}")]
    Json(PathBuf, serde_json::Error),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| execute(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("CODESIGN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| CliError::InvalidThreads(raw.clone()))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn emit(out: &OutArg, text: &str) -> Result<(), Failure> {
    match &out.out {
        Some(path) => write_file(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e).into())
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s
}

fn pick_devices(config: &ConfigF64, args: &DeviceArgs) -> Result<(usize, usize), CliError> {
    let find = |name: &Option<String>, default: usize| -> Result<usize, CliError> {
        match name {
            Some(n) => config
                .devices
                .iter()
                .position(|d| &d.name == n)
                .ok_or_else(|| CliError::UnknownDevice(n.clone())),
            None => Ok(default.min(config.devices.len() - 1)),
        }
    };
    Ok((find(&args.device1, 0)?, find(&args.device2, 1)?))
}

fn problem<'a>(config: &'a ConfigF64, devices: (usize, usize)) -> Problem<'a, f64> {
    Problem {
        model: &config.model,
        device1: &config.devices[devices.0],
        device2: &config.devices[devices.1],
        link: &config.link,
        penalties: &config.penalties,
        lambda1: config.lambda1,
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Roofline { config, out } => {
            let config: ConfigF64 = load_config(&config.config)?;
            let models: Vec<_> = std::iter::once(&config.model).chain(&config.models).collect();
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in roofline_matrix(&models, &config.devices) {
                w.serialize(row)?;
            }
            emit(&out, &String::from_utf8(w.into_inner()?)?)
        }
        Command::Cost {
            config,
            devices,
            cut,
            theta1,
            theta2,
            out,
        } => {
            let config: ConfigF64 = load_config(&config.config)?;
            let ids = pick_devices(&config, &devices)?;
            let plan = evaluate(&problem(&config, ids), cut, theta1, theta2)?;
            emit(&out, &pretty(&serde_json::to_value(plan.cost)?))
        }
        Command::Plan {
            config,
            devices,
            strict,
            refine,
            alpha,
            iters,
            plan_json,
            out,
        } => {
            let config: ConfigF64 = load_config(&config.config)?;
            let ids = pick_devices(&config, &devices)?;
            let p = problem(&config, ids);
            let mut ranked = ranked_candidates(&p)?;
            if strict {
                ranked.retain(|c| c.feasible.0 && c.feasible.1);
                if ranked.is_empty() {
                    return Err(OptimizeError::NoFeasiblePlan.into());
                }
            }
            let (refined_lambda, refined_cut) = if refine {
                let r = refine_lambda(&p, &ranked[0], alpha, iters);
                let snapped = snap_and_compare(&p, ranked[0].theta1, ranked[0].theta2, r.lambda)?;
                (Some(r.lambda), Some(snapped.cut_index))
            } else {
                (None, None)
            };
            if let Some(path) = plan_json {
                write_file(&path, &pretty(&serde_json::to_value(&ranked[0])?))?;
            }
            let table = PlanTable {
                schema_version: SCHEMA_VERSION,
                model: config.model.name.clone(),
                device1: p.device1.name.clone(),
                device2: p.device2.name.clone(),
                lambda1: config.lambda1,
                refined_lambda,
                refined_cut,
                rows: ranked.iter().map(PlanRow::from_plan).collect(),
            };
            emit(&out, &table.to_csv())
        }
        Command::FuseCheck { seed, trials, out } => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["strategy", "trials", "max_rel_err"])?;
            for c in fusion_check(seed, trials) {
                w.write_record([c.strategy.name().to_string(), c.trials.to_string(), format!("{:e}", c.max_rel_err)])?;
            }
            emit(&out, &String::from_utf8(w.into_inner()?)?)
        }
        Command::ConvergenceLab {
            seed,
            dim,
            steps,
            eta,
            mu,
            lip,
            out,
        } => {
            let (obj, w0) = random_instance::<f64>(seed, dim, mu, lip)?;
            let eta = eta.unwrap_or_else(|| lab_step_size(&obj));
            let r = rate_check(&obj, &w0, eta, steps)?;
            let mut text = format!(
                "# eta: {eta:e}\n# mu: {:e}\n# L: {:e}\n# violated_at: {}\n",
                obj.mu_sc,
                obj.l_lip,
                r.violated_at.map_or("none".to_string(), |k| k.to_string())
            );
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["k", "gap", "bound", "ratio", "ok"])?;
            for k in 0..r.gaps.len() {
                let ratio = if k == 0 { String::new() } else { format!("{:e}", r.ratios[k - 1]) };
                let ok = r.gaps[k] <= r.bounds[k];
                w.write_record([
                    k.to_string(),
                    format!("{:e}", r.gaps[k]),
                    format!("{:e}", r.bounds[k]),
                    ratio,
                    ok.to_string(),
                ])?;
            }
            text.push_str(&String::from_utf8(w.into_inner()?)?);
            emit(&out, &text)
        }
        Command::Simulate {
            config,
            devices,
            rate,
            horizon,
            seed,
            warmup,
            cut,
            theta1,
            theta2,
            validate,
            requests_csv,
            out,
        } => {
            let config: ConfigF64 = load_config(&config.config)?;
            let ids = pick_devices(&config, &devices)?;
            let p = problem(&config, ids);
            let plan = match (cut, theta1, theta2) {
                (Some(k), Some(a), Some(b)) => evaluate(&p, k, a, b)?,
                _ => ranked_candidates(&p)?.swap_remove(0),
            };
            let row = PlanRow::from_plan(&plan);
            let times = StageTimes::from_cost(&plan.cost);
            let mut sim = SimConfig::new(rate, times, horizon, seed);
            if let Some(w) = warmup {
                sim.warmup = w;
            }
            let report = run(&sim)?;
            let validation = if validate {
                Some(validate_against_model(
                    times,
                    ValidationOptions {
                        seed,
                        ..ValidationOptions::default()
                    },
                )?)
            } else {
                None
            };
            if let Some(path) = requests_csv {
                let mut w = csv::Writer::from_writer(Vec::new());
                for r in &report.requests {
                    w.serialize(r)?;
                }
                if report.requests.is_empty() {
                    w.write_record(["id", "arrival", "start1", "end1", "end_link", "end2"])?;
                }
                write_file(&path, &String::from_utf8(w.into_inner()?)?)?;
            }
            let doc = sim_document(&config.model.name, Some(&row), &sim, &report, validation.as_ref());
            emit(&out, &pretty(&doc))
        }
        Command::Report { plan, sim, out } => {
            let text = fs::read_to_string(&plan).map_err(|e| CliError::Io(plan.clone(), e))?;
            let table = PlanTable::from_csv(&text)?;
            let sim = match sim {
                Some(path) => {
                    let raw = fs::read_to_string(&path).map_err(|e| CliError::Io(path.clone(), e))?;
                    if raw.trim().is_empty() {
                        None
                    } else {
                        Some(serde_json::from_str::<Value>(&raw).map_err(|e| CliError::Json(path.clone(), e))?)
                    }
                }
                None => None,
            };
            let doc = combine(&table, sim.as_ref())?;
            emit(&out, &pretty(&json!(doc)))
        }
    }
}
