//! Command-line front end: `run`, `flow`, `langevin`, `ksd` and `verify`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{parse_config, ExperimentConfig};
use crate::continuum::{integrate_vlasov, run_langevin, FlowOutcome, LangevinConfig};
use crate::discrepancy::{ksd_ustat, ksd_vstat};
use crate::error::{Error, Result};
use crate::output::{read_points, trajectory_svg, write_meta, write_points, write_report_json, write_trajectory};
use crate::svgd::{run, TrajectoryRecord};
use crate::verify::report_all;

#[derive(Debug, Parser)]
#[command(name = "steinflow", version, about = "Stein variational gradient descent sampler and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run discrete SVGD iterations.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Integrate the continuous-time particle flow.
    Flow {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "t-end")]
        t_end: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run independent unadjusted Langevin chains, one per particle.
    Langevin {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "t-end")]
        t_end: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Kernelized Stein discrepancy of a points CSV against the configured target.
    Ksd {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long, value_enum, default_value = "v")]
        estimator: EstimatorArg,
    },
    /// Run the numerical property checks and write a JSON report.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to the named checks (repeatable).
        #[arg(long)]
        only: Vec<String>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EstimatorArg {
    V,
    U,
}

fn load(path: &Path) -> Result<(ExperimentConfig, String)> {
    let text = fs::read_to_string(path)?;
    let cfg = parse_config(&text)?;
    let canonical = cfg.to_config_text();
    Ok((cfg, canonical))
}

fn write_outputs(out: &Path, command: &str, cfg: &ExperimentConfig, record: &TrajectoryRecord) -> Result<()> {
    fs::create_dir_all(out)?;
    write_trajectory(record, &out.join("trajectory.csv"))?;
    for row in &record.rows {
        if let Some(snap) = &row.snapshot {
            write_points(snap, &out.join(format!("particles_{}.csv", row.iteration)))?;
        }
    }
    write_meta(out, command, cfg.seed, &cfg.to_config_text())?;
    if cfg.svg {
        fs::write(out.join("trajectory.svg"), trajectory_svg(record))?;
    }
    Ok(())
}

fn write_final(out: &Path, outcome: &FlowOutcome) -> Result<()> {
    write_points(outcome.final_ensemble.positions(), &out.join("particles_final.csv"))
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Run { config, out } => {
            let (cfg, _) = load(&config)?;
            let outcome = run(cfg.target(), &cfg.kernel, cfg.initial_ensemble()?, &cfg.run)?;
            write_outputs(&out, "run", &cfg, &outcome.record)?;
            write_points(outcome.final_ensemble.positions(), &out.join("particles_final.csv"))?;
            Ok(0)
        }
        Command::Flow { config, t_end, dt, out } => {
            let (mut cfg, _) = load(&config)?;
            if let Some(t) = t_end {
                cfg.flow.t_end = t;
            }
            if let Some(d) = dt {
                cfg.flow.dt = d;
            }
            let outcome = integrate_vlasov(
                cfg.target(),
                &cfg.kernel,
                cfg.initial_ensemble()?,
                &cfg.flow,
                cfg.run.track_density,
            )?;
            write_outputs(&out, "flow", &cfg, &outcome.record)?;
            write_final(&out, &outcome)?;
            Ok(0)
        }
        Command::Langevin { config, t_end, dt, out } => {
            let (mut cfg, _) = load(&config)?;
            if let Some(d) = dt {
                cfg.langevin.step = d;
            }
            if let Some(t) = t_end {
                cfg.langevin.n_steps = (t / cfg.langevin.step).round() as usize;
            }
            let lc: LangevinConfig = cfg.langevin;
            let init = cfg.initial_ensemble()?;
            let outcome = run_langevin(cfg.target(), &cfg.kernel, init.positions(), &lc, cfg.seed)?;
            write_outputs(&out, "langevin", &cfg, &outcome.record)?;
            write_final(&out, &outcome)?;
            Ok(0)
        }
        Command::Ksd {
            config,
            points,
            estimator,
        } => {
            let (cfg, _) = load(&config)?;
            let pts = read_points(&points)?;
            let spec = cfg.kernel.resolve(&pts)?;
            let report = match estimator {
                EstimatorArg::V => ksd_vstat(cfg.target(), &spec, &pts)?,
                EstimatorArg::U => ksd_ustat(cfg.target(), &spec, &pts)?,
            };
            println!("{}", serde_json::to_string(&report)?);
            Ok(0)
        }
        Command::Verify { config, out, only } => {
            let vcfg = match config {
                Some(path) => load(&path)?.0.verify,
                None => Default::default(),
            };
            let selection = (!only.is_empty()).then_some(only);
            let results = report_all(&vcfg, selection.as_deref());
            write_report_json(&results, &out)?;
            for r in &results {
                println!(
                    "{} {}: observed {:.6e} (target {:.6e}, tolerance {:.3e}) {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.observed,
                    r.bound_or_target,
                    r.tolerance,
                    r.details
                );
            }
            Ok(if results.iter().all(|r| r.passed) { 0 } else { 1 })
        }
    }
}

/// Worker count from `STEINFLOW_THREADS`; 0 or unset lets rayon decide.
fn thread_count() -> std::result::Result<usize, String> {
    match std::env::var("STEINFLOW_THREADS") {
        Err(_) => Ok(0),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| format!("STEINFLOW_THREADS must be a non-negative integer, got {v:?}")),
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns the process exit code: 0 on success, 1 on runtime failure or a
/// failed check, 2 on usage errors.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = match thread_count() {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            report_error(&e);
            if matches!(e, Error::Config { .. } | Error::ConfigErrors(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn report_error(e: &Error) {
    match e {
        Error::ConfigErrors(list) => {
            for item in list {
                eprintln!("error: {item}");
            }
        }
        other => eprintln!("error: {other}"),
    }
}
