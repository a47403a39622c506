//! `pmsg`: run scenarios, query static optima and run the acceptance checks.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 simulation
//! diverged, 3 verification failed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use pmsg_control::config::{builtin_config, load_config, parse_quantity, ConfigDocument};
use pmsg_control::machine::{rpm_to_electrical, MachineParams};
use pmsg_control::sim::{compute_metrics, run_closed_loop, Metrics};
use pmsg_control::steady_state::{brute_force_oracle, solve_static, StaticProblem};
use pmsg_control::verify;
use pmsg_control::Error;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Diverged(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::SimulationDiverged { .. } | Error::NonPositiveVoltage { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "pmsg", version, about = "IPM generator on a dc bus: two-time-scale control simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenario files; each writes its trace CSV and metrics JSON.
    Run {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Output directory (one subdirectory per scenario when several are given).
        #[arg(short, long)]
        out: PathBuf,
        /// Scenarios to run concurrently.
        #[arg(short, long, default_value_t = 1)]
        jobs: usize,
    },
    /// Built-in load step 43.5 → 62.25 kW at 40 ms, 7000 rpm.
    Case1 {
        #[arg(short, long, default_value = "out/case1")]
        out: PathBuf,
    },
    /// Built-in load pulse 34 → 81 → 34 kW at 40/80 ms, 8000 rpm.
    Case2 {
        #[arg(short, long, default_value = "out/case2")]
        out: PathBuf,
    },
    /// Minimum-current (i_d, i_q) delivering an electrical power (negative while generating).
    ///
    /// CSV columns: i_d,i_q,norm,feasible,circle_active,ellipse_active
    /// and, with --verify, oracle_i_d,oracle_i_q,agrees.
    OptimalCurrents {
        /// Electrical power, e.g. -43.5kW.
        #[arg(allow_hyphen_values = true)]
        power: String,
        /// Shaft speed, e.g. 7000rpm.
        speed: String,
        /// Bus voltage, e.g. 540V.
        v_dc: String,
        /// Machine preset.
        #[arg(default_value = "bmw-i3")]
        preset: String,
        /// Cross-check against the grid oracle.
        #[arg(long)]
        verify: bool,
        /// Oracle grid step in A.
        #[arg(long, default_value_t = 0.25)]
        grid: f64,
        #[arg(long, value_enum, default_value_t = ValueFormat::Csv)]
        format: ValueFormat,
    },
    /// Run the acceptance checks.
    Verify {
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ValueFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { configs, out, jobs } => run_configs(&configs, &out, jobs),
        Command::Case1 { out } => run_builtin("case1", &out),
        Command::Case2 { out } => run_builtin("case2", &out),
        Command::OptimalCurrents { power, speed, v_dc, preset, verify, grid, format } => {
            optimal_currents(&power, &speed, &v_dc, &preset, verify, grid, format)
        }
        Command::Verify { format } => run_verify(format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Runs one scenario and writes its outputs under `out`.
fn execute(doc: &ConfigDocument, out: &Path) -> Result<Metrics, CliError> {
    let sc = &doc.scenario;
    let trace = run_closed_loop(sc).map_err(|e| CliError::from(e).prefixed(&sc.name))?;
    let metrics = compute_metrics(&trace, sc).map_err(|e| CliError::from(e).prefixed(&sc.name))?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let trace_path = out.join(&doc.output.trace);
    let mut w = BufWriter::new(File::create(&trace_path).map_err(|e| io_err(&trace_path, e))?);
    trace.write_csv(&mut w, doc.output.decimation).and_then(|()| w.flush()).map_err(|e| io_err(&trace_path, e))?;
    let metrics_path = out.join(&doc.output.metrics);
    let mut w = BufWriter::new(File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?);
    serde_json::to_writer_pretty(&mut w, &metrics)
        .map_err(|e| io_err(&metrics_path, e))
        .and_then(|()| writeln!(w).and_then(|()| w.flush()).map_err(|e| io_err(&metrics_path, e)))?;
    Ok(metrics)
}

impl CliError {
    fn prefixed(self, name: &str) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{name}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{name}: {m}")),
            CliError::Diverged(m) => CliError::Diverged(format!("{name}: {m}")),
            CliError::Verification(m) => CliError::Verification(format!("{name}: {m}")),
        }
    }
}

fn summary(m: &Metrics, out: &Path) -> String {
    let segs: Vec<String> = m
        .segments
        .iter()
        .map(|s| format!("{:.2} kW → ({:.1}, {:.1}) A", s.p_load / 1e3, s.i_d, s.i_q))
        .collect();
    format!(
        "{}: v_dc ∈ [{:.2}, {:.2}] V; {}; written to {}",
        m.scenario,
        m.v_dc_min,
        m.v_dc_max,
        segs.join(", "),
        out.display()
    )
}

fn run_builtin(name: &str, out: &Path) -> Result<(), CliError> {
    let doc = builtin_config(name).map_err(|e| CliError::Config(e.to_string()))?;
    let m = execute(&doc, out)?;
    println!("{}", summary(&m, out));
    Ok(())
}

fn run_configs(paths: &[PathBuf], out: &Path, jobs: usize) -> Result<(), CliError> {
    // parse everything first so a typo fails fast
    let docs = paths
        .iter()
        .map(|p| load_config(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let dirs: Vec<PathBuf> = if docs.len() == 1 {
        vec![out.to_path_buf()]
    } else {
        let mut dirs = Vec::new();
        for (p, d) in paths.iter().zip(&docs) {
            let stem = p.file_stem().map_or_else(|| d.scenario.name.clone(), |s| s.to_string_lossy().into_owned());
            let mut dir = out.join(&stem);
            let mut k = 2;
            while dirs.contains(&dir) {
                dir = out.join(format!("{stem}-{k}"));
                k += 1;
            }
            dirs.push(dir);
        }
        dirs
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Metrics, CliError>>>> = Mutex::new((0..docs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, docs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= docs.len() {
                    break;
                }
                let r = execute(&docs[i], &dirs[i]);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let mut worst: Option<CliError> = None;
    for (r, dir) in results.into_inner().expect("results lock").into_iter().zip(&dirs) {
        match r.expect("every job ran") {
            Ok(m) => println!("{}", summary(&m, dir)),
            Err(e) => {
                eprintln!("error: {e}");
                if worst.as_ref().is_none_or(|w| e.code() > w.code()) {
                    worst = Some(e);
                }
            }
        }
    }
    match worst {
        None => Ok(()),
        Some(e) if docs.len() == 1 => Err(e),
        Some(e) => Err(match e {
            CliError::Diverged(_) => CliError::Diverged("at least one scenario diverged".into()),
            _ => CliError::Io("at least one scenario failed".into()),
        }),
    }
}

fn optimal_currents(
    power: &str,
    speed: &str,
    v_dc: &str,
    preset: &str,
    check: bool,
    grid: f64,
    format: ValueFormat,
) -> Result<(), CliError> {
    let arg = |name: &str, text: &str, units: &[&str]| {
        parse_quantity(text, units).map_err(|m| CliError::Config(format!("{name}: {m}")))
    };
    let p_e = arg("power", power, &["W"])?;
    let rpm = arg("speed", speed, &["rpm"])?;
    let v = arg("v_dc", v_dc, &["V"])?;
    let mp = MachineParams::preset(preset).ok_or_else(|| CliError::Config(format!("unknown preset {preset:?}")))?;
    let prob = StaticProblem { p_e, omega_r: rpm_to_electrical(rpm, mp.poles).1, v_dc: v, mp };
    let s = solve_static(&prob)?;
    if !s.feasible {
        eprintln!("warning: infeasible; showing the boundary point with the largest reachable power");
    }
    let oracle = if check { Some(brute_force_oracle(&prob, grid)?) } else { None };
    let agrees = oracle.map(|o| o.feasible == s.feasible && (o.i_d - s.i_d).abs() <= 1.0 && (o.i_q - s.i_q).abs() <= 1.0);
    match format {
        ValueFormat::Json => {
            let mut v = json!({
                "i_d": s.i_d, "i_q": s.i_q, "norm": s.norm_sq.sqrt(), "feasible": s.feasible,
                "circle_active": s.active.current_circle, "ellipse_active": s.active.voltage_ellipse,
            });
            if let (Some(o), Some(a)) = (oracle, agrees) {
                v["oracle"] = json!({ "i_d": o.i_d, "i_q": o.i_q, "feasible": o.feasible, "grid": grid });
                v["agrees"] = json!(a);
            }
            println!("{v}");
        }
        ValueFormat::Csv => {
            let mut line = format!(
                "{:.4},{:.4},{:.4},{},{},{}",
                s.i_d,
                s.i_q,
                s.norm_sq.sqrt(),
                s.feasible,
                s.active.current_circle,
                s.active.voltage_ellipse
            );
            if let (Some(o), Some(a)) = (oracle, agrees) {
                line += &format!(",{:.4},{:.4},{a}", o.i_d, o.i_q);
            }
            println!("{line}");
        }
    }
    match agrees {
        Some(false) => Err(CliError::Verification("solver and oracle disagree by more than 1 A".into())),
        _ => Ok(()),
    }
}

fn run_verify(format: ReportFormat) -> Result<(), CliError> {
    let report = verify::run_all();
    if format == ReportFormat::Json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?);
    } else {
        for c in &report.checks {
            println!("[{}] {:>2} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.id, c.name, c.detail);
        }
        println!("{} of {} checks passed in {:.1} s", report.checks.iter().filter(|c| c.passed).count(), report.checks.len(), report.elapsed);
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::Verification("acceptance checks failed".into()))
    }
}
