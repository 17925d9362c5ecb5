//! Batch front end: load a problem, check it, scale, solve, unscale, verify
//! and write the results as CSV, text and JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use psopt::catalog::{catalog_file, catalog_source, PUBLIC_ENTRIES};
use psopt::ocp_model::{doctor_check, has_errors, OcpDefinition, Severity, SolutionBundle, SolveStatus};
use psopt::problem_file::{load_definition, SolverOverrides};
use psopt::scale::{auto_scale, imbalance_report, unscale_solution};
use psopt::solver::{solve, SolverConfig, SolverError};
use psopt::vnv::{verify, VnvReport};

pub const EXIT_CONVERGED: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FEASIBLE_ONLY: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

pub fn exit_code(status: SolveStatus) -> i32 {
    match status {
        SolveStatus::Converged => EXIT_CONVERGED,
        SolveStatus::FeasibleOnly => EXIT_FEASIBLE_ONLY,
        SolveStatus::Infeasible => EXIT_INFEASIBLE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "psopt", version, about = "Guess-free pseudospectral optimal control")]
pub struct Cli {
    /// Log level (error, warn, info, debug, trace). PSOPT_LOG is used when absent.
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check, scale, solve and verify a problem, writing results to a directory.
    Run(RunArgs),
    /// Check a problem definition without solving it.
    Doctor(Source),
    /// List the built-in problems, or print one of them as a problem file.
    Catalog {
        /// Entry to print.
        name: Option<String>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Source {
    /// Problem file (TOML).
    #[arg(required_unless_present = "catalog", conflicts_with = "catalog")]
    pub problem: Option<PathBuf>,
    /// Built-in problem instead of a file.
    #[arg(long)]
    pub catalog: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: Source,
    /// Initial mesh degree.
    #[arg(long)]
    pub n0: Option<usize>,
    /// Largest mesh degree.
    #[arg(long)]
    pub nmax: Option<usize>,
    /// Final tolerance (raised to 1e-8 if smaller).
    #[arg(long)]
    pub tol: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "psopt-out")]
    pub out: PathBuf,
    /// Skip propagation and the optimality checks.
    #[arg(long)]
    pub no_vnv: bool,
    /// Seed for the jittered start candidates.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn load(source: &Source) -> Result<(String, OcpDefinition, SolverOverrides)> {
    if let Some(name) = &source.catalog {
        let file = catalog_file(name)?;
        let def = file.to_definition()?;
        return Ok((name.clone(), def, file.solver));
    }
    let path = source.problem.as_ref().expect("clap enforces a source");
    let text = fs::read_to_string(path).with_context(|| format!("cannot read problem file {}", path.display()))?;
    let (def, overrides) = load_definition(&text).with_context(|| format!("in {}", path.display()))?;
    Ok((path.display().to_string(), def, overrides))
}

pub fn build_config(overrides: &SolverOverrides, args: &RunArgs) -> Result<SolverConfig> {
    let mut c = SolverConfig::default();
    c.apply_overrides(overrides);
    if let Some(v) = args.n0 {
        c.n0 = v;
    }
    if let Some(v) = args.nmax {
        c.n_max = v;
    }
    if let Some(v) = args.tol {
        c.delta_final = v;
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    Ok(c.validated()?)
}

/// Writes `v` with 17 significant digits.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn solution_csv(b: &SolutionBundle) -> String {
    let (nx, nu, nh) = (b.states.nrows(), b.controls.nrows(), b.path_covectors.nrows());
    let mut cols = vec!["t".to_string()];
    cols.extend((0..nx).map(|k| format!("x_{k}")));
    cols.extend((0..nu).map(|j| format!("u_{j}")));
    cols.extend((0..nx).map(|k| format!("lambda_{k}")));
    cols.push("H".into());
    cols.extend((0..nh).map(|l| format!("mu_{l}")));
    let mut s = cols.join(",");
    s.push('\n');
    for i in 0..b.tau.len() {
        let mut row = vec![num(b.time[i])];
        row.extend((0..nx).map(|k| num(b.states[(k, i)])));
        row.extend((0..nu).map(|j| num(b.controls[(j, i)])));
        row.extend((0..nx).map(|k| num(b.costates[(k, i)])));
        row.push(num(b.hamiltonian[i]));
        row.extend((0..nh).map(|l| num(b.path_covectors[(l, i)])));
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn events_csv(b: &SolutionBundle) -> String {
    let mut s = String::from("event,nu\n");
    for (r, v) in b.event_covectors.iter().enumerate() {
        writeln!(s, "{r},{}", num(*v)).unwrap();
    }
    s
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub problem: String,
    pub status: String,
    pub exit_code: i32,
    pub cost: f64,
    pub t0: f64,
    pub tf: f64,
    pub degree: usize,
    pub config: serde_json::Value,
    pub scaling: serde_json::Value,
    pub diagnostics: serde_json::Value,
    pub stages: Vec<StageLine>,
    pub imbalance: Vec<String>,
    pub vnv: Option<VnvSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageLine {
    pub stage: String,
    pub n: usize,
    pub delta: f64,
    pub sigma: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VnvSummary {
    pub bundle_fingerprint: String,
    pub passed: bool,
    pub terminal_truth_errors: Vec<f64>,
    pub optimization_errors: Vec<f64>,
    pub hamiltonian_mean: f64,
    pub hamiltonian_dev: f64,
    pub switching_verdicts: Vec<bool>,
    pub complementarity_verdict: bool,
    pub effective_tolerance: f64,
}

const STATUSES: [&str; 3] = ["Converged", "FeasibleOnly", "Infeasible"];

/// Parses `run.json` and checks what the types alone cannot.
pub fn validate_run_json(text: &str) -> Result<RunReport> {
    let r: RunReport = serde_json::from_str(text).context("run.json does not match its schema")?;
    if !STATUSES.contains(&r.status.as_str()) {
        bail!("unknown status {}", r.status);
    }
    let expected = match r.status.as_str() {
        "Converged" => EXIT_CONVERGED,
        "FeasibleOnly" => EXIT_FEASIBLE_ONLY,
        _ => EXIT_INFEASIBLE,
    };
    if r.exit_code != expected {
        bail!("exit code {} does not match status {}", r.exit_code, r.status);
    }
    if !(r.tf > r.t0) || r.degree < 2 {
        bail!("degenerate horizon or grid");
    }
    for key in ["n0", "n_max", "delta_final", "sigma_schedule", "seed"] {
        if r.config.get(key).is_none() {
            bail!("config is missing {key}");
        }
    }
    if let Some(v) = &r.vnv {
        if v.bundle_fingerprint.len() != 16 || !v.bundle_fingerprint.chars().all(|c| c.is_ascii_hexdigit()) {
            bail!("bad bundle fingerprint {}", v.bundle_fingerprint);
        }
    }
    Ok(r)
}

fn status_name(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Converged => STATUSES[0],
        SolveStatus::FeasibleOnly => STATUSES[1],
        SolveStatus::Infeasible => STATUSES[2],
    }
}

#[allow(clippy::too_many_arguments)]
pub fn run_report(
    problem: &str,
    b: &SolutionBundle,
    config: &SolverConfig,
    scaling: &impl Serialize,
    imbalance: Vec<String>,
    vnv: Option<&VnvReport>,
) -> Result<RunReport> {
    Ok(RunReport {
        problem: problem.to_string(),
        status: status_name(b.status).to_string(),
        exit_code: exit_code(b.status),
        cost: b.cost,
        t0: b.t0(),
        tf: b.tf(),
        degree: b.degree(),
        config: serde_json::to_value(config)?,
        scaling: serde_json::to_value(scaling)?,
        diagnostics: serde_json::json!({
            "residual_norm": b.diagnostics.residual_norm,
            "primal_infeasibility": b.diagnostics.primal_infeasibility,
            "tolerance": b.diagnostics.tolerance,
            "start": b.diagnostics.start,
            "messages": b.diagnostics.messages,
            "newton_steps": b.diagnostics.log.len(),
        }),
        stages: b
            .diagnostics
            .stages
            .iter()
            .map(|s| StageLine {
                stage: s.stage.clone(),
                n: s.n,
                delta: s.delta,
                sigma: s.sigma,
                residual: s.residual,
                iterations: s.iterations,
                converged: s.converged,
            })
            .collect(),
        imbalance,
        vnv: vnv.map(|r| VnvSummary {
            bundle_fingerprint: format!("{:016x}", r.bundle_fingerprint),
            passed: r.passed(),
            terminal_truth_errors: r.terminal_truth_errors.clone(),
            optimization_errors: r.optimization_errors.clone(),
            hamiltonian_mean: r.hamiltonian_mean,
            hamiltonian_dev: r.hamiltonian_dev,
            switching_verdicts: r.switching_verdicts.clone(),
            complementarity_verdict: r.complementarity_verdict,
            effective_tolerance: r.error_floor_note.effective,
        }),
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// Runs the whole pipeline and returns the exit code.
pub fn run(args: &RunArgs) -> Result<i32> {
    let (name, def, overrides) = load(&args.source)?;
    let config = build_config(&overrides, args)?;

    let diags = doctor_check(&def);
    for d in &diags {
        match d.severity {
            Severity::Warning => log::warn!("{d}"),
            Severity::Error => log::error!("{d}"),
        }
    }
    if has_errors(&diags) {
        bail!("problem definition has errors; see the diagnostics above");
    }

    let (scaled, map) = auto_scale(&def);
    log::info!("solving {name} with meshes {:?}", config.mesh_sizes());
    let scaled_bundle = match solve(&scaled, &config) {
        Ok(b) => b,
        Err(e @ (SolverError::Config(_) | SolverError::Doctor(_))) => return Err(e.into()),
        Err(e) => {
            eprintln!("error: solver failed: {e}");
            return Ok(EXIT_INFEASIBLE);
        }
    };
    let imbalance: Vec<String> = imbalance_report(&scaled_bundle).iter().map(|w| w.to_string()).collect();
    for w in &imbalance {
        log::warn!("{w}");
    }
    let bundle = unscale_solution(&scaled_bundle, &map);

    let report = if args.no_vnv {
        None
    } else {
        match verify(&def, &bundle, config.delta_final) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("verification could not run: {e}");
                None
            }
        }
    };

    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    write(&args.out, "solution.csv", &solution_csv(&bundle))?;
    write(&args.out, "events.csv", &events_csv(&bundle))?;
    if let Some(r) = &report {
        write(&args.out, "vnv.txt", &r.to_string())?;
        write(&args.out, "vnv_traces.csv", &r.traces_csv(&bundle))?;
    }
    let rr = run_report(&name, &bundle, &config, &map, imbalance, report.as_ref())?;
    write(&args.out, "run.json", &(serde_json::to_string_pretty(&rr)? + "\n"))?;

    println!("problem   {name}");
    println!("status    {}", rr.status);
    println!("cost      {}", num(bundle.cost));
    println!("horizon   [{}, {}] on {} nodes", bundle.t0(), bundle.tf(), bundle.tau.len());
    println!("start     {}", bundle.diagnostics.start);
    if let Some(r) = &report {
        println!("mean H    {:.6}", r.hamiltonian_mean);
        println!("checks    {}", if r.passed() { "pass" } else { "FAIL (see vnv.txt)" });
    }
    println!("output    {}", args.out.display());
    Ok(exit_code(bundle.status))
}

pub fn doctor(source: &Source) -> Result<i32> {
    let (name, def, _) = load(source)?;
    let diags = doctor_check(&def);
    if diags.is_empty() {
        println!("{name}: no findings");
    }
    for d in &diags {
        println!("{d}");
    }
    Ok(if has_errors(&diags) { EXIT_USAGE } else { EXIT_CONVERGED })
}

pub fn catalog(name: Option<&str>) -> Result<i32> {
    match name {
        Some(n) => print!("{}", catalog_source(n)?),
        None => PUBLIC_ENTRIES.iter().for_each(|e| println!("{e}")),
    }
    Ok(EXIT_CONVERGED)
}

fn init_logging(level: Option<&str>) {
    let filter = level.map(str::to_string).or_else(|| std::env::var("PSOPT_LOG").ok()).unwrap_or_else(|| "warn".into());
    let _ = env_logger::Builder::new().parse_filters(&filter).format_timestamp(None).try_init();
}

/// Entry point shared by the binary and the tests.
pub fn main_with(cli: Cli) -> i32 {
    init_logging(cli.log_level.as_deref());
    let result = match &cli.command {
        Command::Run(a) => run(a),
        Command::Doctor(s) => doctor(s),
        Command::Catalog { name } => catalog(name.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}
