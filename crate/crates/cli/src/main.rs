mod config;
mod output;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{Config, Loaded, Model};
use output::{num, sibling, write_atomic, write_json, Csv, GridInfo, Manifest, Versions};
use qsmp::acceptance;
use qsmp::classical::{pauli_evolve, simulate_trajectories, solve_gme};
use qsmp::quantum::{build_propagator, check_cp, ConditionReport};
use qsmp::twolevel::{cp_boundary_ratio, ratio_slice, scan_region};
use qsmp::TimeGrid64;

#[derive(Parser)]
#[command(name = "qsmp", version, about = "Semi-Markov and quantum memory-kernel dynamics")]
struct Cli {
    /// Worker threads for scans and trajectory blocks (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a model and write T_mn(t) or ρ(t) as CSV
    Evolve(RunArgs),
    /// Evaluate the complete-positivity conditions of a quantum model
    CheckCp(RunArgs),
    /// Monte Carlo trajectories of a classical model
    Simulate(SimulateArgs),
    /// Sign map of Δ(τ) for the two-level kernel
    Scan(ScanArgs),
    /// Run the acceptance suite
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides grid.h
    #[arg(long)]
    grid_h: Option<f64>,
    /// Overrides grid.horizon
    #[arg(long)]
    horizon: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Overrides run.seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides run.trajectories
    #[arg(long)]
    trajectories: Option<usize>,
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    #[arg(long, default_value_t = 200)]
    resolution: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also sample Δ over r₊/r₋ ∈ [1, 2+√3] and τ ∈ [0, --slice-tau-max] at this r₋
    #[arg(long)]
    slice_r_minus: Option<f64>,
    #[arg(long, default_value_t = 30.0)]
    slice_tau_max: f64,
}

#[derive(Args)]
struct ValidateArgs {
    /// JSON report path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only these criteria
    #[arg(long, value_delimiter = ',')]
    only: Vec<u8>,
    /// Multiplies every tolerance; for exercising failure paths
    #[arg(long, default_value_t = 1.0, hide = true)]
    tolerance_scale: f64,
}

/// Failure classes with their exit codes.
enum Failure {
    Config(anyhow::Error),
    Numeric(anyhow::Error),
    Acceptance(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Acceptance(_) => 4,
        }
    }
}

trait Classify<T> {
    fn config_err(self) -> Result<T, Failure>;
    fn numeric_err(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config_err(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn numeric_err(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Numeric(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Evolve(args) => evolve(&args),
        Command::CheckCp(args) => check_cp_cmd(&args),
        Command::Simulate(args) => simulate(&args),
        Command::Scan(args) => scan(&args),
        Command::Validate(args) => validate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("configuration error: {e:#}"),
                Failure::Numeric(e) => eprintln!("numerical failure: {e:#}"),
                Failure::Acceptance(msg) => eprintln!("acceptance failure: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn load(args: &RunArgs) -> Result<Loaded, Failure> {
    let mut loaded = config::load(&args.config).config_err()?;
    if let Some(h) = args.grid_h {
        loaded.config.grid.h = h;
    }
    if let Some(t) = args.horizon {
        loaded.config.grid.horizon = t;
    }
    loaded.config.validate().config_err()?;
    Ok(loaded)
}

fn manifest(command: &'static str, loaded: Option<&Loaded>, grid: Option<&TimeGrid64>, start: Instant) -> Manifest {
    Manifest {
        command,
        config_sha256: loaded.map(|l| l.hash.clone()),
        config: loaded.map(|l| l.config.echo()),
        versions: Versions::default(),
        grid: grid.map(GridInfo::from),
        seed: None,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        outputs: Vec::new(),
        diagnostics: BTreeMap::new(),
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn evolve(args: &RunArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let loaded = load(args)?;
    let cfg = &loaded.config;
    let grid = cfg.time_grid().config_err()?;
    let mut diagnostics = BTreeMap::new();
    let csv = if cfg.is_quantum() {
        let spec = cfg.quantum().config_err()?;
        let rho0 = cfg.initial_state(spec.dim()).config_err()?;
        let v = build_propagator(&spec, &grid).numeric_err()?;
        diagnostics.insert("trace_drift".to_string(), v.trace_drift());
        diagnostics.insert("hermiticity_drift".to_string(), v.hermiticity_drift());
        if !v.preserves_trace_and_hermiticity() {
            return Err(Failure::Numeric(anyhow!(
                "propagator drift too large: trace {:.3e}, hermiticity {:.3e}",
                v.trace_drift(),
                v.hermiticity_drift()
            )));
        }
        density_csv(cfg, &grid, spec.dim(), |i| v.apply(i, &rho0))
    } else {
        let initial = cfg.initial_index();
        let result = match cfg.model {
            Model::Markov { .. } => {
                let spec = cfg.markov().config_err()?;
                let mut p0 = vec![0.0; spec.states()];
                p0[initial] = 1.0;
                pauli_evolve(&spec, &p0, &grid).numeric_err()?
            }
            _ => solve_gme(&cfg.semi_markov().config_err()?, &grid).numeric_err()?,
        };
        diagnostics.insert("conservation_drift".to_string(), result.conservation_drift());
        if !result.conserves_probability() {
            return Err(Failure::Numeric(anyhow!(
                "probability not conserved: drift {:.3e}",
                result.conservation_drift()
            )));
        }
        let s = result.states();
        let mut header = vec!["t".to_string()];
        header.extend((0..s).flat_map(|m| (0..s).map(move |n| format!("T_{m}_{n}"))));
        header.extend((0..s).map(|n| format!("p_{n}")));
        let mut csv = Csv::new(&header);
        for i in 0..grid.len() {
            let mut row = vec![grid.t(i)];
            row.extend((0..s).flat_map(|m| (0..s).map(move |n| (m, n))).map(|(m, n)| result.transition(i, m, n)));
            row.extend((0..s).map(|m| result.transition(i, m, initial)));
            csv.row(row);
        }
        csv
    };
    write_atomic(&args.out, csv.into_string().as_bytes()).numeric_err()?;
    let mut m = manifest("evolve", Some(&loaded), Some(&grid), start);
    m.outputs.push(display(&args.out));
    m.diagnostics = diagnostics;
    write_json(&sibling(&args.out, "manifest"), &m).numeric_err()?;
    Ok(())
}

/// Independent entries of `ρ(t)`: real diagonals, then real and imaginary
/// parts of the upper triangle in row-major order. Two-level models label
/// their levels `p` (index 0) and `m`.
fn density_csv(cfg: &Config, grid: &TimeGrid64, d: usize, rho: impl Fn(usize) -> qsmp::CMatrix64) -> Csv {
    let label = |n: usize, m: usize| match cfg.model {
        Model::TwoLevel { .. } => {
            let l = |k: usize| if k == 0 { 'p' } else { 'm' };
            format!("rho_{}{}", l(n), l(m))
        }
        _ => format!("rho_{n}_{m}"),
    };
    let upper: Vec<(usize, usize)> = (0..d).flat_map(|n| (n + 1..d).map(move |m| (n, m))).collect();
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|n| label(n, n)));
    for &(n, m) in &upper {
        header.push(format!("{}_re", label(n, m)));
        header.push(format!("{}_im", label(n, m)));
    }
    let mut csv = Csv::new(&header);
    for i in 0..grid.len() {
        let r = rho(i);
        let mut row = vec![grid.t(i)];
        row.extend((0..d).map(|n| r[(n, n)].re));
        for &(n, m) in &upper {
            row.push(r[(n, m)].re);
            row.push(r[(n, m)].im);
        }
        csv.row(row);
    }
    csv
}

#[derive(Serialize)]
struct ConditionJson {
    verdict: &'static str,
    first_violation: Option<f64>,
    min_eigenvalue: f64,
    min_eigenvalues: Vec<f64>,
}

impl From<&ConditionReport<f64>> for ConditionJson {
    fn from(r: &ConditionReport<f64>) -> Self {
        Self {
            verdict: verdict(r.holds),
            first_violation: r.first_violation,
            min_eigenvalue: r.overall_min(),
            min_eigenvalues: r.min_eigenvalues.clone(),
        }
    }
}

fn verdict(holds: bool) -> &'static str {
    if holds {
        "holds"
    } else {
        "violated"
    }
}

#[derive(Serialize)]
struct Cond1Json {
    #[serde(flatten)]
    report: ConditionJson,
    /// All k_n ≥ 0, without which the verdict alone is not sufficient.
    memory_nonnegative: bool,
}

#[derive(Serialize)]
struct Cond2Json {
    verdict: &'static str,
    levels: Vec<ConditionJson>,
}

#[derive(Serialize)]
struct Cond3Json {
    verdict: &'static str,
    g_tilde: ConditionJson,
    transitions_nonnegative: bool,
    min_off_diagonal_transitions: Vec<f64>,
}

#[derive(Serialize)]
struct CpJson {
    semigroup: bool,
    sufficient_conditions_hold: bool,
    times: Vec<f64>,
    cond1: Cond1Json,
    cond2: Cond2Json,
    cond3: Option<Cond3Json>,
}

fn check_cp_cmd(args: &RunArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let loaded = load(args)?;
    let cfg = &loaded.config;
    let grid = cfg.time_grid().config_err()?;
    let spec = cfg.quantum().config_err()?;
    let report = check_cp(&spec, &grid).numeric_err()?;
    let json = CpJson {
        semigroup: report.semigroup,
        sufficient_conditions_hold: report.sufficient_conditions_hold(),
        times: grid.points().collect(),
        cond1: Cond1Json {
            report: (&report.cond1.report).into(),
            memory_nonnegative: report.cond1.hypothesis_holds,
        },
        cond2: Cond2Json {
            verdict: verdict(report.cond2.holds),
            levels: report.cond2.per_level.iter().map(ConditionJson::from).collect(),
        },
        cond3: report.cond3.as_ref().map(|c| Cond3Json {
            verdict: verdict(c.holds),
            g_tilde: (&c.report).into(),
            transitions_nonnegative: c.transitions_nonnegative,
            min_off_diagonal_transitions: c.min_off_diagonal.clone(),
        }),
    };
    write_json(&args.out, &json).numeric_err()?;
    let mut m = manifest("check-cp", Some(&loaded), Some(&grid), start);
    m.outputs.push(display(&args.out));
    write_json(&sibling(&args.out, "manifest"), &m).numeric_err()?;
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let mut loaded = load(&args.run)?;
    if let Some(seed) = args.seed {
        loaded.config.run.seed = seed;
    }
    if let Some(n) = args.trajectories {
        loaded.config.run.trajectories = n;
    }
    loaded.config.validate().config_err()?;
    let cfg = &loaded.config;
    let grid = cfg.time_grid().config_err()?;
    let spec = cfg.semi_markov().config_err()?;
    let initial = cfg.initial_index();
    let samples = cfg.run.samples;
    let times: Vec<f64> = (1..=samples)
        .map(|k| grid.t(grid.index_of(grid.horizon() * k as f64 / samples as f64)))
        .collect();
    let mc = simulate_trajectories(&spec, initial, &times, cfg.run.trajectories, cfg.run.seed).numeric_err()?;
    let gme = solve_gme(&spec, &grid).numeric_err()?;

    let s = spec.states();
    let mut header = vec!["t".to_string()];
    for n in 0..s {
        header.extend([format!("mean_{n}"), format!("stderr_{n}"), format!("gme_{n}")]);
    }
    let mut csv = Csv::new(&header);
    for (k, &t) in times.iter().enumerate() {
        let i = grid.index_of(t);
        let mut row = vec![t];
        for n in 0..s {
            row.extend([mc.mean[k][n], mc.std_err[k][n], gme.transition(i, n, initial)]);
        }
        csv.row(row);
    }
    write_atomic(&args.run.out, csv.into_string().as_bytes()).numeric_err()?;
    let mut m = manifest("simulate", Some(&loaded), Some(&grid), start);
    m.seed = Some(cfg.run.seed);
    m.outputs.push(display(&args.run.out));
    m.diagnostics.insert("trajectories".into(), mc.trajectories as f64);
    write_json(&sibling(&args.run.out, "manifest"), &m).numeric_err()?;
    Ok(())
}

#[derive(Serialize)]
struct ScanSummary {
    tau: f64,
    resolution: usize,
    expected_ratio: f64,
    boundary: Option<BoundaryJson>,
    slice: Option<SliceJson>,
}

#[derive(Serialize)]
struct BoundaryJson {
    ratio: f64,
    deviation: f64,
    columns_used: usize,
    cell: f64,
}

/// Reported only: whether Δ stays non-negative between the two boundaries.
#[derive(Serialize)]
struct SliceJson {
    r_minus: f64,
    tau_max: f64,
    min_delta: f64,
    nonnegative: bool,
}

fn scan(args: &ScanArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let grid = scan_region(args.tau, args.resolution).config_err()?;
    let mut csv = Csv::new(&["r_minus", "r_plus", "delta", "sign", "degenerate"]);
    for c in &grid.cells {
        csv.raw_row(&[
            num(c.r_minus),
            num(c.r_plus),
            num(c.delta),
            c.sign.to_string(),
            u8::from(c.degenerate).to_string(),
        ]);
    }
    let slice = match args.slice_r_minus {
        Some(r_minus) => {
            let s = ratio_slice(r_minus, args.resolution, args.slice_tau_max, args.resolution).config_err()?;
            Some(SliceJson {
                r_minus,
                tau_max: args.slice_tau_max,
                min_delta: s.min_delta,
                nonnegative: s.min_delta >= 0.0,
            })
        }
        None => None,
    };
    let summary = ScanSummary {
        tau: args.tau,
        resolution: args.resolution,
        expected_ratio: cp_boundary_ratio::<f64>().0,
        boundary: grid.boundary_ratio().map(|b| BoundaryJson {
            ratio: b.ratio,
            deviation: b.deviation,
            columns_used: b.columns_used,
            cell: 1.0 / (args.resolution - 1) as f64,
        }),
        slice,
    };
    write_atomic(&args.out, csv.into_string().as_bytes()).numeric_err()?;
    let summary_path = sibling(&args.out, "summary");
    write_json(&summary_path, &summary).numeric_err()?;
    let mut m = manifest("scan", None, None, start);
    m.outputs = vec![display(&args.out), display(&summary_path)];
    write_json(&sibling(&args.out, "manifest"), &m).numeric_err()?;
    Ok(())
}

fn validate(args: &ValidateArgs) -> Result<(), Failure> {
    let ids: Vec<u8> = if args.only.is_empty() {
        acceptance::CRITERIA.to_vec()
    } else {
        args.only.clone()
    };
    let mut outcomes = Vec::new();
    for id in ids {
        let outcome = acceptance::criterion(id, args.tolerance_scale)
            .ok_or_else(|| anyhow!("--only: no criterion {id}"))
            .config_err()?;
        println!("{outcome}");
        outcomes.push(outcome);
    }
    if let Some(out) = &args.out {
        write_json(out, &outcomes).context("writing report").numeric_err()?;
    }
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("[{}] {}", o.id, o.title))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Acceptance(format!("failing criteria: {}", failed.join(", "))))
    }
}
