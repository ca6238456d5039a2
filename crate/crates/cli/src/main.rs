use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use micromorphx_core::dispersion::{dispersion_curves, sample_path};
use micromorphx_core::dynamics::{self, initial_data_rows, run, supply_rows, DependenceReport};
use micromorphx_core::inequalities::{cube_levels, refinement_study, InequalitySpec};
use micromorphx_core::io::config::{load_config, load_structure, OutputFormat, ScenarioConfig};
use micromorphx_core::io::{self, Manifest};
use micromorphx_core::sparse::EigenOptions;
use micromorphx_core::statics::{coercivity_lower_bound, resolvent_residual, solve_resolvent};
use micromorphx_core::tensor::{validate_for_variant, Material};
use micromorphx_core::Error;
use serde::Serialize;

mod verify;

#[derive(Parser, Debug)]
#[command(name = "micromorphx", version, about = "Relaxed micromorphic continuum laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed; overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (falls back to MICROMORPHX_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the evolution problem and write the energy ledger.
    Simulate(Common),
    /// Solve the resolvent problem `(I − A) w = w*` with `w*` from the `[ic]` section.
    StaticSolve(Common),
    /// Estimate inequality constants over nested refinement levels.
    EstimateConstants {
        #[command(flatten)]
        common: Common,
        /// Comma-separated inequality names, `core` or `all`.
        #[arg(long)]
        spec: Option<String>,
        /// Comma-separated cells per axis, e.g. `4,8,16`.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
        /// Outer eigen-iteration cap.
        #[arg(long)]
        max_iter: Option<usize>,
    },
    /// Dispersion branches along the `[dispersion]` path.
    Dispersion(Common),
    /// Report the parameter restrictions for the scenario material.
    CheckParams(Common),
    /// Run the built-in invariant suite on small grids.
    Verify(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate(c) | Command::StaticSolve(c) | Command::Dispersion(c) | Command::CheckParams(c) | Command::Verify(c) => c,
            Command::EstimateConstants { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::StaticSolve(_) => "static-solve",
            Command::EstimateConstants { .. } => "estimate-constants",
            Command::Dispersion(_) => "dispersion",
            Command::CheckParams(_) => "check-params",
            Command::Verify(_) => "verify",
        }
    }
}

/// A numerical check that did not pass; exits with code 2.
#[derive(Debug)]
struct Failed(String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

/// Parameter report that did not pass; exits with code 1.
#[derive(Debug)]
struct Rejected(String);

impl std::fmt::Display for Rejected {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Rejected {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Error>() {
        return if e.is_validation() { 1 } else { 2 };
    }
    if err.downcast_ref::<Rejected>().is_some() {
        return 1;
    }
    if err.downcast_ref::<Failed>().is_some() {
        return 2;
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 1;
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn thread_count(requested: Option<usize>) -> Result<usize> {
    let from_env = std::env::var("MICROMORPHX_THREADS").ok();
    let n = match (requested, from_env) {
        (Some(n), _) => n,
        (None, Some(v)) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("MICROMORPHX_THREADS='{v}' is not a count")))?,
        (None, None) => 0,
    };
    Ok(n)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let common = cli.command.common();
    let threads = thread_count(common.threads)?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().ok();
    }
    let threads = rayon::current_num_threads();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let context = Ctx { command: cli.command.name(), common, threads, args };
    match &cli.command {
        Command::Simulate(_) => simulate(&context),
        Command::StaticSolve(_) => static_solve(&context),
        Command::EstimateConstants { spec, levels, max_iter, .. } => estimate_constants(&context, spec.as_deref(), levels.as_deref(), *max_iter),
        Command::Dispersion(_) => dispersion(&context),
        Command::CheckParams(_) => check_params(&context),
        Command::Verify(_) => verify(&context),
    }
}

struct Ctx<'a> {
    command: &'static str,
    common: &'a Common,
    threads: usize,
    args: Vec<String>,
}

impl Ctx<'_> {
    fn config(&self) -> Result<ScenarioConfig> {
        let path = self.common.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
        let mut config = load_config(path).with_context(|| format!("reading {}", path.display()))?;
        if let Some(seed) = self.common.seed {
            config.seed = seed;
        }
        Ok(config)
    }

    fn out_dir(&self, config: Option<&ScenarioConfig>) -> Result<PathBuf> {
        let dir = self
            .common
            .out
            .clone()
            .or_else(|| config.map(|c| c.output.directory.clone()))
            .unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn manifest(&self, seed: u64, config: Option<ScenarioConfig>) -> Manifest {
        Manifest::new(self.command, self.args.clone(), seed, self.threads, config)
    }
}

fn create(dir: &Path, name: &str, outputs: &mut Vec<String>) -> Result<BufWriter<File>> {
    outputs.push(name.to_string());
    Ok(BufWriter::new(File::create(dir.join(name)).with_context(|| format!("creating {name}"))?))
}

#[derive(Serialize)]
struct SimulationSummary {
    steps: usize,
    dt: f64,
    final_time: f64,
    initial_energy: f64,
    final_energy: f64,
    relative_drift: f64,
    warnings: Vec<String>,
    dependence: Option<DependenceSummary>,
}

#[derive(Serialize)]
struct DependenceSummary {
    kind: &'static str,
    passed: bool,
    report: DependenceReport,
}

fn simulate(ctx: &Ctx) -> Result<()> {
    let config = ctx.config()?;
    let dir = ctx.out_dir(Some(&config))?;
    let sm = config.system()?;
    let initial = config.initial_state(&sm)?;
    let loads = config.loads();
    let run_cfg = config.run_config()?;
    let out = run(&sm, &initial, &loads, &run_cfg)?;
    let mut manifest = ctx.manifest(config.seed, Some(config.clone()));
    let outputs = &mut manifest.outputs;

    if config.output.wants(OutputFormat::Csv) {
        io::write_ledger(&out.ledger, create(&dir, "ledger.csv", outputs)?)?;
    }
    if config.output.wants(OutputFormat::Vtk) {
        let states = if out.snapshots.is_empty() { std::slice::from_ref(&out.final_state) } else { &out.snapshots[..] };
        for (i, s) in states.iter().enumerate() {
            let name = format!("snapshot_{i:05}.vtk");
            io::write_snapshot(&sm, s, &dir.join(&name))?;
            outputs.push(name);
        }
    }
    if config.output.wants(OutputFormat::Mtx) {
        sm.write_matrix_market(&dir)?;
        outputs.extend(["stiffness.mtx".to_string(), "mass.mtx".to_string()]);
    }

    let wants_dependence = config.time.as_ref().is_some_and(|t| t.dependence);
    let dependence = if wants_dependence {
        let zero_loads = loads == dynamics::Loads::None;
        let zero_data = initial.q.iter().chain(&initial.p).all(|x| *x == 0.0);
        let kind = match (zero_loads, zero_data) {
            (true, _) => Some("initial_data"),
            (false, true) => Some("supply_terms"),
            (false, false) => None,
        };
        match kind {
            Some(kind) => {
                let constant = dynamics::dependence_constant(&sm, EigenOptions { seed: config.seed, ..EigenOptions::default() })?;
                let rows = if kind == "initial_data" { initial_data_rows(&out, constant.a) } else { supply_rows(&out, constant.a, 0.5) };
                let passed = rows.iter().all(|r| r.passed);
                Some(DependenceSummary { kind, passed, report: DependenceReport { constant, rows, passed } })
            }
            None => None,
        }
    } else {
        None
    };

    let first = out.ledger.rows.first().map_or(0.0, |r| r.total);
    let last = out.ledger.rows.last().map_or(0.0, |r| r.total);
    let summary = SimulationSummary {
        steps: out.steps,
        dt: out.dt,
        final_time: out.final_state.t,
        initial_energy: first,
        final_energy: last,
        relative_drift: out.ledger.relative_drift(),
        warnings: out.warnings.clone(),
        dependence,
    };
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    io::write_json(&summary, &dir.join("summary.json"))?;
    outputs.push("summary.json".into());
    manifest.write(&dir)?;
    println!(
        "simulated {} steps to t = {:.6}; relative drift {:.3e}",
        summary.steps, summary.final_time, summary.relative_drift
    );
    if let Some(d) = &summary.dependence {
        println!("continuous dependence ({}): {} with a = {:.6e}", d.kind, if d.passed { "pass" } else { "FAIL" }, d.report.constant.a);
    }
    Ok(())
}

#[derive(Serialize)]
struct StaticReport {
    dofs: usize,
    cg_iterations: usize,
    cg_residual: f64,
    relative_residual_x: f64,
    coercivity_lambda_min: Option<f64>,
}

/// Largest system on which the coercivity eigenvalue is computed by default.
const COERCIVITY_DOF_LIMIT: usize = 20_000;

fn static_solve(ctx: &Ctx) -> Result<()> {
    let config = ctx.config()?;
    let dir = ctx.out_dir(Some(&config))?;
    let sm = config.system()?;
    let w_star = config.initial_state(&sm)?.to_vec();
    let sol = solve_resolvent(&sm, &w_star)?;
    let residual = if w_star.iter().all(|x| *x == 0.0) { 0.0 } else { resolvent_residual(&sm, &sol.w, &w_star)? };
    let coercivity = if sm.dof_count() <= COERCIVITY_DOF_LIMIT {
        Some(coercivity_lower_bound(&sm, EigenOptions { seed: config.seed, ..EigenOptions::default() })?.lambda_min)
    } else {
        None
    };
    let report = StaticReport {
        dofs: sm.dof_count(),
        cg_iterations: sol.cg_iterations,
        cg_residual: sol.cg_residual,
        relative_residual_x: residual,
        coercivity_lambda_min: coercivity,
    };
    let mut manifest = ctx.manifest(config.seed, Some(config.clone()));
    io::write_json(&report, &dir.join("static.json"))?;
    manifest.outputs.push("static.json".into());
    if config.output.wants(OutputFormat::Vtk) {
        let state = dynamics::State::from_vec(&sol.w, 0.0);
        io::write_snapshot(&sm, &state, &dir.join("solution.vtk"))?;
        manifest.outputs.push("solution.vtk".into());
    }
    manifest.write(&dir)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn parse_specs(list: &str) -> Result<Vec<InequalitySpec>> {
    let mut specs = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match name {
            "core" => specs.extend(InequalitySpec::CORE),
            "all" => {
                specs.extend(InequalitySpec::CORE);
                specs.extend(micromorphx_core::ModelVariant::EXPLORATORY.map(InequalitySpec::Relaxed));
            }
            _ => specs.push(InequalitySpec::parse(name)?),
        }
    }
    if specs.is_empty() {
        return Err(Error::InvalidArgument("no inequality selected".into()).into());
    }
    Ok(specs)
}

fn estimate_constants(ctx: &Ctx, spec: Option<&str>, levels: Option<&[usize]>, max_iter: Option<usize>) -> Result<()> {
    let config = match &ctx.common.config {
        Some(_) => Some(ctx.config()?),
        None => None,
    };
    let section = config.as_ref().and_then(|c| c.constants.clone());
    let specs = match (spec, &section) {
        (Some(s), _) => parse_specs(s)?,
        (None, Some(c)) if !c.specs.is_empty() => parse_specs(&c.specs.join(","))?,
        _ => return Err(Error::InvalidArgument("--spec is required".into()).into()),
    };
    let levels: Vec<usize> = match (levels, &section) {
        (Some(l), _) => l.to_vec(),
        (None, Some(c)) if !c.levels.is_empty() => c.levels.clone(),
        _ => vec![4, 8, 16],
    };
    let seed = ctx.common.seed.or(config.as_ref().map(|c| c.seed)).unwrap_or(42);
    let max_iter = max_iter.or(section.as_ref().map(|c| c.max_iter)).unwrap_or(1000);
    let grids = cube_levels(&levels)?;
    let opts = EigenOptions { seed, max_iter, ..EigenOptions::default() };
    let studies = specs.iter().map(|&s| refinement_study(s, &grids, opts)).collect::<Result<Vec<_>, _>>()?;
    let dir = ctx.out_dir(config.as_ref())?;
    let mut manifest = ctx.manifest(seed, config);
    io::write_constants(&studies, create(&dir, "constants.csv", &mut manifest.outputs)?)?;
    manifest.write(&dir)?;
    io::write_constants(&studies, std::io::stdout().lock())?;
    Ok(())
}

fn dispersion(ctx: &Ctx) -> Result<()> {
    let config = ctx.config()?;
    let dir = ctx.out_dir(Some(&config))?;
    let material = config.build_material()?;
    let (vertices, points) = match &config.dispersion {
        Some(d) => (d.path.clone(), d.points),
        None => (vec![[0.0; 3], [std::f64::consts::PI, 0.0, 0.0]], 100),
    };
    let path = sample_path(&vertices, points)?;
    let curves = dispersion_curves(&path, &material, config.material.variant)?;
    let mut manifest = ctx.manifest(config.seed, Some(config.clone()));
    io::write_dispersion(&curves, create(&dir, "dispersion.csv", &mut manifest.outputs)?)?;
    manifest.write(&dir)?;
    println!("wrote {} k-points to {}", curves.len(), dir.join("dispersion.csv").display());
    Ok(())
}

#[derive(Serialize)]
struct ParamsReport {
    variant: String,
    passed: bool,
    checks: Vec<micromorphx_core::tensor::ParameterCheck>,
    bounds: Option<micromorphx_core::tensor::MaterialBounds>,
}

fn check_params(ctx: &Ctx) -> Result<()> {
    let path = ctx.common.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let config = load_structure(path).with_context(|| format!("reading {}", path.display()))?;
    let variant = config.material.variant;
    let report = match config.material.moduli() {
        Ok(m) => {
            let v = validate_for_variant(&m, variant);
            let bounds = v.passed.then(|| Material::isotropic_unchecked(m).bounds(variant));
            ParamsReport { variant: variant.to_string(), passed: v.passed, checks: v.checks, bounds }
        }
        Err(missing) => {
            if config.material.c_file.is_some() {
                let material = config.build_material()?;
                ParamsReport { variant: variant.to_string(), passed: true, checks: Vec::new(), bounds: Some(material.bounds(variant)) }
            } else {
                return Err(Error::Config(missing.join("; ")).into());
            }
        }
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| format!("condpara: {}", c.condition)).collect();
        Err(Rejected(failed.join(", ")).into())
    }
}

fn verify(ctx: &Ctx) -> Result<()> {
    let dir = match &ctx.common.out {
        Some(_) => Some(ctx.out_dir(None)?),
        None => None,
    };
    let seed = ctx.common.seed.unwrap_or(42);
    let results = verify::run_suite(seed);
    for r in &results {
        println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if let Some(dir) = dir {
        io::write_json(&results, &dir.join("verify.json"))?;
        let mut manifest = ctx.manifest(seed, None);
        manifest.outputs.push("verify.json".into());
        manifest.write(&dir)?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failed(format!("{failed} of {} invariant checks failed", results.len())).into());
    }
    Ok(())
}
