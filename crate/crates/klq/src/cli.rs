//! Command-line orchestration: config ingestion, experiment execution, and
//! CSV/JSON emission.
//!
//! One JSON config file describes a run; flags override config fields
//! (precedence flags > config > defaults). All outputs are written
//! atomically (temp file in the target directory, then rename) so aborted
//! runs never leave torn files. Re-running with the same config and seed
//! reproduces byte-identical CSVs.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::parse_basis_selector;
use crate::dual::{solve, KlqProblem, Solution, SolveOptions};
use crate::fleet::{
    coupling_experiment, mpc_run, simulate_fleet, tv_distance, FleetState, MarginalSource,
    MpcOptions,
};
use crate::model::{validate_model, KlqModel};
use crate::tcl::{build_tracking_problem, deadband_point_masses, TclParams};
use crate::{Error, Result};

/// Format version stamped into every manifest; bump when CSV columns or
/// JSON fields change.
pub const ARTIFACT_VERSION: &str = "1";

#[derive(Parser, Debug)]
#[command(name = "klq", version, about = "KLQ optimal control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Run configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Tracking penalty; overrides the config.
    #[arg(long)]
    kappa: Option<f64>,
    /// Solver iteration cap; overrides the config.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Gradient sup-norm tolerance; overrides the config.
    #[arg(long)]
    grad_tol: Option<f64>,
    /// Basis selector ("degenerate" or "fourier:N[:omega]"); overrides the
    /// config.
    #[arg(long)]
    basis: Option<String>,
    /// RNG seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Treat solver non-convergence as an error.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check model invariants and print any violations.
    Validate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Solve the tracking problem and emit the solution and tracking trace.
    Solve {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Solve, then simulate a finite fleet under the optimal policy.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Fleet size; overrides the config.
        #[arg(long)]
        agents: Option<usize>,
    },
    /// Solve from several initial conditions and record how the optimal
    /// marginals couple.
    Coupling {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated penalty values; overrides the config.
        #[arg(long)]
        kappas: Option<String>,
        /// Number of point-mass initial conditions; overrides the config.
        #[arg(long)]
        num_inits: Option<usize>,
    },
    /// Receding-horizon closed loop over a simulated fleet.
    Mpc {
        #[command(flatten)]
        common: CommonArgs,
        /// Optimization window length in steps; overrides the config.
        #[arg(long)]
        window: Option<usize>,
        /// Steps applied per window; overrides the config.
        #[arg(long)]
        step: Option<usize>,
        /// Fleet size; overrides the config.
        #[arg(long)]
        agents: Option<usize>,
    },
}

/// Where the model comes from: a model file or inline load parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    /// Path to a model JSON document, relative to the config file.
    File { path: String },
    /// Discretized load population built from parameters.
    Tcl { tcl: TclParams },
}

/// Reference signal specification. For a load population config the values
/// are power deviations from nominal; for a model file they are absolute
/// output targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReferenceSpec {
    Constant { constant: f64 },
    Sinusoid { sinusoid: SinusoidSpec },
    File { path: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SinusoidSpec {
    pub amplitude: f64,
    /// Period in steps.
    pub period: f64,
    /// Phase offset in radians.
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: Option<usize>,
    pub grad_tol: Option<f64>,
    pub line_search_tol: Option<f64>,
    /// Ascent direction: "gradient" (default) or "lbfgs[:memory]".
    pub method: Option<String>,
}

impl SolverConfig {
    fn to_options(&self) -> Result<SolveOptions> {
        let mut o = match self.method.as_deref() {
            None | Some("gradient") => SolveOptions::default(),
            Some(m) if m == "lbfgs" || m.starts_with("lbfgs:") => {
                let mut o = SolveOptions::quasi_newton();
                if let Some(mem) = m.strip_prefix("lbfgs:") {
                    let mem: usize = mem.parse().map_err(|_| {
                        Error::InvalidArgument(format!("bad lbfgs memory in method '{m}'"))
                    })?;
                    o.method = crate::dual::AscentMethod::Lbfgs { memory: mem };
                }
                o
            }
            Some(other) => {
                return Err(Error::InvalidArgument(format!(
                    "unknown solver method '{other}' (expected 'gradient' or 'lbfgs[:memory]')"
                )))
            }
        };
        if let Some(m) = self.max_iters {
            o.max_iters = m;
        }
        if self.grad_tol.is_some() {
            o.grad_tol = self.grad_tol;
        }
        if let Some(t) = self.line_search_tol {
            o.line_search_tol = t;
        }
        Ok(o)
    }
}

fn default_kappa() -> f64 {
    1.0
}

fn default_agents() -> usize {
    10_000
}

fn default_num_inits() -> usize {
    6
}

/// One experiment description. Field semantics are documented in the README
/// config schema; unknown fields are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    #[serde(default)]
    pub reference: Option<ReferenceSpec>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Basis selector; defaults to "degenerate".
    #[serde(default)]
    pub basis: Option<String>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default = "default_agents")]
    pub agents: usize,
    /// Penalty sweep for coupling runs; defaults to `[kappa]`.
    #[serde(default)]
    pub kappas: Option<Vec<f64>>,
    #[serde(default = "default_num_inits")]
    pub num_inits: usize,
    /// MPC window length in steps.
    #[serde(default)]
    pub window: Option<usize>,
    /// MPC steps applied per window; defaults to the window length.
    #[serde(default)]
    pub step: Option<usize>,
    /// Times at which to write marginal histogram snapshots.
    #[serde(default)]
    pub snapshots: Vec<usize>,
}

struct LoadedConfig {
    config: RunConfig,
    /// SHA-256 of the raw config bytes, hex.
    hash: String,
    /// Directory of the config file, for resolving relative paths.
    base_dir: PathBuf,
}

fn load_config(path: &Path) -> Result<LoadedConfig> {
    let bytes = std::fs::read(path)?;
    let config: RunConfig = serde_json::from_slice(&bytes)?;
    if !(config.kappa > 0.0) {
        return Err(Error::InvalidArgument("kappa must be positive".into()));
    }
    let hash = format!("{:x}", Sha256::digest(&bytes));
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(LoadedConfig {
        config,
        hash,
        base_dir,
    })
}

fn apply_overrides(config: &mut RunConfig, args: &CommonArgs) {
    if let Some(k) = args.kappa {
        config.kappa = k;
    }
    if let Some(m) = args.max_iters {
        config.solver.max_iters = Some(m);
    }
    if let Some(t) = args.grad_tol {
        config.solver.grad_tol = Some(t);
    }
    if let Some(b) = &args.basis {
        config.basis = Some(b.clone());
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(d) = &args.out_dir {
        config.out_dir = Some(d.to_string_lossy().into_owned());
    }
}

fn reference_values(
    spec: &ReferenceSpec,
    horizon: usize,
    base_dir: &Path,
) -> Result<Vec<f64>> {
    match spec {
        ReferenceSpec::Constant { constant } => Ok(vec![*constant; horizon]),
        ReferenceSpec::Sinusoid { sinusoid } => {
            if !(sinusoid.period > 0.0) {
                return Err(Error::InvalidArgument("sinusoid period must be positive".into()));
            }
            Ok((1..=horizon)
                .map(|k| {
                    let arg =
                        2.0 * std::f64::consts::PI * k as f64 / sinusoid.period + sinusoid.phase;
                    sinusoid.amplitude * arg.sin()
                })
                .collect())
        }
        ReferenceSpec::File { path } => {
            let text = std::fs::read_to_string(base_dir.join(path))?;
            let values: Vec<f64> = serde_json::from_str(&text)?;
            if values.len() != horizon {
                return Err(Error::Dimension(format!(
                    "reference file has {} entries, horizon is {}",
                    values.len(),
                    horizon
                )));
            }
            Ok(values)
        }
    }
}

struct BuiltProblem {
    problem: KlqProblem,
    /// Load parameters when the model came from inline TCL config.
    tcl_params: Option<TclParams>,
}

fn load_model(loaded: &LoadedConfig) -> Result<KlqModel> {
    match &loaded.config.model {
        ModelSource::File { path } => {
            let text = std::fs::read_to_string(loaded.base_dir.join(path))?;
            KlqModel::from_json_str(&text)
        }
        ModelSource::Tcl { tcl } => crate::tcl::build_tcl_model(tcl),
    }
}

fn build_problem(loaded: &LoadedConfig) -> Result<BuiltProblem> {
    let config = &loaded.config;
    match &config.model {
        ModelSource::File { path } => {
            let text = std::fs::read_to_string(loaded.base_dir.join(path))?;
            let model = KlqModel::from_json_str(&text)?;
            let spec = config
                .reference
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("config is missing a reference".into()))?;
            let reference = reference_values(spec, model.horizon(), &loaded.base_dir)?;
            let selector = config.basis.as_deref().unwrap_or("degenerate");
            let basis = parse_basis_selector(selector, model.horizon())?;
            Ok(BuiltProblem {
                problem: KlqProblem::new(model, reference, config.kappa, basis)?,
                tcl_params: None,
            })
        }
        ModelSource::Tcl { tcl } => {
            let spec = config
                .reference
                .clone()
                .unwrap_or(ReferenceSpec::Constant { constant: 0.0 });
            let deviation = reference_values(&spec, tcl.horizon, &loaded.base_dir)?;
            let selector = config.basis.as_deref().unwrap_or("degenerate");
            let basis = parse_basis_selector(selector, tcl.horizon)?;
            let built = build_tracking_problem(tcl, &deviation, config.kappa, basis)?;
            Ok(BuiltProblem {
                problem: built.into_problem(),
                tcl_params: Some(tcl.clone()),
            })
        }
    }
}

/// Write `bytes` to `dir/name` atomically: temp file in `dir`, then rename.
fn atomic_write(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    let target = dir.join(name);
    tmp.persist(&target).map_err(|e| Error::Io(e.error))?;
    Ok(target)
}

#[derive(Serialize)]
struct Manifest<'a> {
    artifact_version: &'static str,
    command: &'a str,
    seed: u64,
    config_sha256: &'a str,
    kappa: f64,
    basis: &'a str,
    solver: &'a SolverConfig,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct SolutionDoc {
    lambda: Vec<f64>,
    lambda_check: Vec<f64>,
    dual_value: f64,
    primal_value: f64,
    primal_full: f64,
    relative_entropy: f64,
    duality_gap: f64,
    iterations: usize,
    converged: bool,
    grad_norm: f64,
    reference: Vec<f64>,
    /// Mean output per step, `k = 1..=K`.
    output_means: Vec<f64>,
    /// Tilted policy tables, `policies[k-1][s][u]` for `k = 1..=K`.
    policies: Vec<Vec<Vec<f64>>>,
}

impl SolutionDoc {
    fn new(problem: &KlqProblem, sol: &Solution) -> Self {
        Self {
            lambda: sol.lambda.to_vec(),
            lambda_check: sol.lambda_check.to_vec(),
            dual_value: sol.dual_value,
            primal_value: sol.primal_value,
            primal_full: sol.primal_full,
            relative_entropy: sol.relative_entropy,
            duality_gap: sol.duality_gap,
            iterations: sol.iterations,
            converged: sol.converged,
            grad_norm: sol.grad_norm,
            reference: problem.reference().to_vec(),
            output_means: sol.output_trajectory.clone(),
            policies: sol
                .policies
                .tables()
                .iter()
                .map(|t| t.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
        }
    }
}

fn tracking_csv(reference: &[f64], achieved: &[f64]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["k", "r", "achieved", "error"])
        .map_err(|e| Error::Parse(e.to_string()))?;
    for (i, (r, y)) in reference.iter().zip(achieved).enumerate() {
        w.write_record([
            (i + 1).to_string(),
            r.to_string(),
            y.to_string(),
            (y - r).to_string(),
        ])
        .map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

fn marginal_csv(nu: &Array2<f64>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["s", "u", "p"])
        .map_err(|e| Error::Parse(e.to_string()))?;
    for ((s, u), p) in nu.indexed_iter() {
        w.write_record([s.to_string(), u.to_string(), p.to_string()])
            .map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

fn rms(errors: impl Iterator<Item = f64>) -> f64 {
    let (mut sq, mut n) = (0.0, 0usize);
    for e in errors {
        sq += e * e;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (sq / n as f64).sqrt()
    }
}

struct Emitter {
    out_dir: PathBuf,
    outputs: Vec<String>,
}

impl Emitter {
    fn new(config: &RunConfig, args_out: Option<&PathBuf>) -> Result<Self> {
        let out_dir = args_out
            .cloned()
            .or_else(|| config.out_dir.as_ref().map(PathBuf::from))
            .ok_or_else(|| {
                Error::InvalidArgument("no output directory (set out_dir or --out-dir)".into())
            })?;
        Ok(Self {
            out_dir,
            outputs: Vec::new(),
        })
    }

    fn emit(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        atomic_write(&self.out_dir, name, bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(mut self, command: &str, loaded: &LoadedConfig) -> Result<()> {
        let config = &loaded.config;
        let manifest = Manifest {
            artifact_version: ARTIFACT_VERSION,
            command,
            seed: config.seed,
            config_sha256: &loaded.hash,
            kappa: config.kappa,
            basis: config.basis.as_deref().unwrap_or("degenerate"),
            solver: &config.solver,
            outputs: {
                let mut o = self.outputs.clone();
                o.push("manifest.json".into());
                o
            },
        };
        let bytes = serde_json::to_vec_pretty(&manifest)?;
        atomic_write(&self.out_dir, "manifest.json", &bytes)?;
        self.outputs.push("manifest.json".into());
        Ok(())
    }
}

fn run_validate(common: &CommonArgs) -> Result<i32> {
    let loaded = load_config(&common.config)?;
    let model = load_model(&loaded)?;
    let report = validate_model(&model);
    if report.is_valid() {
        println!("model ok: {} states, {} inputs, horizon {}",
            model.num_states(), model.num_inputs(), model.horizon());
        Ok(0)
    } else {
        for v in &report.violations {
            eprintln!("violation: {v}");
        }
        Ok(1)
    }
}

fn emit_snapshots(
    emitter: &mut Emitter,
    snapshots: &[usize],
    horizon: usize,
    marginal_at: impl Fn(usize) -> Array2<f64>,
) -> Result<()> {
    for &k in snapshots {
        if k > horizon {
            return Err(Error::IndexRange(format!(
                "snapshot time {k} beyond horizon {horizon}"
            )));
        }
        let bytes = marginal_csv(&marginal_at(k))?;
        emitter.emit(&format!("marginals_k{k}.csv"), &bytes)?;
    }
    Ok(())
}

fn run_solve(common: &CommonArgs) -> Result<i32> {
    let mut loaded = load_config(&common.config)?;
    apply_overrides(&mut loaded.config, common);
    let built = build_problem(&loaded)?;
    let sol = solve(&built.problem, &loaded.config.solver.to_options()?)?;
    if common.strict && !sol.converged {
        eprintln!("solver did not converge (grad norm {})", sol.grad_norm);
        return Ok(1);
    }
    let mut emitter = Emitter::new(&loaded.config, common.out_dir.as_ref())?;
    let doc = SolutionDoc::new(&built.problem, &sol);
    emitter.emit("solution.json", &serde_json::to_vec_pretty(&doc)?)?;
    let bytes = tracking_csv(built.problem.reference(), &sol.output_trajectory)?;
    emitter.emit("tracking.csv", &bytes)?;
    emit_snapshots(
        &mut emitter,
        &loaded.config.snapshots,
        built.problem.model().horizon(),
        |k| sol.marginals.at(k).clone(),
    )?;
    emitter.finish("solve", &loaded)?;
    let err = rms(
        sol.output_trajectory
            .iter()
            .zip(built.problem.reference())
            .map(|(y, r)| y - r),
    );
    println!(
        "dual={:.6} gap={:.3e} rms={:.6} iters={} converged={}",
        sol.dual_value, sol.duality_gap, err, sol.iterations, sol.converged
    );
    Ok(0)
}

fn run_simulate(common: &CommonArgs, agents: Option<usize>) -> Result<i32> {
    let mut loaded = load_config(&common.config)?;
    apply_overrides(&mut loaded.config, common);
    if let Some(a) = agents {
        loaded.config.agents = a;
    }
    let built = build_problem(&loaded)?;
    let sol = solve(&built.problem, &loaded.config.solver.to_options()?)?;
    if common.strict && !sol.converged {
        eprintln!("solver did not converge (grad norm {})", sol.grad_norm);
        return Ok(1);
    }
    let model = built.problem.model();
    let sim = simulate_fleet(model, &sol.policies, loaded.config.agents, loaded.config.seed)?;
    let achieved: Vec<f64> = (1..=model.horizon())
        .map(|k| model.mean_output(&sim.empirical[k]))
        .collect();
    let mut emitter = Emitter::new(&loaded.config, common.out_dir.as_ref())?;
    let bytes = tracking_csv(built.problem.reference(), &achieved)?;
    emitter.emit("tracking.csv", &bytes)?;
    emit_snapshots(
        &mut emitter,
        &loaded.config.snapshots,
        model.horizon(),
        |k| sim.empirical[k].clone(),
    )?;
    emitter.finish("simulate", &loaded)?;
    let err = rms(
        achieved
            .iter()
            .zip(built.problem.reference())
            .map(|(y, r)| y - r),
    );
    println!(
        "agents={} rms={:.6} dual={:.6} iters={}",
        loaded.config.agents, err, sol.dual_value, sol.iterations
    );
    Ok(0)
}

/// Evenly spaced point-mass initial marginals for a generic model.
fn generic_point_masses(model: &KlqModel, count: usize) -> Vec<Array2<f64>> {
    let total = model.num_joint();
    (0..count)
        .map(|i| {
            let x = i * total / count.max(1);
            let (s, u) = model.x_unindex(x.min(total - 1));
            let mut nu = Array2::zeros((model.num_states(), model.num_inputs()));
            nu[[s, u]] = 1.0;
            nu
        })
        .collect()
}

fn coupling_csv(run: &crate::fleet::CouplingRun) -> Result<Vec<u8>> {
    let n = run.marginals.len();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["k".to_string(), "tv_max".to_string()];
    for i in 0..n {
        for j in (i + 1)..n {
            header.push(format!("tv_{i}_{j}"));
        }
    }
    w.write_record(&header)
        .map_err(|e| Error::Parse(e.to_string()))?;
    for k in 0..run.tv_max.len() {
        let mut row = vec![k.to_string(), run.tv_max[k].to_string()];
        for i in 0..n {
            for j in (i + 1)..n {
                row.push(tv_distance(run.marginals[i].at(k), run.marginals[j].at(k)).to_string());
            }
        }
        w.write_record(&row).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

fn run_coupling(
    common: &CommonArgs,
    kappas_arg: Option<&str>,
    num_inits: Option<usize>,
) -> Result<i32> {
    let mut loaded = load_config(&common.config)?;
    apply_overrides(&mut loaded.config, common);
    if let Some(n) = num_inits {
        loaded.config.num_inits = n;
    }
    if let Some(list) = kappas_arg {
        let parsed: Vec<f64> = list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| Error::Parse(format!("bad kappa '{s}': {e}")))
            })
            .collect::<Result<_>>()?;
        loaded.config.kappas = Some(parsed);
    }
    let built = build_problem(&loaded)?;
    let kappas = loaded
        .config
        .kappas
        .clone()
        .unwrap_or_else(|| vec![loaded.config.kappa]);
    let inits = match &built.tcl_params {
        Some(params) => deadband_point_masses(params, loaded.config.num_inits)?,
        None => generic_point_masses(built.problem.model(), loaded.config.num_inits),
    };
    let runs = coupling_experiment(
        &built.problem,
        &inits,
        &kappas,
        &loaded.config.solver.to_options()?,
    )?;
    if common.strict && runs.iter().any(|r| r.converged.iter().any(|c| !c)) {
        eprintln!("at least one coupling solve did not converge");
        return Ok(1);
    }
    let mut emitter = Emitter::new(&loaded.config, common.out_dir.as_ref())?;
    for (i, run) in runs.iter().enumerate() {
        let name = if runs.len() == 1 {
            "coupling.csv".to_string()
        } else {
            format!("coupling_{i}.csv")
        };
        let bytes = coupling_csv(run)?;
        emitter.emit(&name, &bytes)?;
    }
    emitter.finish("coupling", &loaded)?;
    for run in &runs {
        println!(
            "kappa={} tv_initial={:.4} tv_final={:.4}",
            run.kappa,
            run.tv_max.first().copied().unwrap_or(0.0),
            run.tv_max.last().copied().unwrap_or(0.0)
        );
    }
    Ok(0)
}

fn run_mpc(
    common: &CommonArgs,
    window: Option<usize>,
    step: Option<usize>,
    agents: Option<usize>,
) -> Result<i32> {
    let mut loaded = load_config(&common.config)?;
    apply_overrides(&mut loaded.config, common);
    if let Some(w) = window {
        loaded.config.window = Some(w);
    }
    if let Some(s) = step {
        loaded.config.step = Some(s);
    }
    if let Some(a) = agents {
        loaded.config.agents = a;
    }
    let built = build_problem(&loaded)?;
    let model = built.problem.model();
    let horizon = model.horizon();
    let window = loaded.config.window.unwrap_or(horizon);
    let step = loaded.config.step.unwrap_or(window);
    let basis_selector = loaded.config.basis.clone().unwrap_or_else(|| "degenerate".into());
    let opts = MpcOptions {
        window,
        step,
        marginal_source: MarginalSource::Empirical,
        solver: loaded.config.solver.to_options()?,
    };
    let mut fleet = FleetState::from_initial_marginal(model, loaded.config.agents, loaded.config.seed);
    let trace = mpc_run(
        model,
        built.problem.reference(),
        loaded.config.kappa,
        |h| parse_basis_selector(&basis_selector, h),
        &mut fleet,
        &opts,
    )?;
    if common.strict && trace.window_converged.iter().any(|c| !c) {
        eprintln!("at least one window solve did not converge");
        return Ok(1);
    }
    let mut emitter = Emitter::new(&loaded.config, common.out_dir.as_ref())?;
    let bytes = tracking_csv(&trace.reference, &trace.achieved)?;
    emitter.emit("tracking.csv", &bytes)?;
    emitter.finish("mpc", &loaded)?;
    println!(
        "windows={} rms={:.6} converged={}/{}",
        trace.window_converged.len(),
        trace.rms_error,
        trace.window_converged.iter().filter(|&&c| c).count(),
        trace.window_converged.len()
    );
    Ok(0)
}

/// Entry point: parse `argv`, execute, and return the process exit code
/// (0 success, 1 domain error, 2 usage error).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Validate { common } => run_validate(common),
        Command::Solve { common } => run_solve(common),
        Command::Simulate { common, agents } => run_simulate(common, *agents),
        Command::Coupling {
            common,
            kappas,
            num_inits,
        } => run_coupling(common, kappas.as_deref(), *num_inits),
        Command::Mpc {
            common,
            window,
            step,
            agents,
        } => run_mpc(common, *window, *step, *agents),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_minimal_tcl() {
        let json = r#"{"model": {"tcl": {"horizon": 30}}, "kappa": 150.0}"#;
        let config: RunConfig = serde_json::from_str(json).unwrap();
        match &config.model {
            ModelSource::Tcl { tcl } => assert_eq!(tcl.horizon, 30),
            _ => panic!("expected tcl source"),
        }
        assert_eq!(config.kappa, 150.0);
        assert_eq!(config.agents, 10_000);
        assert_eq!(config.num_inits, 6);
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let json = r#"{"model": {"path": "m.json"}, "frobnicate": 1}"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
    }

    #[test]
    fn reference_sinusoid_values() {
        let spec = ReferenceSpec::Sinusoid {
            sinusoid: SinusoidSpec {
                amplitude: 2.0,
                period: 4.0,
                phase: 0.0,
            },
        };
        let r = reference_values(&spec, 4, Path::new(".")).unwrap();
        approx::assert_abs_diff_eq!(r[0], 2.0, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(r[1], 0.0, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(r[3], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["klq", "solve", "--frobnicate"]), 2);
    }

    #[test]
    fn help_is_success() {
        assert_eq!(run(["klq", "--help"]), 0);
    }

    #[test]
    fn missing_config_is_domain_error() {
        assert_eq!(
            run(["klq", "solve", "--config", "/nonexistent/x.json"]),
            1
        );
    }
}
