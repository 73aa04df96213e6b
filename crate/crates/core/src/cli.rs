//! Config-driven runner: one JSON document describes one experiment; each
//! subcommand writes CSV fields and a JSON report into the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::coefficients::{self, Coef, CoefficientSet, EllipticityReport};
use crate::expr::{self, Env, Expr};
use crate::fixedpoint::{
    self, FixedPointError, FixedPointReport, NonlocalSolution, DEFAULT_MAX_ITER, DEFAULT_Q_CAP, DEFAULT_TOL,
};
use crate::grid::{make_grid, Domain, Grid, SpaceField, SpaceTimeField};
use crate::montecarlo::{self, FkProblem, NuBound, PathConfig};
use crate::nonlocal::{GammaOperator, KernelTable, NonlocalSpec, TimeKernel};
use crate::stepper::Stepper;

#[derive(Debug, Parser)]
#[command(name = "bspde", version, about = "Backward parabolic solver with non-local terminal conditions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check coefficients and the non-local operator only.
    Validate(CommonArgs),
    /// Plain terminal-value problem (non-local term ignored).
    Cauchy(CommonArgs),
    /// Full non-local solve by Picard iteration.
    Solve(CommonArgs),
    /// Dense Q matrix and direct solve.
    Qmatrix(CommonArgs),
    /// Monte Carlo estimate against the PDE solution.
    Mccheck(CommonArgs),
    /// Analytic confinement bound.
    Nubound(CommonArgs),
    /// Spatial refinement study.
    Converge(CommonArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate(_) => "validate",
            Command::Cauchy(_) => "cauchy",
            Command::Solve(_) => "solve",
            Command::Qmatrix(_) => "qmatrix",
            Command::Mccheck(_) => "mccheck",
            Command::Nubound(_) => "nubound",
            Command::Converge(_) => "converge",
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Validate(a)
            | Command::Cauchy(a)
            | Command::Solve(a)
            | Command::Qmatrix(a)
            | Command::Mccheck(a)
            | Command::Nubound(a)
            | Command::Converge(a) => a,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("not converged: {0}")]
    NonConvergence(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::NonConvergence(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

impl From<FixedPointError> for CliError {
    fn from(e: FixedPointError) -> Self {
        match e {
            FixedPointError::Diverged { .. } => CliError::NonConvergence(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

/// A number or an expression string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Num(f64),
    Text(String),
}

impl Scalar {
    fn coef(&self, what: &str) -> Result<Coef, CliError> {
        match self {
            Scalar::Num(v) => Ok(Coef::Const(*v)),
            Scalar::Text(s) => Coef::parse(s).map_err(|e| invalid(format!("{what}: {e}"))),
        }
    }

    fn expr(&self, what: &str) -> Result<Expr, CliError> {
        match self {
            Scalar::Num(v) => Ok(Expr::Num(*v)),
            Scalar::Text(s) => expr::parse(s).map_err(|e| invalid(format!("{what}: {e}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixOrScalar {
    Matrix(Vec<Vec<Scalar>>),
    Scalar(Scalar),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorOrScalar {
    Vector(Vec<Scalar>),
    Scalar(Scalar),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub nx: Vec<usize>,
    pub nt: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Number of grids in the refinement study.
    #[serde(default = "default_refinements")]
    pub refinements: usize,
}

fn default_refinements() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientConfig {
    pub b: MatrixOrScalar,
    #[serde(default)]
    pub f: Option<VectorOrScalar>,
    #[serde(default)]
    pub lam: Option<Scalar>,
    #[serde(default)]
    pub beta: Vec<Vec<Scalar>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelConfig {
    Table(Vec<[f64; 2]>),
    Scalar(Scalar),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GammaConfig {
    None,
    InitialValue { kappa: f64 },
    PointInTime { kappa: f64, t1: f64 },
    TwoPoint { alpha1: f64, t1: f64, alpha2: f64, t2: f64 },
    TimeKernel { theta: f64, k: KernelConfig },
    /// `table` is a CSV path, relative to the config file.
    SpaceTimeKernel { theta: f64, table: PathBuf },
    Convex { weights: Vec<f64>, parts: Vec<GammaConfig> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub xi: Scalar,
    #[serde(default)]
    pub phi: Option<Scalar>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_q_cap")]
    pub q_cap: usize,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}
fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}
fn default_q_cap() -> usize {
    DEFAULT_Q_CAP
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            q_cap: DEFAULT_Q_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    #[serde(default = "default_mc_dt")]
    pub dt: f64,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    /// Rows `[x1, (x2,) s]`.
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub theta_gap: Option<f64>,
}

fn default_mc_dt() -> f64 {
    1e-4
}
fn default_paths() -> usize {
    100_000
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            dt: default_mc_dt(),
            n_paths: default_paths(),
            seed: 0,
            points: Vec::new(),
            theta_gap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainConfig,
    pub grid: GridConfig,
    pub coefficients: CoefficientConfig,
    #[serde(default = "default_gamma")]
    pub gamma: GammaConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub fixedpoint: FixedPointConfig,
    #[serde(default)]
    pub montecarlo: MonteCarloConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_gamma() -> GammaConfig {
    GammaConfig::None
}

/// Reads and parses a config file. Unreadable files are I/O errors; malformed
/// documents are validation errors.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))
}

/// Everything a run needs, validated.
pub struct Problem {
    pub config: RunConfig,
    pub grid: Arc<Grid>,
    pub coeffs: CoefficientSet,
    pub ellipticity: EllipticityReport,
    pub spec: Option<NonlocalSpec>,
    pub gamma: GammaOperator,
    pub xi: SpaceField,
    pub phi: Option<SpaceTimeField>,
}

fn build_coefficients(c: &CoefficientConfig, dim: usize) -> Result<CoefficientSet, CliError> {
    let b: Vec<Vec<Coef>> = match &c.b {
        MatrixOrScalar::Matrix(rows) => rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.iter()
                    .enumerate()
                    .map(|(j, s)| s.coef(&format!("b[{}][{}]", i + 1, j + 1)))
                    .collect()
            })
            .collect::<Result<_, _>>()?,
        MatrixOrScalar::Scalar(s) => {
            let v = s.coef("b")?;
            (0..dim)
                .map(|i| (0..dim).map(|j| if i == j { v.clone() } else { Coef::Const(0.0) }).collect())
                .collect()
        }
    };
    let f: Vec<Coef> = match &c.f {
        None => vec![Coef::Const(0.0); dim],
        Some(VectorOrScalar::Vector(v)) => v
            .iter()
            .enumerate()
            .map(|(i, s)| s.coef(&format!("f[{}]", i + 1)))
            .collect::<Result<_, _>>()?,
        Some(VectorOrScalar::Scalar(s)) => vec![s.coef("f")?; dim],
    };
    let lam = match &c.lam {
        None => Coef::Const(0.0),
        Some(s) => s.coef("lam")?,
    };
    let beta: Vec<Vec<Coef>> = c
        .beta
        .iter()
        .enumerate()
        .map(|(k, col)| {
            col.iter()
                .enumerate()
                .map(|(i, s)| s.coef(&format!("beta[{}][{}]", k + 1, i + 1)))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    CoefficientSet::new(dim, b, f, lam, beta).map_err(invalid)
}

fn build_spec(g: &GammaConfig, base: &Path) -> Result<Option<NonlocalSpec>, CliError> {
    Ok(Some(match g {
        GammaConfig::None => return Ok(None),
        GammaConfig::InitialValue { kappa } => NonlocalSpec::InitialValue { kappa: *kappa },
        GammaConfig::PointInTime { kappa, t1 } => NonlocalSpec::PointInTime { kappa: *kappa, t1: *t1 },
        GammaConfig::TwoPoint { alpha1, t1, alpha2, t2 } => NonlocalSpec::TwoPoint {
            alpha1: *alpha1,
            t1: *t1,
            alpha2: *alpha2,
            t2: *t2,
        },
        GammaConfig::TimeKernel { theta, k } => NonlocalSpec::TimeKernel {
            theta: *theta,
            k: match k {
                KernelConfig::Table(rows) => TimeKernel::Table(rows.iter().map(|r| (r[0], r[1])).collect()),
                KernelConfig::Scalar(Scalar::Num(v)) => TimeKernel::Constant(*v),
                KernelConfig::Scalar(s) => TimeKernel::Expr(s.expr("gamma kernel k")?),
            },
        },
        GammaConfig::SpaceTimeKernel { theta, table } => {
            let path = base.join(table);
            let file = fs::File::open(&path).map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
            NonlocalSpec::SpaceTimeKernel {
                theta: *theta,
                table: KernelTable::from_csv(file).map_err(invalid)?,
            }
        }
        GammaConfig::Convex { weights, parts } => NonlocalSpec::Convex {
            weights: weights.clone(),
            parts: parts
                .iter()
                .map(|p| build_spec(p, base)?.ok_or_else(|| invalid("convex part of type none")))
                .collect::<Result<_, _>>()?,
        },
    }))
}

impl Problem {
    pub fn build(config: RunConfig, base: &Path) -> Result<Problem, CliError> {
        Self::build_on(config, base, None)
    }

    /// Builds with the grid node counts replaced by `nx`.
    pub fn build_on(config: RunConfig, base: &Path, nx: Option<&[usize]>) -> Result<Problem, CliError> {
        let domain = Domain::new(&config.domain.lo, &config.domain.hi).map_err(invalid)?;
        let dim = domain.dim();
        let nx = nx.unwrap_or(&config.grid.nx).to_vec();
        let grid = Arc::new(make_grid(domain, &nx, config.grid.nt, config.grid.horizon).map_err(invalid)?);
        let coeffs = build_coefficients(&config.coefficients, dim)?;
        let ellipticity = coefficients::validate(&coeffs, &grid).map_err(invalid)?;
        if ellipticity.violated {
            let msgs: Vec<String> = ellipticity.violations.iter().map(|v| v.to_string()).collect();
            return Err(invalid(msgs.join("; ")));
        }
        let spec = build_spec(&config.gamma, base)?;
        let gamma = match &spec {
            Some(s) => GammaOperator::compile(s, &grid).map_err(invalid)?,
            None => GammaOperator::zero(grid.clone()),
        };
        let xi_expr = config.data.xi.expr("data.xi")?;
        let xi = SpaceField::from_fn(grid.clone(), |x| xi_expr.eval(&Env::space(x)))
            .map_err(|e| invalid(format!("data.xi: {e}")))?;
        let phi = match &config.data.phi {
            None => None,
            Some(s) => {
                let e = s.expr("data.phi")?;
                if e.constant_value() == Some(0.0) {
                    None
                } else {
                    Some(
                        SpaceTimeField::from_fn(grid.clone(), |x, t| e.eval(&Env::at(x, t)))
                            .map_err(|err| invalid(format!("data.phi: {err}")))?,
                    )
                }
            }
        };
        Ok(Problem {
            config,
            grid,
            coeffs,
            ellipticity,
            spec,
            gamma,
            xi,
            phi,
        })
    }

    /// `T - theta`, or `T` without a non-local term, unless overridden.
    pub fn theta_gap(&self) -> f64 {
        self.config.montecarlo.theta_gap.unwrap_or_else(|| {
            if self.spec.is_some() {
                self.grid.horizon() - self.gamma.report().theta
            } else {
                self.grid.horizon()
            }
        })
    }

    pub fn nu(&self) -> Result<NuBound, CliError> {
        montecarlo::analytic_nu(&self.grid, &self.coeffs, self.theta_gap()).map_err(invalid)
    }

    fn validation_json(&self) -> Value {
        let nu = self.nu().ok();
        let g = self.gamma.report();
        json!({
            "delta": self.ellipticity.delta,
            "delta_at": {"x": self.ellipticity.argmin_x, "t": self.ellipticity.argmin_t},
            "gamma": self.spec.as_ref().map(|s| s.kind()).unwrap_or("none"),
            "norm_bound": g.norm_bound,
            "theta": g.theta,
            "theta_level": g.theta_level,
            "snaps": g.snaps.iter().map(|s| json!({
                "what": s.what, "requested": s.requested, "snapped": s.snapped,
                "level": s.level, "distance": s.distance,
            })).collect::<Vec<_>>(),
            "theta_gap": self.theta_gap(),
            "nu": nu.as_ref().map(|n| n.nu),
            "sqrt_nu": nu.as_ref().map(|n| n.sqrt_nu),
        })
    }

    fn resolved_json(&self) -> Value {
        json!({
            "dim": self.grid.dim(),
            "nx": self.grid.node_counts(),
            "h": self.grid.spacing(),
            "nt": self.grid.nt(),
            "dt": self.grid.dt(),
            "T": self.grid.horizon(),
        })
    }

    fn solve_picard(&self) -> Result<NonlocalSolution, CliError> {
        let fp = &self.config.fixedpoint;
        Ok(fixedpoint::solve_nonlocal(
            &self.grid,
            &self.coeffs,
            self.phi.as_ref(),
            &self.xi,
            &self.gamma,
            fp.tol,
            fp.max_iter,
        )?)
    }
}

/// Writes via a temporary file in the same directory and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("writing {}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Io(e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn fixedpoint_json(r: &FixedPointReport, nu: Option<&NuBound>) -> Value {
    json!({
        "iterations": r.iterations,
        "residuals": r.residuals,
        "ratios": r.ratios,
        "bc_residual": r.bc_residual,
        "converged": r.converged,
        "nu_bound": nu.map(|n| n.nu),
        "sqrt_nu": nu.map(|n| n.sqrt_nu),
    })
}

fn norms_json(p: &Problem, u: &SpaceTimeField, terminal: &SpaceField, nu: Option<&NuBound>) -> Value {
    let sup_phi = p.phi.as_ref().map_or(0.0, |f| f.sup_norm());
    let t = p.grid.horizon();
    let bound = nu.map(|n| {
        let c = t + (1.0 + t) / (1.0 - n.sqrt_nu);
        json!({"C": c, "rhs": c * (sup_phi + p.xi.sup_norm()), "holds": u.sup_norm() <= c * (sup_phi + p.xi.sup_norm())})
    });
    json!({
        "sup_u": u.sup_norm(),
        "sup_terminal": terminal.sup_norm(),
        "sup_u0": u.level_sup_norms()[0],
        "sup_xi": p.xi.sup_norm(),
        "sup_phi": sup_phi,
        "solution_bound": bound,
    })
}

pub struct Run {
    command: &'static str,
    out: PathBuf,
    seed: u64,
}

impl Run {
    fn report(&self, p: &Problem, body: Value) -> Result<(), CliError> {
        let mut v = json!({
            "command": self.command,
            "config": serde_json::to_value(&p.config).map_err(|e| CliError::Io(e.to_string()))?,
            "resolved": p.resolved_json(),
            "validation": p.validation_json(),
            "sampler": montecarlo::SAMPLER,
            "seed": self.seed,
        });
        if let (Value::Object(m), Value::Object(extra)) = (&mut v, body) {
            m.extend(extra);
        }
        write_json(&self.out.join("report.json"), &v)
    }
}

/// Runs one subcommand; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("bspde {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command) -> Result<(), CliError> {
    let args = cmd.args();
    let started = Instant::now();
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.montecarlo.seed = seed;
    }
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = args
        .out
        .clone()
        .or_else(|| config.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("bspde-out"));
    let run = Run {
        command: cmd.name(),
        out: out.clone(),
        seed: config.montecarlo.seed,
    };
    let result = match cmd {
        Command::Validate(_) => cmd_validate(&run, config, &base),
        Command::Cauchy(_) => cmd_cauchy(&run, config, &base),
        Command::Solve(_) => cmd_solve(&run, config, &base),
        Command::Qmatrix(_) => cmd_qmatrix(&run, config, &base),
        Command::Mccheck(_) => cmd_mccheck(&run, config, &base),
        Command::Nubound(_) => cmd_nubound(&run, config, &base),
        Command::Converge(_) => cmd_converge(&run, config, &base),
    };
    let timing = json!({"command": cmd.name(), "seconds": started.elapsed().as_secs_f64()});
    if result.is_ok() {
        write_json(&out.join("timing.json"), &timing)?;
    }
    result
}

pub fn cmd_validate(run: &Run, config: RunConfig, base: &Path) -> Result<(), CliError> {
    let p = Problem::build(config, base)?;
    run.report(&p, json!({}))
}

pub fn cmd_cauchy(run: &Run, config: RunConfig, base: &Path) -> Result<(), CliError> {
    let p = Problem::build(config, base)?;
    let stepper = Stepper::new(p.grid.clone(), &p.coeffs).map_err(invalid)?;
    let out = stepper.solve(p.phi.as_ref(), &p.xi, p.grid.nt()).map_err(invalid)?;
    write_atomic(&run.out.join("solution.csv"), out.u.to_csv().as_bytes())?;
    let nu = montecarlo::analytic_nu(&p.grid, &p.coeffs, p.grid.horizon()).ok();
    let d = &out.diagnostics;
    run.report(
        &p,
        json!({
            "norms": norms_json(&p, &out.u, &p.xi, nu.as_ref()),
            "stepper": {
                "monotone": d.monotonicity.is_monotone(),
                "worst_offdiag": d.monotonicity.worst_offdiag,
                "min_row_sum": d.monotonicity.min_row_sum,
                "max_principle_slack": d.max_principle_slack,
                "max_linear_residual": d.max_linear_residual,
                "warnings": d.warnings,
            },
        }),
    )
}

pub fn cmd_solve(run: &Run, config: RunConfig, base: &Path) -> Result<(), CliError> {
    let p = Problem::build(config, base)?;
    let sol = p.solve_picard()?;
    let nu = p.nu().ok();
    write_atomic(&run.out.join("solution.csv"), sol.u.to_csv().as_bytes())?;
    run.report(
        &p,
        json!({
            "fixedpoint": fixedpoint_json(&sol.report, nu.as_ref()),
            "norms": norms_json(&p, &sol.u, &sol.terminal, nu.as_ref()),
        }),
    )?;
    if !sol.report.converged {
        return Err(CliError::NonConvergence(format!(
            "{} iterations without reaching tol = {}",
            sol.report.iterations, p.config.fixedpoint.tol
        )));
    }
    Ok(())
}

pub fn cmd_qmatrix(run: &Run, config: RunConfig, base: &Path) -> Result<(), CliError> {
    let p = Problem::build(config, base)?;
    let (sol, q) = fixedpoint::solve_nonlocal_direct(
        &p.grid,
        &p.coeffs,
        p.phi.as_ref(),
        &p.xi,
        &p.gamma,
        p.config.fixedpoint.q_cap,
    )?;
    let nu = p.nu().ok();
    write_atomic(&run.out.join("q_matrix.csv"), q.to_csv().as_bytes())?;
    write_atomic(&run.out.join("solution.csv"), sol.u.to_csv().as_bytes())?;
    run.report(
        &p,
        json!({
            "q_matrix": {"n": q.n, "sup_norm": q.sup_norm},
            "direct": {"bc_residual": sol.report.bc_residual},
            "norms": norms_json(&p, &sol.u, &sol.terminal, nu.as_ref()),
        }),
    )
}

fn default_points(grid: &Grid) -> Vec<Vec<f64>> {
    let d = grid.domain();
    (1..=5)
        .map(|i| {
            let mut row: Vec<f64> = (0..grid.dim()).map(|a| 0.5 * (d.lo(a) + d.hi(a))).collect();
            row[0] = d.lo(0) + i as f64 / 6.0 * (d.hi(0) - d.lo(0));
            row.push(0.0);
            row
        })
        .collect()
}

pub fn cmd_mccheck(run: &Run, config: RunConfig, base: &Path) -> Result<(), CliError> {
    let p = Problem::build(config, base)?;
    let mc = &p.config.montecarlo;
    let cfg = PathConfig::new(mc.dt, mc.n_paths, mc.seed).map_err(invalid)?;
    cfg.check_against(&p.grid).map_err(invalid)?;
    let sol = p.solve_picard()?;
    let dim = p.grid.dim();
    let rows = if mc.points.is_empty() { default_points(&p.grid) } else { mc.points.clone() };
    let points: Vec<(Vec<f64>, f64)> = rows
        .iter()
        .map(|r| {
            if r.len() != dim + 1 {
                Err(invalid(format!("montecarlo point {r:?} needs {} coordinates and a time", dim)))
            } else {
                Ok((r[..dim].to_vec(), r[dim]))
            }
        })
        .collect::<Result<_, _>>()?;
    let problem = FkProblem {
        coeffs: &p.coeffs,
        domain: p.grid.domain(),
        terminal: &sol.terminal,
        source: p.phi.as_ref(),
        horizon: p.grid.horizon(),
    };
    let table = montecarlo::mc_vs_pde_check(&problem, &sol.u, &points, &cfg).map_err(invalid)?;
    write_atomic(&run.out.join("comparison.csv"), montecarlo::comparison_csv(&table, dim).as_bytes())?;
    let flagged = table.iter().filter(|r| r.flagged).count();
    run.report(
        &p,
        json!({
            "montecarlo": {
                "dt_mc": cfg.dt_mc, "n_paths": cfg.n_paths, "seed": cfg.seed,
                "discount_sign": montecarlo::DISCOUNT_SIGN,
                "flag_rel": montecarlo::FLAG_REL,
                "flagged": flagged,
                "rows": table,
            },
            "fixedpoint": fixedpoint_json(&sol.report, p.nu().ok().as_ref()),
        }),
    )?;
    if flagged > 0 {
        return Err(invalid(format!("{flagged} of {} Monte Carlo rows disagree with the PDE", table.len())));
    }
    Ok(())
}

pub fn cmd_nubound(run: &Run, config: RunConfig, base: &Path) -> Result<(), CliError> {
    let p = Problem::build(config, base)?;
    let nu = p.nu()?;
    let v = serde_json::to_value(&nu).map_err(|e| CliError::Io(e.to_string()))?;
    write_json(&run.out.join("nu.json"), &v)?;
    run.report(&p, json!({ "nu_bound": v }))
}

/// One grid of the refinement study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementRow {
    pub level: usize,
    pub nx: Vec<usize>,
    pub h: f64,
    /// Sup difference at t = 0 to the previous grid, on the coarsest nodes.
    pub diff: Option<f64>,
    /// `log2(diff_prev / diff)`.
    pub order: Option<f64>,
}

/// Refines `h` by halving with `nt` fixed and estimates the observed order.
pub fn refinement_study(config: &RunConfig, base: &Path) -> Result<Vec<RefinementRow>, CliError> {
    let levels = config.grid.refinements.max(3);
    let coarse = Problem::build(config.clone(), base)?;
    let probe: Vec<[f64; 2]> = (0..coarse.grid.n_interior()).map(|i| coarse.grid.interior_point(i)).collect();
    let dim = coarse.grid.dim();
    let mut rows: Vec<RefinementRow> = Vec::new();
    let mut prev: Option<Vec<f64>> = None;
    for level in 0..levels {
        let factor = 1usize << level;
        let nx: Vec<usize> = config.grid.nx.iter().map(|n| (n - 1) * factor + 1).collect();
        let p = if level == 0 {
            Problem::build(config.clone(), base)?
        } else {
            Problem::build_on(config.clone(), base, Some(&nx))?
        };
        let sol = p.solve_picard()?;
        if !sol.report.converged {
            return Err(CliError::NonConvergence(format!("refinement level {level} did not converge")));
        }
        let u0 = sol.u.level_field(0);
        let vals: Vec<f64> = probe.iter().map(|x| u0.interpolate(&x[..dim])).collect();
        let diff = prev.as_ref().map(|pv| pv.iter().zip(&vals).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())));
        let order = match (rows.last().and_then(|r| r.diff), diff) {
            (Some(d0), Some(d1)) if d1 > 0.0 => Some((d0 / d1).log2()),
            _ => None,
        };
        rows.push(RefinementRow {
            level,
            nx,
            h: p.grid.h(0),
            diff,
            order,
        });
        prev = Some(vals);
    }
    Ok(rows)
}

pub fn cmd_converge(run: &Run, config: RunConfig, base: &Path) -> Result<(), CliError> {
    let rows = refinement_study(&config, base)?;
    let mut csv = String::from("level,nx,h,diff,order\n");
    for r in &rows {
        let nx: Vec<String> = r.nx.iter().map(|n| n.to_string()).collect();
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        csv.push_str(&format!("{},{},{:?},{},{}\n", r.level, nx.join("x"), r.h, opt(r.diff), opt(r.order)));
    }
    write_atomic(&run.out.join("converge.csv"), csv.as_bytes())?;
    let p = Problem::build(config, base)?;
    run.report(&p, json!({ "refinement": rows }))
}
