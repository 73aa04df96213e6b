//! Euler–Maruyama simulation of the characteristic diffusion with first-exit
//! killing, the Feynman–Kac estimator used as an independent oracle for the
//! stepper, exit probabilities, and the analytic confinement bound `nu`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::coefficients::{bounds, residual_sqrt, CoefficientError, CoefficientSet, PointCoefficients};
use crate::grid::{Domain, Grid, SpaceField, SpaceTimeField};

/// Recorded in run reports.
pub const SAMPLER: &str = "ChaCha8Rng (one stream per batch) + ziggurat StandardNormal";
/// Sign of the discount exponent: `gamma(t) = exp(DISCOUNT_SIGN * int_s^t lam)`.
pub const DISCOUNT_SIGN: f64 = 1.0;
/// Paths per independently seeded batch.
pub const BATCH: usize = 1024;
/// Target for the neglected tail of the confinement series.
pub const SERIES_TAIL: f64 = 1e-12;
const MAX_SERIES_TERMS: usize = 50_000_000;

#[derive(Debug, Error)]
pub enum McError {
    #[error("path config: {0}")]
    Config(String),
    #[error("start point {x:?} is not strictly inside the domain")]
    NotInterior { x: Vec<f64> },
    #[error("start time {s} outside [0, {horizon}]")]
    BadTime { s: f64, horizon: f64 },
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error("2b - sum beta beta^T is not positive semi-definite at x = {x:?}, t = {t}")]
    NoiseDecomposition { x: Vec<f64>, t: f64 },
    #[error("non-finite path value at t = {0}")]
    NonFinite(f64),
    #[error("confinement bound: {0}")]
    Nu(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathConfig {
    pub dt_mc: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl PathConfig {
    pub fn new(dt_mc: f64, n_paths: usize, seed: u64) -> Result<Self, McError> {
        let cfg = PathConfig { dt_mc, n_paths, seed };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), McError> {
        if !(self.dt_mc > 0.0) || !self.dt_mc.is_finite() {
            return Err(McError::Config(format!("dt_mc must be positive, got {}", self.dt_mc)));
        }
        if self.n_paths < 100 {
            return Err(McError::Config(format!("n_paths must be at least 100, got {}", self.n_paths)));
        }
        Ok(())
    }

    /// Also requires `dt_mc <= grid.dt()`.
    pub fn check_against(&self, grid: &Grid) -> Result<(), McError> {
        self.check()?;
        if self.dt_mc > grid.dt() * (1.0 + 1e-12) {
            return Err(McError::Config(format!(
                "dt_mc = {} exceeds the grid step {}",
                self.dt_mc,
                grid.dt()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    /// Paths that left the domain before the end of the simulated window.
    pub n_exited: usize,
}

/// Data for the Feynman–Kac representation of `u(x, s)`.
#[derive(Debug, Clone, Copy)]
pub struct FkProblem<'a> {
    pub coeffs: &'a CoefficientSet,
    pub domain: &'a Domain,
    pub terminal: &'a SpaceField,
    pub source: Option<&'a SpaceTimeField>,
    pub horizon: f64,
}

/// Per-step noise loading: column `j` of the `dim x m` matrix is `load[j]`.
struct Loading {
    drift: [f64; 2],
    lam: f64,
    load: Vec<[f64; 2]>,
}

fn loading(coeffs: &CoefficientSet, pc: &mut PointCoefficients, x: &[f64], t: f64) -> Result<Loading, McError> {
    coeffs.sample_into(x, t, pc)?;
    let dim = coeffs.dim();
    let s = residual_sqrt(pc, dim).ok_or_else(|| McError::NoiseDecomposition { x: x.to_vec(), t })?;
    let mut load = pc.beta.clone();
    for j in 0..dim {
        load.push([s[0][j], s[1][j]]);
    }
    Ok(Loading {
        drift: pc.f,
        lam: pc.lam,
        load,
    })
}

enum Coeffs<'a> {
    Frozen(Loading),
    Varying(&'a CoefficientSet, PointCoefficients, Loading),
}

impl<'a> Coeffs<'a> {
    fn new(coeffs: &'a CoefficientSet, x: &[f64], s: f64) -> Result<Coeffs<'a>, McError> {
        let mut pc = PointCoefficients::default();
        let first = loading(coeffs, &mut pc, x, s)?;
        if coeffs.is_constant() {
            Ok(Coeffs::Frozen(first))
        } else {
            Ok(Coeffs::Varying(coeffs, pc, first))
        }
    }

    fn at(&mut self, x: &[f64], t: f64) -> Result<&Loading, McError> {
        match self {
            Coeffs::Frozen(l) => Ok(l),
            Coeffs::Varying(c, pc, l) => {
                *l = loading(c, pc, x, t)?;
                Ok(l)
            }
        }
    }
}

/// One recorded step of a traced path.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub t: f64,
    pub y: [f64; 2],
    /// Discounted running-source integral so far.
    pub running: f64,
    pub alive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PathOutcome {
    value: f64,
    exited: bool,
}

/// Uniform step count and size covering `[s, end]` with steps `<= dt_mc`.
fn steps(s: f64, end: f64, dt_mc: f64) -> (usize, f64) {
    let span = end - s;
    if span <= 0.0 {
        return (0, 0.0);
    }
    let n = ((span / dt_mc) - 1e-9).ceil().max(1.0) as usize;
    (n, span / n as f64)
}

struct PathRun<'a, 'b> {
    dim: usize,
    domain: &'a Domain,
    coeffs: Coeffs<'b>,
    s: f64,
    n_steps: usize,
    h: f64,
}

impl PathRun<'_, '_> {
    /// Simulates one path. `source` and `terminal` give the payoff; with both
    /// absent the value is the survival indicator.
    fn run<R: Rng>(
        &mut self,
        x: &[f64],
        rng: &mut R,
        source: Option<&SpaceTimeField>,
        terminal: Option<&SpaceField>,
        mut trace: Option<&mut Vec<TracePoint>>,
    ) -> Result<PathOutcome, McError> {
        let mut y = [0.0; 2];
        y[..self.dim].copy_from_slice(&x[..self.dim]);
        let sqrt_h = self.h.sqrt();
        let mut log_gamma: f64 = 0.0;
        let mut running = 0.0;
        let mut alive = true;
        for k in 0..self.n_steps {
            let t = self.s + k as f64 * self.h;
            if !alive {
                // killed paths contribute nothing further
                if let Some(tr) = trace.as_deref_mut() {
                    tr.push(TracePoint {
                        t: t + self.h,
                        y,
                        running,
                        alive,
                    });
                    continue;
                }
                break;
            }
            let l = self.coeffs.at(&y[..self.dim], t)?;
            if let Some(src) = source {
                running += log_gamma.exp() * src.interpolate_left(&y[..self.dim], t) * self.h;
            }
            log_gamma += DISCOUNT_SIGN * l.lam * self.h;
            let mut next = y;
            for i in 0..self.dim {
                next[i] += l.drift[i] * self.h;
            }
            for col in &l.load {
                let z: f64 = rng.sample(StandardNormal);
                for i in 0..self.dim {
                    next[i] += col[i] * sqrt_h * z;
                }
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(McError::NonFinite(t + self.h));
            }
            y = next;
            if !self.domain.contains_closed(&y[..self.dim]) {
                alive = false;
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(TracePoint {
                    t: t + self.h,
                    y,
                    running,
                    alive,
                });
            }
        }
        let value = match (source, terminal) {
            (None, None) => {
                if alive {
                    1.0
                } else {
                    0.0
                }
            }
            _ => {
                let pay = match terminal {
                    Some(term) if alive => log_gamma.exp() * term.interpolate(&y[..self.dim]),
                    _ => 0.0,
                };
                running + pay
            }
        };
        Ok(PathOutcome { value, exited: !alive })
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
    exited: usize,
}

impl Moments {
    fn merge(self, o: Moments) -> Moments {
        Moments {
            n: self.n + o.n,
            sum: self.sum + o.sum,
            sum_sq: self.sum_sq + o.sum_sq,
            exited: self.exited + o.exited,
        }
    }
}

fn batch_rng(seed: u64, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch as u64);
    rng
}

struct Job<'a> {
    coeffs: &'a CoefficientSet,
    domain: &'a Domain,
    x: &'a [f64],
    s: f64,
    end: f64,
    source: Option<&'a SpaceTimeField>,
    terminal: Option<&'a SpaceField>,
}

fn run_batches(job: &Job<'_>, cfg: &PathConfig) -> Result<Moments, McError> {
    let dim = job.domain.dim();
    let (n_steps, h) = steps(job.s, job.end, cfg.dt_mc);
    let n_batches = cfg.n_paths.div_ceil(BATCH);
    let per_batch: Vec<Moments> = (0..n_batches)
        .into_par_iter()
        .map(|b| -> Result<Moments, McError> {
            let mut rng = batch_rng(cfg.seed, b);
            let mut run = PathRun {
                dim,
                domain: job.domain,
                coeffs: Coeffs::new(job.coeffs, job.x, job.s)?,
                s: job.s,
                n_steps,
                h,
            };
            let count = BATCH.min(cfg.n_paths - b * BATCH);
            let mut m = Moments::default();
            for _ in 0..count {
                let o = run.run(job.x, &mut rng, job.source, job.terminal, None)?;
                m.n += 1;
                m.sum += o.value;
                m.sum_sq += o.value * o.value;
                m.exited += o.exited as usize;
            }
            Ok(m)
        })
        .collect::<Result<_, _>>()?;
    Ok(per_batch.into_iter().fold(Moments::default(), Moments::merge))
}

fn check_start(domain: &Domain, x: &[f64], s: f64, horizon: f64) -> Result<(), McError> {
    if x.len() < domain.dim() || !domain.contains_open(x) {
        return Err(McError::NotInterior { x: x.to_vec() });
    }
    if !(0.0..=horizon).contains(&s) {
        return Err(McError::BadTime { s, horizon });
    }
    Ok(())
}

/// Feynman–Kac estimate of `u(x, s)`.
pub fn simulate_fk(problem: &FkProblem<'_>, x: &[f64], s: f64, cfg: &PathConfig) -> Result<McEstimate, McError> {
    cfg.check()?;
    check_start(problem.domain, x, s, problem.horizon)?;
    if s >= problem.horizon {
        return Ok(McEstimate {
            mean: problem.terminal.interpolate(x),
            stderr: 0.0,
            n_paths: cfg.n_paths,
            n_exited: 0,
        });
    }
    let job = Job {
        coeffs: problem.coeffs,
        domain: problem.domain,
        x,
        s,
        end: problem.horizon,
        source: problem.source,
        terminal: Some(problem.terminal),
    };
    let m = run_batches(&job, cfg)?;
    let n = m.n as f64;
    let mean = m.sum / n;
    let var = ((m.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(McEstimate {
        mean,
        stderr: (var / n).sqrt(),
        n_paths: m.n,
        n_exited: m.exited,
    })
}

/// Probability that the path started at `(x, s)` is still inside at `s + theta_gap`.
pub fn exit_probability(
    coeffs: &CoefficientSet,
    domain: &Domain,
    x: &[f64],
    s: f64,
    theta_gap: f64,
    cfg: &PathConfig,
) -> Result<McEstimate, McError> {
    cfg.check()?;
    check_start(domain, x, s, f64::INFINITY)?;
    if !(theta_gap >= 0.0) {
        return Err(McError::Config(format!("theta gap must be non-negative, got {theta_gap}")));
    }
    if theta_gap == 0.0 {
        return Ok(McEstimate {
            mean: 1.0,
            stderr: 0.0,
            n_paths: cfg.n_paths,
            n_exited: 0,
        });
    }
    let job = Job {
        coeffs,
        domain,
        x,
        s,
        end: s + theta_gap,
        source: None,
        terminal: None,
    };
    let m = run_batches(&job, cfg)?;
    let n = m.n as f64;
    let p = m.sum / n;
    Ok(McEstimate {
        mean: p,
        stderr: (p * (1.0 - p) / n).sqrt(),
        n_paths: m.n,
        n_exited: m.exited,
    })
}

/// Simulates one payoff path and records every step.
pub fn trace_path(problem: &FkProblem<'_>, x: &[f64], s: f64, cfg: &PathConfig, path: usize) -> Result<(f64, Vec<TracePoint>), McError> {
    check_start(problem.domain, x, s, problem.horizon)?;
    let (n_steps, h) = steps(s, problem.horizon, cfg.dt_mc);
    let mut rng = batch_rng(cfg.seed, path);
    let mut run = PathRun {
        dim: problem.domain.dim(),
        domain: problem.domain,
        coeffs: Coeffs::new(problem.coeffs, x, s)?,
        s,
        n_steps,
        h,
    };
    let mut trace = Vec::with_capacity(n_steps);
    let o = run.run(x, &mut rng, problem.source, Some(problem.terminal), Some(&mut trace))?;
    Ok((o.value, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuBound {
    pub d1: f64,
    pub d2: f64,
    pub k1: f64,
    pub k2: f64,
    /// `(d1 + K1, d2 + K2)`.
    pub dhat: (f64, f64),
    pub theta_gap: f64,
    pub delta_qv: f64,
    pub nu: f64,
    pub sqrt_nu: f64,
    pub terms_used: usize,
}

/// Partial sum over the first `n_terms` odd modes of the probability that a
/// standard Brownian motion from `x0` stays in `(a, b)` up to time `tau`.
pub fn confinement_series(a: f64, b: f64, x0: f64, tau: f64, n_terms: usize) -> f64 {
    let len = b - a;
    let c = PI * PI * tau / (2.0 * len * len);
    (0..n_terms)
        .map(|j| {
            let k = (2 * j + 1) as f64;
            4.0 / (k * PI) * (k * PI * (x0 - a) / len).sin() * (-k * k * c).exp()
        })
        .sum()
}

/// Bound on the neglected odd modes `k >= next`.
fn series_tail(next: f64, c: f64) -> f64 {
    let denom = 1.0 - (-4.0 * next * c).exp();
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    4.0 / (next * PI) * (-next * next * c).exp() / denom
}

/// Confinement probability with the series truncated once the tail bound
/// drops below [`SERIES_TAIL`]; returns the value and the number of terms.
pub fn confinement_probability(a: f64, b: f64, x0: f64, tau: f64) -> Result<(f64, usize), McError> {
    if !(a < x0 && x0 < b) || !(tau > 0.0) {
        return Err(McError::Nu(format!("need a < x0 < b and tau > 0, got ({a}, {b}), x0 = {x0}, tau = {tau}")));
    }
    let len = b - a;
    let c = PI * PI * tau / (2.0 * len * len);
    let mut sum = 0.0;
    for j in 0..MAX_SERIES_TERMS {
        let k = (2 * j + 1) as f64;
        sum += 4.0 / (k * PI) * (k * PI * (x0 - a) / len).sin() * (-k * k * c).exp();
        if series_tail(k + 2.0, c) <= SERIES_TAIL {
            return Ok((sum, j + 1));
        }
    }
    Err(McError::Nu(format!("series did not reach tail {SERIES_TAIL} in {MAX_SERIES_TERMS} terms")))
}

/// Upper bound `nu` on the probability that the diffusion stays in the box
/// for an extra time `theta_gap`.
pub fn analytic_nu(grid: &Grid, coeffs: &CoefficientSet, theta_gap: f64) -> Result<NuBound, McError> {
    if !(theta_gap > 0.0) || !theta_gap.is_finite() {
        return Err(McError::Nu(format!("theta gap must be positive, got {theta_gap}")));
    }
    let bd = bounds(coeffs, grid)?;
    if !(bd.delta_qv > 0.0) {
        return Err(McError::Nu(format!("quadratic-variation floor {} is not positive", bd.delta_qv)));
    }
    let (d1, d2) = (grid.domain().lo(0), grid.domain().hi(0));
    let k1 = -d2 - theta_gap * bd.sup_f1;
    let k2 = -d1 + theta_gap * bd.sup_f1;
    let dhat = (d1 + k1, d2 + k2);
    if !(dhat.0 < 0.0 && 0.0 < dhat.1) || !dhat.1.is_finite() || !dhat.0.is_finite() {
        return Err(McError::Nu(format!("shifted interval {dhat:?} does not contain 0")));
    }
    let tau = bd.delta_qv * theta_gap;
    let (p, terms_used) = confinement_probability(dhat.0, dhat.1, 0.0, tau)?;
    let nu = p.clamp(f64::MIN_POSITIVE, 1.0);
    Ok(NuBound {
        d1,
        d2,
        k1,
        k2,
        dhat,
        theta_gap,
        delta_qv: bd.delta_qv,
        nu,
        sqrt_nu: nu.sqrt(),
        terms_used,
    })
}

/// One row of an MC-vs-PDE comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub x: Vec<f64>,
    pub s: f64,
    pub pde: f64,
    pub mc: f64,
    pub stderr: f64,
    pub z: f64,
    pub flagged: bool,
}

/// Allowed gap is `3 stderr + FLAG_REL * scale` with
/// `scale = sup|Phi| + T sup|phi|`.
pub const FLAG_REL: f64 = 0.02;

/// Compares the Feynman–Kac estimate against `pde` at each `(x, s)`.
pub fn mc_vs_pde_check(
    problem: &FkProblem<'_>,
    pde: &SpaceTimeField,
    points: &[(Vec<f64>, f64)],
    cfg: &PathConfig,
) -> Result<Vec<ComparisonRow>, McError> {
    let scale = problem.terminal.sup_norm() + problem.horizon * problem.source.map_or(0.0, |p| p.sup_norm());
    points
        .iter()
        .map(|(x, s)| {
            let est = simulate_fk(problem, x, *s, cfg)?;
            let pde_v = pde.interpolate(x, *s);
            let diff = est.mean - pde_v;
            let z = if est.stderr > 0.0 {
                diff / est.stderr
            } else if diff == 0.0 {
                0.0
            } else {
                diff.signum() * f64::INFINITY
            };
            Ok(ComparisonRow {
                x: x.clone(),
                s: *s,
                pde: pde_v,
                mc: est.mean,
                stderr: est.stderr,
                z,
                flagged: diff.abs() > 3.0 * est.stderr + FLAG_REL * scale,
            })
        })
        .collect()
}

/// CSV with header `x1[,x2],s,pde,mc,stderr,z`.
pub fn comparison_csv(rows: &[ComparisonRow], dim: usize) -> String {
    let mut out = String::from(if dim == 1 { "x1,s,pde,mc,stderr,z\n" } else { "x1,x2,s,pde,mc,stderr,z\n" });
    for r in rows {
        let xs: Vec<String> = r.x[..dim].iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?}\n",
            xs.join(","),
            r.s,
            r.pde,
            r.mc,
            r.stderr,
            r.z
        ));
    }
    out
}
