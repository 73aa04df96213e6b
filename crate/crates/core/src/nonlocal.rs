//! Non-local operators `Gamma` mapping a space-time field to a space field,
//! read only on `t <= theta < T`.
//!
//! A [`NonlocalSpec`] is validated against a grid into a [`GammaOperator`]:
//! times snap to the nearest level (ties down), kernels are resampled onto
//! the levels, and the norm bound is computed with exactly the quadrature
//! weights used by [`GammaOperator::apply`], so `sup |Gamma u| <= norm_bound
//! * sup |u|` holds discretely by construction.

use std::io::Read;
use std::sync::Arc;

use thiserror::Error;

use crate::expr::{Env, EvalError, Expr};
use crate::grid::{Grid, SpaceField, SpaceTimeField};

/// Slack allowed when comparing a computed norm bound against 1.
pub const NORM_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NonlocalError {
    #[error("{what}: norm bound {value} exceeds 1")]
    NormExceeded { what: String, value: f64 },
    #[error("{what}: horizon {theta} must be strictly before the terminal time {horizon}")]
    HorizonNotBeforeTerminal { what: String, theta: f64, horizon: f64 },
    #[error("{what}: time {t} is outside [0, T)")]
    TimeOutOfRange { what: String, t: f64 },
    #[error("kernel shape: {0}")]
    KernelShape(String),
    #[error("convex combination: {0}")]
    Weights(String),
    #[error("evaluating time kernel at t = {t}: {source}")]
    KernelEval { t: f64, source: EvalError },
    #[error("field does not live on the operator's grid or is too short")]
    GridMismatch,
    #[error("kernel table: {0}")]
    Table(String),
}

/// Source of a scalar time kernel `k(t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeKernel {
    Constant(f64),
    Expr(Expr),
    /// `(t, k)` pairs, linearly interpolated, zero outside the table range.
    Table(Vec<(f64, f64)>),
}

impl TimeKernel {
    fn eval(&self, t: f64) -> Result<f64, NonlocalError> {
        match self {
            TimeKernel::Constant(v) => Ok(*v),
            TimeKernel::Expr(e) => e
                .eval(&Env {
                    t: Some(t),
                    ..Env::default()
                })
                .map_err(|source| NonlocalError::KernelEval { t, source }),
            TimeKernel::Table(rows) => Ok(interp_table(rows, t)),
        }
    }
}

fn interp_table(rows: &[(f64, f64)], t: f64) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let tol = 1e-12 * (1.0 + t.abs());
    if t < rows[0].0 - tol || t > rows[rows.len() - 1].0 + tol {
        return 0.0;
    }
    for w in rows.windows(2) {
        let ((t0, k0), (t1, k1)) = (w[0], w[1]);
        if t <= t1 + tol {
            if t1 == t0 {
                return k1;
            }
            let a = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
            return (1.0 - a) * k0 + a * k1;
        }
    }
    rows[rows.len() - 1].1
}

/// One tabulated value `k(t, y, x)` of a space-time kernel: weight of the
/// source value at `y` in the output at `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelEntry {
    pub t: f64,
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub k: f64,
}

/// Tabulated space-time kernel; missing entries are zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KernelTable {
    pub dim: usize,
    pub entries: Vec<KernelEntry>,
}

impl KernelTable {
    /// Reads CSV with header `t,x1[,x2],y1[,y2],k`.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, NonlocalError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| NonlocalError::Table(e.to_string()))?.clone();
        let names: Vec<&str> = headers.iter().collect();
        let dim = match names[..] {
            ["t", "x1", "y1", "k"] => 1,
            ["t", "x1", "x2", "y1", "y2", "k"] => 2,
            _ => {
                return Err(NonlocalError::Table(format!(
                    "expected header t,x1[,x2],y1[,y2],k, got {}",
                    names.join(",")
                )))
            }
        };
        let mut entries = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| NonlocalError::Table(e.to_string()))?;
            let vals = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| NonlocalError::Table(format!("row {}: {e}", line + 2)))?;
            if vals.len() != names.len() {
                return Err(NonlocalError::Table(format!("row {}: wrong column count", line + 2)));
            }
            let entry = if dim == 1 {
                KernelEntry {
                    t: vals[0],
                    x: [vals[1], 0.0],
                    y: [vals[2], 0.0],
                    k: vals[3],
                }
            } else {
                KernelEntry {
                    t: vals[0],
                    x: [vals[1], vals[2]],
                    y: [vals[3], vals[4]],
                    k: vals[5],
                }
            };
            entries.push(entry);
        }
        Ok(KernelTable { dim, entries })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(if self.dim == 1 { "t,x1,y1,k\n" } else { "t,x1,x2,y1,y2,k\n" });
        for e in &self.entries {
            if self.dim == 1 {
                out.push_str(&format!("{},{},{},{}\n", e.t, e.x[0], e.y[0], e.k));
            } else {
                out.push_str(&format!("{},{},{},{},{},{}\n", e.t, e.x[0], e.x[1], e.y[0], e.y[1], e.k));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NonlocalSpec {
    /// `kappa u(., 0)`.
    InitialValue { kappa: f64 },
    /// `kappa u(., t1)`.
    PointInTime { kappa: f64, t1: f64 },
    /// `alpha1 u(., t1) + alpha2 u(., t2)`.
    TwoPoint { alpha1: f64, t1: f64, alpha2: f64, t2: f64 },
    /// `int_0^theta k(t) u(., t) dt`.
    TimeKernel { theta: f64, k: TimeKernel },
    /// `int_0^theta dt int_D k(t, y, x) u(y, t) dy`.
    SpaceTimeKernel { theta: f64, table: KernelTable },
    /// `sum_i w_i Gamma_i`, `w_i > 0`, `sum w_i <= 1`.
    Convex { weights: Vec<f64>, parts: Vec<NonlocalSpec> },
}

impl NonlocalSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            NonlocalSpec::InitialValue { .. } => "initial_value",
            NonlocalSpec::PointInTime { .. } => "point_in_time",
            NonlocalSpec::TwoPoint { .. } => "two_point",
            NonlocalSpec::TimeKernel { .. } => "time_kernel",
            NonlocalSpec::SpaceTimeKernel { .. } => "space_time_kernel",
            NonlocalSpec::Convex { .. } => "convex",
        }
    }
}

/// A compiled contribution read from one time level.
#[derive(Debug, Clone, PartialEq)]
pub enum GammaTerm {
    /// `coeff * u(., level)`.
    Pointwise { level: usize, coeff: f64 },
    /// `weight * K u(., level)` with a dense `n x n` matrix, row = output node.
    Kernel {
        level: usize,
        weight: f64,
        matrix: Arc<Vec<f64>>,
    },
}

impl GammaTerm {
    fn level(&self) -> usize {
        match self {
            GammaTerm::Pointwise { level, .. } | GammaTerm::Kernel { level, .. } => *level,
        }
    }

    fn scaled(&self, c: f64) -> GammaTerm {
        match self {
            GammaTerm::Pointwise { level, coeff } => GammaTerm::Pointwise {
                level: *level,
                coeff: c * coeff,
            },
            GammaTerm::Kernel { level, weight, matrix } => GammaTerm::Kernel {
                level: *level,
                weight: c * weight,
                matrix: matrix.clone(),
            },
        }
    }
}

/// A time value that was moved onto a grid level.
#[derive(Debug, Clone, PartialEq)]
pub struct Snap {
    pub what: String,
    pub requested: f64,
    pub snapped: f64,
    pub level: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaReport {
    /// Largest time read by the operator (after snapping).
    pub theta: f64,
    pub theta_level: usize,
    /// Validated bound on the sup-norm operator norm.
    pub norm_bound: f64,
    pub snaps: Vec<Snap>,
}

/// A validated non-local operator on a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaOperator {
    grid: Arc<Grid>,
    terms: Vec<GammaTerm>,
    report: GammaReport,
}

struct Compiled {
    terms: Vec<GammaTerm>,
    theta_level: usize,
    norm: f64,
}

fn check_norm(what: &str, value: f64) -> Result<(), NonlocalError> {
    if value > 1.0 + NORM_SLACK || !value.is_finite() {
        return Err(NonlocalError::NormExceeded {
            what: what.to_string(),
            value,
        });
    }
    Ok(())
}

fn snap_before_terminal(grid: &Grid, what: &str, t: f64, snaps: &mut Vec<Snap>) -> Result<usize, NonlocalError> {
    if !(t >= 0.0) {
        return Err(NonlocalError::TimeOutOfRange { what: what.to_string(), t });
    }
    if t >= grid.horizon() {
        return Err(NonlocalError::HorizonNotBeforeTerminal {
            what: what.to_string(),
            theta: t,
            horizon: grid.horizon(),
        });
    }
    let (level, distance) = grid.snap_time(t);
    if level >= grid.nt() {
        return Err(NonlocalError::HorizonNotBeforeTerminal {
            what: format!("{what} (snapped to the terminal level)"),
            theta: grid.time(level),
            horizon: grid.horizon(),
        });
    }
    snaps.push(Snap {
        what: what.to_string(),
        requested: t,
        snapped: grid.time(level),
        level,
        distance,
    });
    Ok(level)
}

/// Trapezoid weights on levels `0..=last`.
fn trapezoid(dt: f64, last: usize) -> Vec<f64> {
    if last == 0 {
        return vec![0.0];
    }
    (0..=last)
        .map(|k| if k == 0 || k == last { 0.5 * dt } else { dt })
        .collect()
}

fn compile(spec: &NonlocalSpec, grid: &Grid, path: &str, snaps: &mut Vec<Snap>) -> Result<Compiled, NonlocalError> {
    match spec {
        NonlocalSpec::InitialValue { kappa } => {
            check_norm(&format!("{path}initial value: |kappa|"), kappa.abs())?;
            Ok(Compiled {
                terms: vec![GammaTerm::Pointwise { level: 0, coeff: *kappa }],
                theta_level: 0,
                norm: kappa.abs(),
            })
        }
        NonlocalSpec::PointInTime { kappa, t1 } => {
            check_norm(&format!("{path}point in time: |kappa|"), kappa.abs())?;
            let level = snap_before_terminal(grid, &format!("{path}t1"), *t1, snaps)?;
            Ok(Compiled {
                terms: vec![GammaTerm::Pointwise { level, coeff: *kappa }],
                theta_level: level,
                norm: kappa.abs(),
            })
        }
        NonlocalSpec::TwoPoint { alpha1, t1, alpha2, t2 } => {
            let norm = alpha1.abs() + alpha2.abs();
            check_norm(&format!("{path}two-point weights: |alpha1| + |alpha2|"), norm)?;
            let l1 = snap_before_terminal(grid, &format!("{path}t1"), *t1, snaps)?;
            let l2 = snap_before_terminal(grid, &format!("{path}t2"), *t2, snaps)?;
            Ok(Compiled {
                terms: vec![
                    GammaTerm::Pointwise { level: l1, coeff: *alpha1 },
                    GammaTerm::Pointwise { level: l2, coeff: *alpha2 },
                ],
                theta_level: l1.max(l2),
                norm,
            })
        }
        NonlocalSpec::TimeKernel { theta, k } => {
            let last = snap_before_terminal(grid, &format!("{path}theta"), *theta, snaps)?;
            let weights = trapezoid(grid.dt(), last);
            let mut terms = Vec::with_capacity(weights.len());
            let mut norm = 0.0;
            for (level, w) in weights.iter().enumerate() {
                let c = w * k.eval(grid.time(level))?;
                norm += c.abs();
                terms.push(GammaTerm::Pointwise { level, coeff: c });
            }
            check_norm(&format!("{path}time kernel: trapezoid integral of |k|"), norm)?;
            Ok(Compiled {
                terms,
                theta_level: last,
                norm,
            })
        }
        NonlocalSpec::SpaceTimeKernel { theta, table } => {
            let last = snap_before_terminal(grid, &format!("{path}theta"), *theta, snaps)?;
            compile_space_time(grid, table, last, path)
        }
        NonlocalSpec::Convex { weights, parts } => {
            if weights.len() != parts.len() || parts.is_empty() {
                return Err(NonlocalError::Weights(format!(
                    "{} weights for {} parts",
                    weights.len(),
                    parts.len()
                )));
            }
            if let Some(w) = weights.iter().find(|w| !(**w > 0.0)) {
                return Err(NonlocalError::Weights(format!("weights must be positive, got {w}")));
            }
            let total: f64 = weights.iter().sum();
            if total > 1.0 + NORM_SLACK {
                return Err(NonlocalError::Weights(format!("weights sum to {total} > 1")));
            }
            let mut out = Compiled {
                terms: Vec::new(),
                theta_level: 0,
                norm: 0.0,
            };
            for (i, (w, part)) in weights.iter().zip(parts).enumerate() {
                let c = compile(part, grid, &format!("{path}part {}: ", i + 1), snaps)?;
                out.terms.extend(c.terms.iter().map(|t| t.scaled(*w)));
                out.theta_level = out.theta_level.max(c.theta_level);
                out.norm += w * c.norm;
            }
            check_norm(&format!("{path}convex combination"), out.norm)?;
            Ok(out)
        }
    }
}

fn node_of(grid: &Grid, p: &[f64; 2], what: &str) -> Result<usize, NonlocalError> {
    let mut multi = [0usize; 2];
    for axis in 0..grid.dim() {
        let r = (p[axis] - grid.domain().lo(axis)) / grid.h(axis);
        let i = r.round();
        if (r - i).abs() > 1e-6 || i < 0.0 {
            return Err(NonlocalError::KernelShape(format!("{what} = {p:?} is not a grid node")));
        }
        multi[axis] = i as usize;
    }
    grid.interior_index(multi)
        .ok_or_else(|| NonlocalError::KernelShape(format!("{what} = {p:?} is not an interior node")))
}

fn compile_space_time(grid: &Grid, table: &KernelTable, last: usize, path: &str) -> Result<Compiled, NonlocalError> {
    if table.dim != grid.dim() {
        return Err(NonlocalError::KernelShape(format!(
            "table is {}-dimensional, grid is {}-dimensional",
            table.dim,
            grid.dim()
        )));
    }
    let n = grid.n_interior();
    let mut mats: Vec<Vec<f64>> = vec![vec![0.0; n * n]; last + 1];
    for e in &table.entries {
        if !e.k.is_finite() {
            return Err(NonlocalError::KernelShape(format!("non-finite kernel value at t = {}", e.t)));
        }
        let (level, dist) = grid.snap_time(e.t);
        if dist > 1e-9 * grid.dt().max(1.0) {
            return Err(NonlocalError::KernelShape(format!("t = {} is not a grid time level", e.t)));
        }
        if level > last {
            if e.k != 0.0 {
                return Err(NonlocalError::KernelShape(format!(
                    "nonzero kernel at t = {} beyond theta = {}",
                    e.t,
                    grid.time(last)
                )));
            }
            continue;
        }
        let xi = node_of(grid, &e.x, "x")?;
        let yi = node_of(grid, &e.y, "y")?;
        mats[level][xi * n + yi] = e.k;
    }
    let weights = trapezoid(grid.dt(), last);
    let vol = grid.cell_volume();
    // row-wise quadrature of |k| over (t, y), maximised over the output node x
    let mut row_mass = vec![0.0; n];
    for (level, m) in mats.iter().enumerate() {
        let w = weights[level] * vol;
        for x in 0..n {
            row_mass[x] += w * m[x * n..(x + 1) * n].iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    let norm = row_mass.iter().fold(0.0f64, |a, &b| a.max(b));
    check_norm(&format!("{path}space-time kernel: max_x int int |k| dy dt"), norm)?;
    let terms = mats
        .into_iter()
        .enumerate()
        .filter(|(_, m)| m.iter().any(|v| *v != 0.0))
        .map(|(level, m)| GammaTerm::Kernel {
            level,
            weight: weights[level] * vol,
            matrix: Arc::new(m),
        })
        .collect();
    Ok(Compiled {
        terms,
        theta_level: last,
        norm,
    })
}

/// Validates `spec` on `grid`.
pub fn validate_spec(spec: &NonlocalSpec, grid: &Arc<Grid>) -> Result<GammaOperator, NonlocalError> {
    GammaOperator::compile(spec, grid)
}

impl GammaOperator {
    pub fn compile(spec: &NonlocalSpec, grid: &Arc<Grid>) -> Result<Self, NonlocalError> {
        let mut snaps = Vec::new();
        let c = compile(spec, grid, "", &mut snaps)?;
        Ok(GammaOperator {
            grid: grid.clone(),
            terms: c.terms,
            report: GammaReport {
                theta: grid.time(c.theta_level),
                theta_level: c.theta_level,
                norm_bound: c.norm,
                snaps,
            },
        })
    }

    /// Operator from raw terms, skipping validation. `theta_level` is taken
    /// as given, so the truncation property may fail.
    pub fn from_terms_unchecked(grid: Arc<Grid>, terms: Vec<GammaTerm>, theta_level: usize) -> Self {
        let n = grid.n_interior();
        let mut point = 0.0;
        let mut rows = vec![0.0; n];
        for t in &terms {
            match t {
                GammaTerm::Pointwise { coeff, .. } => point += coeff.abs(),
                GammaTerm::Kernel { weight, matrix, .. } => {
                    for (x, r) in rows.iter_mut().enumerate() {
                        *r += weight.abs() * matrix[x * n..(x + 1) * n].iter().map(|v| v.abs()).sum::<f64>();
                    }
                }
            }
        }
        let norm_bound = point + rows.iter().fold(0.0f64, |a, &b| a.max(b));
        GammaOperator {
            report: GammaReport {
                theta: grid.time(theta_level),
                theta_level,
                norm_bound,
                snaps: Vec::new(),
            },
            grid,
            terms,
        }
    }

    /// The zero operator (plain terminal-value problem).
    pub fn zero(grid: Arc<Grid>) -> Self {
        Self::from_terms_unchecked(grid, Vec::new(), 0)
    }

    pub fn report(&self) -> &GammaReport {
        &self.report
    }

    pub fn terms(&self) -> &[GammaTerm] {
        &self.terms
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn norm_bound(&self) -> f64 {
        self.report.norm_bound
    }

    pub fn theta_level(&self) -> usize {
        self.report.theta_level
    }

    /// Largest level any term reads.
    pub fn max_level_read(&self) -> usize {
        self.terms.iter().map(GammaTerm::level).max().unwrap_or(0)
    }

    pub fn apply(&self, u: &SpaceTimeField) -> Result<SpaceField, NonlocalError> {
        if **u.grid() != *self.grid || u.n_levels() <= self.max_level_read() {
            return Err(NonlocalError::GridMismatch);
        }
        let n = self.grid.n_interior();
        let mut out = vec![0.0; n];
        for term in &self.terms {
            match term {
                GammaTerm::Pointwise { level, coeff } => {
                    for (o, v) in out.iter_mut().zip(u.level(*level)) {
                        *o += coeff * v;
                    }
                }
                GammaTerm::Kernel { level, weight, matrix } => {
                    let src = u.level(*level);
                    for (x, o) in out.iter_mut().enumerate() {
                        let row = &matrix[x * n..(x + 1) * n];
                        let acc: f64 = row.iter().zip(src).map(|(k, v)| k * v).sum();
                        *o += weight * acc;
                    }
                }
            }
        }
        Ok(SpaceField::from_values(self.grid.clone(), out).expect("finite inputs give finite output"))
    }

    /// True iff the operator ignores every level after its horizon on `u`.
    pub fn truncation_check(&self, u: &SpaceTimeField) -> bool {
        let cut = u.truncated_after(self.report.theta_level);
        match (self.apply(u), self.apply(&cut)) {
            (Ok(a), Ok(b)) => a.values() == b.values(),
            _ => false,
        }
    }
}

pub fn apply_gamma(op: &GammaOperator, u: &SpaceTimeField) -> Result<SpaceField, NonlocalError> {
    op.apply(u)
}

pub fn truncation_check(op: &GammaOperator, u: &SpaceTimeField) -> bool {
    op.truncation_check(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, Domain};

    fn grid(nx: usize, nt: usize) -> Arc<Grid> {
        Arc::new(make_grid(Domain::interval(0.0, 1.0).unwrap(), &[nx], nt, 1.0).unwrap())
    }

    fn ramp(g: &Arc<Grid>) -> SpaceTimeField {
        SpaceTimeField::from_fn(g.clone(), |x, t| Ok::<_, ()>(x[0] + 10.0 * t)).unwrap()
    }

    #[test]
    fn two_point_weights_over_one_are_rejected() {
        let g = grid(11, 10);
        let spec = NonlocalSpec::TwoPoint {
            alpha1: 0.7,
            t1: 0.2,
            alpha2: 0.4,
            t2: 0.5,
        };
        match validate_spec(&spec, &g) {
            Err(NonlocalError::NormExceeded { value, .. }) => assert!((value - 1.1).abs() < 1e-15),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_time_kernel_has_unit_norm() {
        let g = grid(11, 10);
        let spec = NonlocalSpec::TimeKernel {
            theta: 0.5,
            k: TimeKernel::Constant(2.0),
        };
        let op = validate_spec(&spec, &g).unwrap();
        assert!((op.norm_bound() - 1.0).abs() < 1e-14);
        assert_eq!(op.theta_level(), 5);
    }

    #[test]
    fn point_at_terminal_time_is_rejected() {
        let g = grid(11, 10);
        let spec = NonlocalSpec::PointInTime { kappa: 0.5, t1: 1.0 };
        assert!(matches!(validate_spec(&spec, &g), Err(NonlocalError::HorizonNotBeforeTerminal { .. })));
        // snaps onto the terminal level
        let spec = NonlocalSpec::PointInTime { kappa: 0.5, t1: 0.97 };
        assert!(matches!(validate_spec(&spec, &g), Err(NonlocalError::HorizonNotBeforeTerminal { .. })));
        let spec = NonlocalSpec::InitialValue { kappa: 1.5 };
        assert!(matches!(validate_spec(&spec, &g), Err(NonlocalError::NormExceeded { .. })));
    }

    #[test]
    fn snaps_are_reported() {
        let g = grid(11, 10);
        let op = validate_spec(&NonlocalSpec::PointInTime { kappa: 0.5, t1: 0.33 }, &g).unwrap();
        let s = &op.report().snaps[0];
        assert_eq!(s.level, 3);
        assert!((s.distance - 0.03).abs() < 1e-12);
        // tie rounds down
        let op = validate_spec(&NonlocalSpec::PointInTime { kappa: 0.5, t1: 0.25 }, &g).unwrap();
        assert_eq!(op.theta_level(), 2);
    }

    #[test]
    fn initial_value_reads_level_zero() {
        let g = grid(11, 10);
        let u = ramp(&g);
        let op = validate_spec(&NonlocalSpec::InitialValue { kappa: 1.0 }, &g).unwrap();
        assert_eq!(op.apply(&u).unwrap().values(), u.level(0));
    }

    #[test]
    fn averaging_kernel_reproduces_time_constant_fields() {
        let g = grid(11, 10);
        let u = SpaceTimeField::from_fn(g.clone(), |x, _| Ok::<_, ()>(x[0] * x[0])).unwrap();
        let theta = 0.6;
        let op = validate_spec(
            &NonlocalSpec::TimeKernel {
                theta,
                k: TimeKernel::Constant(1.0 / theta),
            },
            &g,
        )
        .unwrap();
        let got = op.apply(&u).unwrap();
        for (a, b) in got.values().iter().zip(u.level(0)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn convex_combination_of_equal_parts() {
        let g = grid(11, 10);
        let u = ramp(&g);
        let single = validate_spec(&NonlocalSpec::InitialValue { kappa: 1.0 }, &g).unwrap();
        let spec = NonlocalSpec::Convex {
            weights: vec![0.5, 0.5],
            parts: vec![NonlocalSpec::InitialValue { kappa: 1.0 }, NonlocalSpec::InitialValue { kappa: 1.0 }],
        };
        let combo = validate_spec(&spec, &g).unwrap();
        assert_eq!(combo.apply(&u).unwrap(), single.apply(&u).unwrap());
        assert_eq!(combo.norm_bound(), 1.0);
        let bad = NonlocalSpec::Convex {
            weights: vec![0.7, 0.5],
            parts: vec![NonlocalSpec::InitialValue { kappa: 1.0 }, NonlocalSpec::InitialValue { kappa: 1.0 }],
        };
        assert!(matches!(validate_spec(&bad, &g), Err(NonlocalError::Weights(_))));
    }

    #[test]
    fn space_time_kernel_from_csv() {
        let g = grid(5, 4);
        // one output node reading two sources at t = 0 and t = 0.25
        let csv = "t,x1,y1,k\n0,0.5,0.25,4\n0.25,0.5,0.75,4\n0.75,0.5,0.5,0\n";
        let table = KernelTable::from_csv(csv.as_bytes()).unwrap();
        let op = validate_spec(&NonlocalSpec::SpaceTimeKernel { theta: 0.25, table }, &g).unwrap();
        // trapezoid weights 0.125 at both ends, cell volume 0.25: 2 * 0.125 * 0.25 * 4
        assert!((op.norm_bound() - 0.25).abs() < 1e-15);
        let u = ramp(&g);
        let got = op.apply(&u).unwrap();
        let want = 0.125 * 0.25 * 4.0 * (u.level(0)[0] + u.level(1)[2]);
        assert!((got.values()[1] - want).abs() < 1e-15);
        assert_eq!(got.values()[0], 0.0);

        let beyond = KernelTable::from_csv("t,x1,y1,k\n0.75,0.5,0.5,1\n".as_bytes()).unwrap();
        assert!(matches!(
            validate_spec(&NonlocalSpec::SpaceTimeKernel { theta: 0.25, table: beyond }, &g),
            Err(NonlocalError::KernelShape(_))
        ));
        let off = KernelTable::from_csv("t,x1,y1,k\n0,0.3,0.5,1\n".as_bytes()).unwrap();
        assert!(validate_spec(&NonlocalSpec::SpaceTimeKernel { theta: 0.25, table: off }, &g).is_err());
        assert!(KernelTable::from_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn kernel_table_csv_roundtrip() {
        let table = KernelTable {
            dim: 2,
            entries: vec![KernelEntry {
                t: 0.1,
                x: [0.25, 0.5],
                y: [0.75, 0.5],
                k: -2.5,
            }],
        };
        assert_eq!(KernelTable::from_csv(table.to_csv().as_bytes()).unwrap(), table);
    }

    #[test]
    fn truncation_detects_reads_beyond_theta() {
        let g = grid(11, 10);
        let u = ramp(&g);
        let op = validate_spec(&NonlocalSpec::TwoPoint { alpha1: 0.3, t1: 0.1, alpha2: -0.6, t2: 0.7 }, &g).unwrap();
        assert!(op.truncation_check(&u));
        let liar = GammaOperator::from_terms_unchecked(g.clone(), vec![GammaTerm::Pointwise { level: 6, coeff: 0.5 }], 3);
        assert!(!liar.truncation_check(&u));
        let init = validate_spec(&NonlocalSpec::InitialValue { kappa: 0.9 }, &g).unwrap();
        assert!(init.truncation_check(&u.truncated_after(0)));
    }

    #[test]
    fn time_kernel_from_expression_and_table() {
        let g = grid(11, 10);
        let e = crate::expr::parse("2*t").unwrap();
        let op = validate_spec(&NonlocalSpec::TimeKernel { theta: 0.5, k: TimeKernel::Expr(e) }, &g).unwrap();
        // trapezoid of 2t on [0, 0.5] is exact: 0.25
        assert!((op.norm_bound() - 0.25).abs() < 1e-15);
        let tab = TimeKernel::Table(vec![(0.0, 0.0), (0.5, 1.0)]);
        let op2 = validate_spec(&NonlocalSpec::TimeKernel { theta: 0.5, k: tab }, &g).unwrap();
        assert!((op2.norm_bound() - 0.25).abs() < 1e-15);
    }
}
