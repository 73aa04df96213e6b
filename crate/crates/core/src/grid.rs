//! Uniform space-time grids over axis-aligned boxes, interior-only fields and
//! the discrete norms used throughout the solver.
//!
//! Fields store values at interior nodes only. The homogeneous Dirichlet wall
//! is structural: any lookup that lands on a boundary node reads `0.0`.
//! Interior nodes are ordered lexicographically with the first axis slowest.

use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("domain dimension must be 1 or 2, got {0}")]
    BadDimension(usize),
    #[error("degenerate domain on axis {axis}: lo = {lo}, hi = {hi}")]
    Degenerate { axis: usize, lo: f64, hi: f64 },
    #[error("need at least 3 nodes per axis, axis {axis} has {nodes}")]
    TooFewNodes { axis: usize, nodes: usize },
    #[error("need at least one time step")]
    NoTimeSteps,
    #[error("time horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("refinement factor must be at least 2, got {0}")]
    BadFactor(usize),
    #[error("field does not live on this grid")]
    GridMismatch,
    #[error("expected {expected} values, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("non-finite field value at index {0}")]
    NonFinite(usize),
}

/// Axis-aligned box `(lo_1, hi_1) x ... x (lo_n, hi_n)` with `n` in {1, 2}.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    dim: usize,
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Domain {
    pub fn new(lo: &[f64], hi: &[f64]) -> Result<Self, GridError> {
        if lo.len() != hi.len() || lo.is_empty() || lo.len() > 2 {
            return Err(GridError::BadDimension(lo.len().max(hi.len())));
        }
        let mut d = Domain {
            dim: lo.len(),
            lo: [0.0; 2],
            hi: [0.0; 2],
        };
        for axis in 0..lo.len() {
            let (a, b) = (lo[axis], hi[axis]);
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(GridError::Degenerate { axis, lo: a, hi: b });
            }
            d.lo[axis] = a;
            d.hi[axis] = b;
        }
        Ok(d)
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self, GridError> {
        Self::new(&[lo], &[hi])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lo(&self, axis: usize) -> f64 {
        self.lo[axis]
    }

    pub fn hi(&self, axis: usize) -> f64 {
        self.hi[axis]
    }

    pub fn lo_slice(&self) -> &[f64] {
        &self.lo[..self.dim]
    }

    pub fn hi_slice(&self) -> &[f64] {
        &self.hi[..self.dim]
    }

    /// True when `x` lies in the open box.
    pub fn contains_open(&self, x: &[f64]) -> bool {
        (0..self.dim).all(|a| x[a] > self.lo[a] && x[a] < self.hi[a])
    }

    /// True when `x` lies in the closed box.
    pub fn contains_closed(&self, x: &[f64]) -> bool {
        (0..self.dim).all(|a| x[a] >= self.lo[a] && x[a] <= self.hi[a])
    }
}

/// Uniform tensor grid on `domain x [0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    domain: Domain,
    nodes: [usize; 2],
    nt: usize,
    horizon: f64,
    dt: f64,
    h: [f64; 2],
}

/// Builds a uniform grid with `nx[axis]` nodes per axis (boundary included)
/// and `nt` time steps on `[0, horizon]`.
pub fn make_grid(domain: Domain, nx: &[usize], nt: usize, horizon: f64) -> Result<Grid, GridError> {
    Grid::new(domain, nx, nt, horizon)
}

impl Grid {
    pub fn new(domain: Domain, nx: &[usize], nt: usize, horizon: f64) -> Result<Self, GridError> {
        if nx.len() != domain.dim() {
            return Err(GridError::BadDimension(nx.len()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(GridError::BadHorizon(horizon));
        }
        if nt == 0 {
            return Err(GridError::NoTimeSteps);
        }
        let mut nodes = [1usize; 2];
        let mut h = [0.0; 2];
        for (axis, &n) in nx.iter().enumerate() {
            if n < 3 {
                return Err(GridError::TooFewNodes { axis, nodes: n });
            }
            nodes[axis] = n;
            h[axis] = (domain.hi(axis) - domain.lo(axis)) / (n - 1) as f64;
        }
        Ok(Grid {
            domain,
            nodes,
            nt,
            horizon,
            dt: horizon / nt as f64,
            h,
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Node count along `axis`, boundary nodes included.
    pub fn nodes(&self, axis: usize) -> usize {
        self.nodes[axis]
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.nodes[..self.dim()].to_vec()
    }

    /// Interior node count along `axis`.
    pub fn interior(&self, axis: usize) -> usize {
        if axis < self.dim() {
            self.nodes[axis] - 2
        } else {
            1
        }
    }

    /// Total interior node count.
    pub fn n_interior(&self) -> usize {
        (0..self.dim()).map(|a| self.interior(a)).product()
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn h(&self, axis: usize) -> f64 {
        self.h[axis]
    }

    pub fn spacing(&self) -> Vec<f64> {
        self.h[..self.dim()].to_vec()
    }

    /// Volume of one grid cell, the quadrature weight of an interior node.
    pub fn cell_volume(&self) -> f64 {
        self.h[..self.dim()].iter().product()
    }

    /// Time of level `k`; level `nt` reads exactly `T`.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.nt {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    /// Nearest time level to `t`, ties rounding down, clamped to `[0, nt]`.
    /// Returns the level and the snap distance.
    pub fn snap_time(&self, t: f64) -> (usize, f64) {
        let r = (t / self.dt).max(0.0);
        let fl = r.floor();
        let level = if r - fl > 0.5 { fl + 1.0 } else { fl };
        let level = (level as usize).min(self.nt);
        (level, (t - self.time(level)).abs())
    }

    /// Coordinate of full-grid node `i` (0 and `nodes-1` are the walls).
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        if i + 1 == self.nodes[axis] {
            self.domain.hi(axis)
        } else {
            self.domain.lo(axis) + i as f64 * self.h[axis]
        }
    }

    /// Full-grid multi-index (per axis, boundary-inclusive) of interior index `idx`.
    pub fn interior_multi_index(&self, idx: usize) -> [usize; 2] {
        if self.dim() == 1 {
            [idx + 1, 0]
        } else {
            let n2 = self.interior(1);
            [idx / n2 + 1, idx % n2 + 1]
        }
    }

    /// Interior index from a boundary-inclusive multi-index, `None` on the wall.
    pub fn interior_index(&self, multi: [usize; 2]) -> Option<usize> {
        for axis in 0..self.dim() {
            if multi[axis] == 0 || multi[axis] + 1 >= self.nodes[axis] {
                return None;
            }
        }
        Some(if self.dim() == 1 {
            multi[0] - 1
        } else {
            (multi[0] - 1) * self.interior(1) + (multi[1] - 1)
        })
    }

    /// Coordinates of interior node `idx`.
    pub fn interior_point(&self, idx: usize) -> [f64; 2] {
        let m = self.interior_multi_index(idx);
        let mut p = [0.0; 2];
        for (axis, pa) in p.iter_mut().enumerate().take(self.dim()) {
            *pa = self.coord(axis, m[axis]);
        }
        p
    }

    /// Iterates every node of the closed grid: `(point, is_boundary)`.
    pub fn all_nodes(&self) -> impl Iterator<Item = ([f64; 2], bool)> + '_ {
        let n1 = self.nodes[0];
        let n2 = if self.dim() == 2 { self.nodes[1] } else { 1 };
        (0..n1).flat_map(move |i| {
            (0..n2).map(move |j| {
                let mut p = [self.coord(0, i), 0.0];
                let mut boundary = i == 0 || i + 1 == n1;
                if self.dim() == 2 {
                    p[1] = self.coord(1, j);
                    boundary |= j == 0 || j + 1 == n2;
                }
                (p, boundary)
            })
        })
    }
}

/// Values at the interior nodes of a grid at a single time.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl SpaceField {
    pub fn zeros(grid: Arc<Grid>) -> Self {
        let n = grid.n_interior();
        SpaceField {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.n_interior() {
            return Err(GridError::WrongLength {
                expected: grid.n_interior(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(SpaceField { grid, values })
    }

    /// Samples `f` at every interior node.
    pub fn from_fn<E>(grid: Arc<Grid>, mut f: impl FnMut(&[f64]) -> Result<f64, E>) -> Result<Self, E> {
        let dim = grid.dim();
        let values = (0..grid.n_interior())
            .map(|i| f(&grid.interior_point(i)[..dim]))
            .collect::<Result<Vec<_>, E>>()?;
        Ok(SpaceField { grid, values })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sup_norm(&self) -> f64 {
        sup(&self.values)
    }

    pub fn weighted_l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    /// Value at an arbitrary point by multilinear interpolation, zero walls.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        interpolate_level(&self.grid, &self.values, x)
    }

    /// `self - other`, both on the same grid.
    pub fn sub(&self, other: &SpaceField) -> Result<SpaceField, GridError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &SpaceField) -> Result<SpaceField, GridError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, c: f64) -> SpaceField {
        SpaceField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    fn zip_with(&self, other: &SpaceField, op: impl Fn(f64, f64) -> f64) -> Result<SpaceField, GridError> {
        if self.grid != other.grid {
            return Err(GridError::GridMismatch);
        }
        Ok(SpaceField {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| op(a, b)).collect(),
        })
    }
}

/// One [`SpaceField`] per time level `0..=last`, all on one grid.
///
/// Solutions on a sub-horizon `[0, s]` store only `s + 1` levels.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    grid: Arc<Grid>,
    levels: Vec<Vec<f64>>,
}

impl SpaceTimeField {
    /// All-zero field on levels `0..=nt`.
    pub fn zeros(grid: Arc<Grid>) -> Self {
        let n_levels = grid.nt() + 1;
        Self::zeros_levels(grid, n_levels)
    }

    pub fn zeros_levels(grid: Arc<Grid>, n_levels: usize) -> Self {
        let n = grid.n_interior();
        SpaceTimeField {
            grid,
            levels: vec![vec![0.0; n]; n_levels],
        }
    }

    pub fn from_levels(grid: Arc<Grid>, levels: Vec<Vec<f64>>) -> Result<Self, GridError> {
        if levels.is_empty() || levels.len() > grid.nt() + 1 {
            return Err(GridError::WrongLength {
                expected: grid.nt() + 1,
                got: levels.len(),
            });
        }
        for level in &levels {
            if level.len() != grid.n_interior() {
                return Err(GridError::WrongLength {
                    expected: grid.n_interior(),
                    got: level.len(),
                });
            }
            if let Some(i) = level.iter().position(|v| !v.is_finite()) {
                return Err(GridError::NonFinite(i));
            }
        }
        Ok(SpaceTimeField { grid, levels })
    }

    /// Samples `f(x, t)` at every interior node and every level `0..=nt`.
    pub fn from_fn<E>(grid: Arc<Grid>, mut f: impl FnMut(&[f64], f64) -> Result<f64, E>) -> Result<Self, E> {
        let dim = grid.dim();
        let mut levels = Vec::with_capacity(grid.nt() + 1);
        for k in 0..=grid.nt() {
            let t = grid.time(k);
            let level = (0..grid.n_interior())
                .map(|i| f(&grid.interior_point(i)[..dim], t))
                .collect::<Result<Vec<_>, E>>()?;
            levels.push(level);
        }
        Ok(SpaceTimeField { grid, levels })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.levels[k]
    }

    pub fn level_field(&self, k: usize) -> SpaceField {
        SpaceField {
            grid: self.grid.clone(),
            values: self.levels[k].clone(),
        }
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn sup_norm(&self) -> f64 {
        self.levels.iter().map(|l| sup(l)).fold(0.0, f64::max)
    }

    /// Sup norm of each level.
    pub fn level_sup_norms(&self) -> Vec<f64> {
        self.levels.iter().map(|l| sup(l)).collect()
    }

    /// `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &SpaceTimeField, b: f64) -> Result<SpaceTimeField, GridError> {
        if self.grid != other.grid || self.levels.len() != other.levels.len() {
            return Err(GridError::GridMismatch);
        }
        let levels = self
            .levels
            .iter()
            .zip(&other.levels)
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| a * p + b * q).collect())
            .collect();
        Ok(SpaceTimeField {
            grid: self.grid.clone(),
            levels,
        })
    }

    /// Copy with every level strictly after `level` set to zero.
    pub fn truncated_after(&self, level: usize) -> SpaceTimeField {
        let mut out = self.clone();
        for (k, l) in out.levels.iter_mut().enumerate() {
            if k > level {
                l.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        out
    }

    /// Value at `(x, t)`: multilinear in space, linear between time levels.
    pub fn interpolate(&self, x: &[f64], t: f64) -> f64 {
        let last = self.levels.len() - 1;
        let r = (t / self.grid.dt()).clamp(0.0, last as f64);
        let k = (r.floor() as usize).min(last);
        let w = r - k as f64;
        let a = interpolate_level(&self.grid, &self.levels[k], x);
        if k == last || w == 0.0 {
            a
        } else {
            let b = interpolate_level(&self.grid, &self.levels[k + 1], x);
            (1.0 - w) * a + w * b
        }
    }

    /// Value at `(x, t)`: multilinear in space, left-constant in time
    /// (the level at or before `t`).
    pub fn interpolate_left(&self, x: &[f64], t: f64) -> f64 {
        let last = self.levels.len() - 1;
        let r = (t / self.grid.dt()).max(0.0);
        // absorb rounding so that t = k*dt maps to level k
        let k = ((r + 1e-9).floor() as usize).min(last);
        interpolate_level(&self.grid, &self.levels[k], x)
    }

    /// CSV dump with header `t,x1[,x2],u`, time-major then lexicographic node order.
    pub fn to_csv(&self) -> String {
        let dim = self.grid.dim();
        let mut out = String::new();
        out.push_str(if dim == 1 { "t,x1,u\n" } else { "t,x1,x2,u\n" });
        for (k, level) in self.levels.iter().enumerate() {
            let t = self.grid.time(k);
            for (i, v) in level.iter().enumerate() {
                let p = self.grid.interior_point(i);
                if dim == 1 {
                    let _ = writeln!(out, "{},{},{}", t, p[0], v);
                } else {
                    let _ = writeln!(out, "{},{},{},{}", t, p[0], p[1], v);
                }
            }
        }
        out
    }
}

fn sup(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Sup norm of a space field.
pub fn sup_norm(f: &SpaceField) -> f64 {
    f.sup_norm()
}

/// Sup norm over all stored levels of a space-time field.
pub fn sup_norm_st(f: &SpaceTimeField) -> f64 {
    f.sup_norm()
}

/// `sqrt(sum v^2 * cell volume)`, the discrete L2 norm on the box.
pub fn weighted_l2_norm(f: &SpaceField) -> f64 {
    f.weighted_l2_norm()
}

fn node_value(grid: &Grid, values: &[f64], i: usize, j: usize) -> f64 {
    match grid.interior_index([i, j]) {
        Some(idx) => values[idx],
        None => 0.0,
    }
}

/// Cell index and local coordinate in `[0, 1]` of `x` along `axis`.
fn locate(grid: &Grid, axis: usize, x: f64) -> (usize, f64) {
    let n = grid.nodes(axis);
    let r = ((x - grid.domain().lo(axis)) / grid.h(axis)).clamp(0.0, (n - 1) as f64);
    let c = (r.floor() as usize).min(n - 2);
    (c, r - c as f64)
}

pub(crate) fn interpolate_level(grid: &Grid, values: &[f64], x: &[f64]) -> f64 {
    if !grid.domain().contains_open(x) {
        return 0.0;
    }
    let (i, wx) = locate(grid, 0, x[0]);
    if grid.dim() == 1 {
        let a = node_value(grid, values, i, 0);
        let b = node_value(grid, values, i + 1, 0);
        return (1.0 - wx) * a + wx * b;
    }
    let (j, wy) = locate(grid, 1, x[1]);
    let v00 = node_value(grid, values, i, j);
    let v10 = node_value(grid, values, i + 1, j);
    let v01 = node_value(grid, values, i, j + 1);
    let v11 = node_value(grid, values, i + 1, j + 1);
    (1.0 - wx) * ((1.0 - wy) * v00 + wy * v01) + wx * ((1.0 - wy) * v10 + wy * v11)
}

/// Linear interpolation onto a grid with `(nx-1)*factor+1` nodes per axis and
/// `nt*factor` steps.
pub fn refine(f: &SpaceTimeField, factor: usize) -> Result<SpaceTimeField, GridError> {
    if factor < 2 {
        return Err(GridError::BadFactor(factor));
    }
    let g = f.grid();
    let nx: Vec<usize> = (0..g.dim()).map(|a| (g.nodes(a) - 1) * factor + 1).collect();
    let fine = Arc::new(Grid::new(g.domain().clone(), &nx, g.nt() * factor, g.horizon())?);
    let n_levels = (f.n_levels() - 1) * factor + 1;
    let dim = fine.dim();
    let mut levels = Vec::with_capacity(n_levels);
    for k in 0..n_levels {
        let coarse = k / factor;
        let w = (k % factor) as f64 / factor as f64;
        let level: Vec<f64> = (0..fine.n_interior())
            .map(|i| {
                let p = fine.interior_point(i);
                let a = interpolate_level(g, f.level(coarse), &p[..dim]);
                if w == 0.0 {
                    a
                } else {
                    let b = interpolate_level(g, f.level(coarse + 1), &p[..dim]);
                    (1.0 - w) * a + w * b
                }
            })
            .collect();
        levels.push(level);
    }
    Ok(SpaceTimeField { grid: fine, levels })
}
