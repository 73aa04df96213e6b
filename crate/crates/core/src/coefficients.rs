//! Operator data `b, f, lam, beta_i` and its validation.
//!
//! The generator acting on a test function `v` is
//! `sum_ij b_ij d_i d_j v + sum_i f_i d_i v + lam v`, and the noise
//! directions `beta_i` enter through the ellipticity margin
//! `min eig(b - 1/2 sum_i beta_i beta_i^T)`.

use std::fmt;

use thiserror::Error;

use crate::expr::{self, Env, EvalError, Expr, Var};
use crate::grid::Grid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoefficientError {
    #[error("coefficient shape: {0}")]
    Shape(String),
    #[error("cannot parse coefficient {entry}: {source}")]
    Parse { entry: String, source: expr::ParseError },
    #[error("evaluating {entry} at x = {x:?}, t = {t}: {source}")]
    Eval {
        entry: String,
        x: Vec<f64>,
        t: f64,
        source: EvalError,
    },
    #[error("diffusion residual 2b - sum beta beta^T is not positive definite at x = {x:?}, t = {t} (min eigenvalue {min_eig})")]
    NotPositiveDefinite { x: Vec<f64>, t: f64, min_eig: f64 },
}

/// A coefficient entry: a number or an expression in `x1, x2, t`.
#[derive(Debug, Clone, PartialEq)]
pub enum Coef {
    Const(f64),
    Expr(Expr),
}

impl Coef {
    /// Parses an expression, folding variable-free ones into constants.
    pub fn parse(text: &str) -> Result<Coef, expr::ParseError> {
        let e = expr::parse(text)?;
        Ok(match e.constant_value() {
            Some(v) => Coef::Const(v),
            None => Coef::Expr(e),
        })
    }

    pub fn eval(&self, env: &Env) -> Result<f64, EvalError> {
        match self {
            Coef::Const(v) => Ok(*v),
            Coef::Expr(e) => e.eval(env),
        }
    }

    pub fn is_const(&self) -> bool {
        matches!(self, Coef::Const(_))
    }

    pub fn uses_time(&self) -> bool {
        match self {
            Coef::Const(_) => false,
            Coef::Expr(e) => e.uses(Var::T),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Coef::Const(v) if *v == 0.0)
    }
}

impl From<f64> for Coef {
    fn from(v: f64) -> Self {
        Coef::Const(v)
    }
}

impl fmt::Display for Coef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coef::Const(v) => write!(f, "{v}"),
            Coef::Expr(e) => write!(f, "{e}"),
        }
    }
}

/// Coefficient values at one point `(x, t)`. Entries beyond `dim` are zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCoefficients {
    pub b: [[f64; 2]; 2],
    pub f: [f64; 2],
    pub lam: f64,
    pub beta: Vec<[f64; 2]>,
}

impl PointCoefficients {
    /// `b - 1/2 sum beta beta^T`.
    pub fn reduced_diffusion(&self) -> [[f64; 2]; 2] {
        let mut m = self.b;
        for beta in &self.beta {
            for i in 0..2 {
                for j in 0..2 {
                    m[i][j] -= 0.5 * beta[i] * beta[j];
                }
            }
        }
        m
    }

    /// `2b - sum beta beta^T`, the covariance left for the auxiliary noise.
    pub fn residual_covariance(&self) -> [[f64; 2]; 2] {
        let r = self.reduced_diffusion();
        [[2.0 * r[0][0], 2.0 * r[0][1]], [2.0 * r[1][0], 2.0 * r[1][1]]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    dim: usize,
    b: Vec<Vec<Coef>>,
    f: Vec<Coef>,
    lam: Coef,
    beta: Vec<Vec<Coef>>,
}

impl CoefficientSet {
    pub fn new(dim: usize, b: Vec<Vec<Coef>>, f: Vec<Coef>, lam: Coef, beta: Vec<Vec<Coef>>) -> Result<Self, CoefficientError> {
        if dim == 0 || dim > 2 {
            return Err(CoefficientError::Shape(format!("dimension must be 1 or 2, got {dim}")));
        }
        if b.len() != dim || b.iter().any(|row| row.len() != dim) {
            return Err(CoefficientError::Shape(format!("b must be {dim}x{dim}")));
        }
        if f.len() != dim {
            return Err(CoefficientError::Shape(format!("f must have {dim} entries, got {}", f.len())));
        }
        if let Some(i) = beta.iter().position(|v| v.len() != dim) {
            return Err(CoefficientError::Shape(format!("beta[{i}] must have {dim} entries")));
        }
        Ok(CoefficientSet { dim, b, f, lam, beta })
    }

    /// Constant scalar coefficients in one dimension, no noise directions.
    pub fn constant_1d(b: f64, f: f64, lam: f64) -> Self {
        CoefficientSet {
            dim: 1,
            b: vec![vec![Coef::Const(b)]],
            f: vec![Coef::Const(f)],
            lam: Coef::Const(lam),
            beta: Vec::new(),
        }
    }

    /// Constant isotropic coefficients in two dimensions.
    pub fn constant_2d(b: [[f64; 2]; 2], f: [f64; 2], lam: f64) -> Self {
        CoefficientSet {
            dim: 2,
            b: b.iter().map(|r| r.iter().map(|&v| Coef::Const(v)).collect()).collect(),
            f: f.iter().map(|&v| Coef::Const(v)).collect(),
            lam: Coef::Const(lam),
            beta: Vec::new(),
        }
    }

    pub fn with_beta(mut self, beta: Vec<Vec<Coef>>) -> Result<Self, CoefficientError> {
        if let Some(i) = beta.iter().position(|v| v.len() != self.dim) {
            return Err(CoefficientError::Shape(format!("beta[{i}] must have {} entries", self.dim)));
        }
        self.beta = beta;
        Ok(self)
    }

    pub fn with_lam(mut self, lam: Coef) -> Self {
        self.lam = lam;
        self
    }

    pub fn with_drift(mut self, f: Vec<Coef>) -> Result<Self, CoefficientError> {
        if f.len() != self.dim {
            return Err(CoefficientError::Shape(format!("f must have {} entries", self.dim)));
        }
        self.f = f;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_beta(&self) -> usize {
        self.beta.len()
    }

    pub fn b_entry(&self, i: usize, j: usize) -> &Coef {
        &self.b[i][j]
    }

    pub fn f_entry(&self, i: usize) -> &Coef {
        &self.f[i]
    }

    pub fn lam(&self) -> &Coef {
        &self.lam
    }

    pub fn beta_entry(&self, k: usize, i: usize) -> &Coef {
        &self.beta[k][i]
    }

    fn entries(&self) -> impl Iterator<Item = &Coef> {
        self.b
            .iter()
            .flatten()
            .chain(self.f.iter())
            .chain(std::iter::once(&self.lam))
            .chain(self.beta.iter().flatten())
    }

    /// True when no entry reads `t`.
    pub fn is_time_independent(&self) -> bool {
        self.entries().all(|c| !c.uses_time())
    }

    /// True when every entry is a number.
    pub fn is_constant(&self) -> bool {
        self.entries().all(Coef::is_const)
    }

    pub fn has_drift(&self) -> bool {
        self.f.iter().any(|c| !c.is_zero())
    }

    pub fn has_mixed_derivative(&self) -> bool {
        self.dim == 2 && !(self.b[0][1].is_zero() && self.b[1][0].is_zero())
    }

    /// Samples every entry at `(x, t)` into `out`, reusing its allocation.
    pub fn sample_into(&self, x: &[f64], t: f64, out: &mut PointCoefficients) -> Result<(), CoefficientError> {
        let env = Env::at(x, t);
        let ev = |c: &Coef, name: &dyn Fn() -> String| {
            c.eval(&env).map_err(|source| CoefficientError::Eval {
                entry: name(),
                x: x[..self.dim].to_vec(),
                t,
                source,
            })
        };
        out.b = [[0.0; 2]; 2];
        out.f = [0.0; 2];
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.b[i][j] = ev(&self.b[i][j], &|| format!("b[{}][{}]", i + 1, j + 1))?;
            }
            out.f[i] = ev(&self.f[i], &|| format!("f[{}]", i + 1))?;
        }
        out.lam = ev(&self.lam, &|| "lam".to_string())?;
        out.beta.resize(self.beta.len(), [0.0; 2]);
        for (k, beta) in self.beta.iter().enumerate() {
            out.beta[k] = [0.0; 2];
            for i in 0..self.dim {
                out.beta[k][i] = ev(&beta[i], &|| format!("beta[{}][{}]", k + 1, i + 1))?;
            }
        }
        Ok(())
    }

    pub fn sample(&self, x: &[f64], t: f64) -> Result<PointCoefficients, CoefficientError> {
        let mut out = PointCoefficients::default();
        self.sample_into(x, t, &mut out)?;
        Ok(out)
    }
}

/// Eigenvalues `(min, max)` of the leading `dim x dim` block of a symmetric matrix.
pub fn sym_eigenvalues(m: &[[f64; 2]; 2], dim: usize) -> (f64, f64) {
    if dim == 1 {
        return (m[0][0], m[0][0]);
    }
    let mean = 0.5 * (m[0][0] + m[1][1]);
    let half = 0.5 * (m[0][0] - m[1][1]);
    let off = 0.5 * (m[0][1] + m[1][0]);
    let r = half.hypot(off);
    (mean - r, mean + r)
}

/// Symmetric positive square root of an SPD matrix, closed form for `dim <= 2`.
pub fn spd_sqrt(m: &[[f64; 2]; 2], dim: usize) -> Option<[[f64; 2]; 2]> {
    let (lo, _) = sym_eigenvalues(m, dim);
    if !(lo > 0.0) {
        return None;
    }
    if dim == 1 {
        return Some([[m[0][0].sqrt(), 0.0], [0.0, 0.0]]);
    }
    let off = 0.5 * (m[0][1] + m[1][0]);
    let s = (m[0][0] * m[1][1] - off * off).sqrt();
    let t = (m[0][0] + m[1][1] + 2.0 * s).sqrt();
    Some([[(m[0][0] + s) / t, off / t], [off / t, (m[1][1] + s) / t]])
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// `b - 1/2 sum beta beta^T` has a non-positive eigenvalue.
    Ellipticity { delta: f64, x: Vec<f64>, t: f64 },
    /// `lam > 0` somewhere.
    PositiveLam { value: f64, x: Vec<f64>, t: f64 },
    /// A noise direction does not vanish on the wall.
    BetaOnBoundary { index: usize, value: f64, x: Vec<f64>, t: f64 },
    /// `b_12 != b_21`.
    Asymmetric { gap: f64, x: Vec<f64>, t: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Ellipticity { delta, x, t } => write!(
                f,
                "uniform ellipticity violated: delta = {delta} at node x = {x:?}, t = {t} (need min eig(b - 1/2 sum beta beta^T) > 0)"
            ),
            Violation::PositiveLam { value, x, t } => {
                write!(f, "zeroth-order coefficient must be <= 0: lam = {value} at x = {x:?}, t = {t}")
            }
            Violation::BetaOnBoundary { index, value, x, t } => write!(
                f,
                "noise direction beta[{}] must vanish on the boundary: |beta| = {value} at x = {x:?}, t = {t}",
                index + 1
            ),
            Violation::Asymmetric { gap, x, t } => {
                write!(f, "diffusion matrix b must be symmetric: |b12 - b21| = {gap} at x = {x:?}, t = {t}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EllipticityReport {
    /// Minimum over sampled nodes of the smallest eigenvalue of `b - 1/2 sum beta beta^T`.
    pub delta: f64,
    pub argmin_x: Vec<f64>,
    pub argmin_t: f64,
    pub violated: bool,
    pub violations: Vec<Violation>,
}

fn sample_nodes(grid: &Grid) -> Vec<([f64; 2], bool, f64)> {
    let mut out = Vec::new();
    for k in 0..=grid.nt() {
        let t = grid.time(k);
        for (p, boundary) in grid.all_nodes() {
            out.push((p, boundary, t));
        }
    }
    out
}

/// Samples the coefficients over every node of the closed grid and every
/// time level and checks ellipticity, the sign of `lam`, symmetry of `b` and
/// the wall condition on `beta`.
pub fn validate(coeffs: &CoefficientSet, grid: &Grid) -> Result<EllipticityReport, CoefficientError> {
    if coeffs.dim() != grid.dim() {
        return Err(CoefficientError::Shape(format!(
            "coefficients are {}-dimensional, grid is {}-dimensional",
            coeffs.dim(),
            grid.dim()
        )));
    }
    let dim = grid.dim();
    let mut pc = PointCoefficients::default();
    let mut delta = f64::INFINITY;
    let mut argmin = (Vec::new(), 0.0);
    let mut worst_lam: Option<(f64, Vec<f64>, f64)> = None;
    let mut worst_beta: Option<(usize, f64, Vec<f64>, f64)> = None;
    let mut worst_asym: Option<(f64, Vec<f64>, f64)> = None;
    for (p, boundary, t) in sample_nodes(grid) {
        let x = &p[..dim];
        coeffs.sample_into(x, t, &mut pc)?;
        let scale = pc.b[0][0].abs().max(pc.b[1][1].abs()).max(1.0);
        let gap = (pc.b[0][1] - pc.b[1][0]).abs();
        if gap > 1e-12 * scale && worst_asym.as_ref().is_none_or(|w| gap > w.0) {
            worst_asym = Some((gap, x.to_vec(), t));
        }
        let (lo, _) = sym_eigenvalues(&pc.reduced_diffusion(), dim);
        if lo < delta {
            delta = lo;
            argmin = (x.to_vec(), t);
        }
        if pc.lam > 0.0 && worst_lam.as_ref().is_none_or(|w| pc.lam > w.0) {
            worst_lam = Some((pc.lam, x.to_vec(), t));
        }
        if boundary {
            for (k, beta) in pc.beta.iter().enumerate() {
                let mag = beta[0].hypot(beta[1]);
                if mag > 1e-12 * scale.sqrt() && worst_beta.as_ref().is_none_or(|w| mag > w.1) {
                    worst_beta = Some((k, mag, x.to_vec(), t));
                }
            }
        }
    }
    let mut violations = Vec::new();
    if delta <= 0.0 {
        violations.push(Violation::Ellipticity {
            delta,
            x: argmin.0.clone(),
            t: argmin.1,
        });
    }
    if let Some((value, x, t)) = worst_lam {
        violations.push(Violation::PositiveLam { value, x, t });
    }
    if let Some((index, value, x, t)) = worst_beta {
        violations.push(Violation::BetaOnBoundary { index, value, x, t });
    }
    if let Some((gap, x, t)) = worst_asym {
        violations.push(Violation::Asymmetric { gap, x, t });
    }
    Ok(EllipticityReport {
        delta,
        argmin_x: argmin.0,
        argmin_t: argmin.1,
        violated: !violations.is_empty(),
        violations,
    })
}

/// Auxiliary noise columns `tilde beta_j` at one sample point.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionSample {
    pub x: Vec<f64>,
    pub t: f64,
    /// Column `j` is `columns[.][j]`.
    pub columns: [[f64; 2]; 2],
}

/// `2b = sum beta_i beta_i^T + sum tilde beta_j tilde beta_j^T` on the grid samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionDecomposition {
    pub dim: usize,
    pub samples: Vec<DecompositionSample>,
    /// Largest entrywise reconstruction residual over the samples.
    pub max_residual: f64,
}

/// Square root of `2b - sum beta beta^T` at one point.
pub fn residual_sqrt(pc: &PointCoefficients, dim: usize) -> Option<[[f64; 2]; 2]> {
    spd_sqrt(&pc.residual_covariance(), dim)
}

/// Entrywise max of `2b - sum beta beta^T - S S^T`.
pub fn reconstruction_residual(pc: &PointCoefficients, s: &[[f64; 2]; 2], dim: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            let mut v = 2.0 * pc.b[i][j];
            for beta in &pc.beta {
                v -= beta[i] * beta[j];
            }
            for k in 0..dim {
                v -= s[i][k] * s[j][k];
            }
            worst = worst.max(v.abs());
        }
    }
    worst
}

pub fn decompose(coeffs: &CoefficientSet, grid: &Grid) -> Result<DiffusionDecomposition, CoefficientError> {
    let dim = grid.dim();
    let mut pc = PointCoefficients::default();
    let mut samples = Vec::new();
    let mut max_residual: f64 = 0.0;
    for (p, _, t) in sample_nodes(grid) {
        let x = &p[..dim];
        coeffs.sample_into(x, t, &mut pc)?;
        let columns = residual_sqrt(&pc, dim).ok_or_else(|| CoefficientError::NotPositiveDefinite {
            x: x.to_vec(),
            t,
            min_eig: sym_eigenvalues(&pc.residual_covariance(), dim).0,
        })?;
        max_residual = max_residual.max(reconstruction_residual(&pc, &columns, dim));
        samples.push(DecompositionSample {
            x: x.to_vec(),
            t,
            columns,
        });
    }
    Ok(DiffusionDecomposition {
        dim,
        samples,
        max_residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientBounds {
    /// `sup |f_1|` over the grid.
    pub sup_f1: f64,
    /// `max eig(2b)` over the grid.
    pub c_beta: f64,
    /// `min eig(2b)` over the grid; the quadratic-variation rate floor.
    pub delta_qv: f64,
}

pub fn bounds(coeffs: &CoefficientSet, grid: &Grid) -> Result<CoefficientBounds, CoefficientError> {
    let dim = grid.dim();
    let mut pc = PointCoefficients::default();
    let mut out = CoefficientBounds {
        sup_f1: 0.0,
        c_beta: f64::NEG_INFINITY,
        delta_qv: f64::INFINITY,
    };
    for (p, _, t) in sample_nodes(grid) {
        coeffs.sample_into(&p[..dim], t, &mut pc)?;
        let two_b = [[2.0 * pc.b[0][0], 2.0 * pc.b[0][1]], [2.0 * pc.b[1][0], 2.0 * pc.b[1][1]]];
        let (lo, hi) = sym_eigenvalues(&two_b, dim);
        out.sup_f1 = out.sup_f1.max(pc.f[0].abs());
        out.c_beta = out.c_beta.max(hi);
        out.delta_qv = out.delta_qv.min(lo);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, Domain};

    fn grid_1d(nt: usize) -> Grid {
        make_grid(Domain::interval(0.0, 1.0).unwrap(), &[11], nt, 1.0).unwrap()
    }

    fn grid_2d() -> Grid {
        make_grid(Domain::new(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), &[6, 6], 3, 1.0).unwrap()
    }

    #[test]
    fn scalar_margin_without_noise() {
        let r = validate(&CoefficientSet::constant_1d(1.0, 0.0, 0.0), &grid_1d(2)).unwrap();
        assert_eq!(r.delta, 1.0);
        assert!(!r.violated);
    }

    #[test]
    fn scalar_margin_with_noise() {
        let c = CoefficientSet::constant_1d(1.0, 0.0, 0.0).with_beta(vec![vec![Coef::Const(1.0)]]).unwrap();
        let r = validate(&c, &grid_1d(2)).unwrap();
        assert_eq!(r.delta, 0.5);
        // a constant noise direction cannot vanish on the wall
        assert_eq!(r.violations.len(), 1);
        assert!(matches!(r.violations[0], Violation::BetaOnBoundary { index: 0, .. }));
    }

    #[test]
    fn negative_margin_is_a_violation() {
        let c = CoefficientSet::constant_1d(0.4, 0.0, 0.0).with_beta(vec![vec![Coef::Const(1.0)]]).unwrap();
        let r = validate(&c, &grid_1d(2)).unwrap();
        assert!((r.delta + 0.1).abs() < 1e-15);
        assert!(r.violated);
        assert!(matches!(r.violations[0], Violation::Ellipticity { .. }));
    }

    #[test]
    fn wall_vanishing_noise_passes() {
        let c = CoefficientSet::constant_1d(1.0, 0.0, -0.5)
            .with_beta(vec![vec![Coef::parse("x*(1-x)").unwrap()]])
            .unwrap();
        let r = validate(&c, &grid_1d(2)).unwrap();
        assert!(!r.violated, "{:?}", r.violations);
        assert!((r.delta - (1.0 - 0.5 * 0.25 * 0.25)).abs() < 1e-12);
        assert_eq!(r.argmin_x, vec![0.5]);
    }

    #[test]
    fn positive_lam_and_asymmetry_are_flagged() {
        let c = CoefficientSet::constant_1d(1.0, 0.0, 0.0).with_lam(Coef::parse("t - 0.5").unwrap());
        let r = validate(&c, &grid_1d(4)).unwrap();
        assert!(matches!(r.violations[..], [Violation::PositiveLam { value, .. }] if value == 0.5));
        let c = CoefficientSet::constant_2d([[1.0, 0.1], [0.2, 1.0]], [0.0; 2], 0.0);
        let r = validate(&c, &grid_2d()).unwrap();
        assert!(matches!(r.violations[..], [Violation::Asymmetric { .. }]));
    }

    #[test]
    fn evaluation_errors_carry_location() {
        let c = CoefficientSet::constant_1d(1.0, 0.0, 0.0).with_lam(Coef::parse("-1/(x-0.5)").unwrap());
        match validate(&c, &grid_1d(1)) {
            Err(CoefficientError::Eval { entry, x, .. }) => {
                assert_eq!(entry, "lam");
                assert_eq!(x, vec![0.5]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decomposition_examples() {
        let c = CoefficientSet::constant_1d(1.0, 0.0, 0.0).with_beta(vec![vec![Coef::Const(1.0)]]).unwrap();
        let d = decompose(&c, &grid_1d(1)).unwrap();
        assert_eq!(d.samples[0].columns[0][0], 1.0);
        let d = decompose(&CoefficientSet::constant_1d(0.1, 0.0, 0.0), &grid_1d(1)).unwrap();
        assert!((d.samples[0].columns[0][0] - 0.2f64.sqrt()).abs() < 1e-15);
        let c = CoefficientSet::constant_2d([[1.0, 0.0], [0.0, 1.0]], [0.0; 2], 0.0);
        let d = decompose(&c, &grid_2d()).unwrap();
        let s = d.samples[0].columns;
        assert!((s[0][0] - 2f64.sqrt()).abs() < 1e-15);
        assert!((s[1][1] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[0][1], 0.0);
        let bad = CoefficientSet::constant_1d(0.4, 0.0, 0.0).with_beta(vec![vec![Coef::Const(1.0)]]).unwrap();
        assert!(matches!(decompose(&bad, &grid_1d(1)), Err(CoefficientError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn decomposition_reconstructs_anisotropic_noise() {
        let b = vec![
            vec![Coef::parse("1 + 0.3*sin(x1*x2)").unwrap(), Coef::parse("0.2*cos(t)").unwrap()],
            vec![Coef::parse("0.2*cos(t)").unwrap(), Coef::Const(0.8)],
        ];
        let beta = vec![vec![
            Coef::parse("x1*(1-x1)*x2*(1-x2)").unwrap(),
            Coef::parse("0.5*sin(pi*x1)*sin(pi*x2)").unwrap(),
        ]];
        let c = CoefficientSet::new(2, b, vec![0.0.into(), 0.0.into()], 0.0.into(), beta).unwrap();
        let g = grid_2d();
        let r = validate(&c, &g).unwrap();
        assert!(!r.violated, "{:?}", r.violations);
        let d = decompose(&c, &g).unwrap();
        assert!(d.max_residual <= 1e-10, "{}", d.max_residual);
        let bd = bounds(&c, &g).unwrap();
        assert!(bd.delta_qv >= 2.0 * r.delta);
    }

    #[test]
    fn bounds_examples() {
        let b = bounds(&CoefficientSet::constant_1d(0.1, 0.0, 0.0), &grid_1d(2)).unwrap();
        assert_eq!((b.delta_qv, b.c_beta, b.sup_f1), (0.2, 0.2, 0.0));
        let c = CoefficientSet::constant_1d(0.1, 0.0, 0.0).with_drift(vec![Coef::parse("sin(t)").unwrap()]).unwrap();
        let g = grid_1d(10);
        let b = bounds(&c, &g).unwrap();
        assert!(b.sup_f1 <= 1.0);
        assert_eq!(b.sup_f1, 1.0f64.sin());
        let b = bounds(&CoefficientSet::constant_2d([[0.1, 0.0], [0.0, 0.3]], [0.0; 2], 0.0), &grid_2d()).unwrap();
        assert!((b.delta_qv - 0.2).abs() < 1e-15);
        assert!((b.c_beta - 0.6).abs() < 1e-15);
    }

    #[test]
    fn spd_sqrt_squares_back() {
        let m = [[2.0, 0.7], [0.7, 1.0]];
        let s = spd_sqrt(&m, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let v = s[i][0] * s[j][0] + s[i][1] * s[j][1];
                assert!((v - m[i][j]).abs() < 1e-14);
            }
        }
        assert!(spd_sqrt(&[[1.0, 2.0], [2.0, 1.0]], 2).is_none());
    }
}
