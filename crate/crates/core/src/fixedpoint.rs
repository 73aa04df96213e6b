//! Terminal value of the non-local problem by Picard iteration
//! `Phi <- xi + Gamma(L phi + calL Phi)`, with a dense `(I - Q)` solve as an
//! oracle for small grids.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::coefficients::CoefficientSet;
use crate::grid::{Grid, SpaceField, SpaceTimeField};
use crate::nonlocal::{GammaOperator, NonlocalError};
use crate::stepper::{Stepper, StepperError, StepperOptions};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;
pub const DEFAULT_Q_CAP: usize = 2000;
/// Consecutive ratios `>= 1` that abort the iteration.
pub const DIVERGENCE_WINDOW: usize = 5;

#[derive(Debug, Error)]
pub enum FixedPointError {
    #[error(transparent)]
    Stepper(#[from] StepperError),
    #[error(transparent)]
    Gamma(#[from] NonlocalError),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("iteration is not contracting: {DIVERGENCE_WINDOW} consecutive residual ratios >= 1 (last {last_ratio})")]
    Diverged { report: FixedPointReport, last_ratio: f64 },
    #[error("{n} interior nodes exceed the dense-matrix cap of {cap}")]
    CapExceeded { n: usize, cap: usize },
    #[error("I - Q is numerically singular (smallest pivot ratio {pivot_ratio:e})")]
    Singular { pivot_ratio: f64 },
    #[error("data does not live on the solver grid")]
    GridMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointReport {
    pub iterations: usize,
    /// `sup |Phi_{m+1} - Phi_m|` per iteration.
    pub residuals: Vec<f64>,
    /// `residuals[m] / residuals[m-1]`.
    pub ratios: Vec<f64>,
    pub converged: bool,
    /// `sup |u(., T) - Gamma u - xi|` recomputed from the returned `u`.
    pub bc_residual: f64,
}

impl FixedPointReport {
    /// Last observed ratio, if any.
    pub fn final_ratio(&self) -> Option<f64> {
        self.ratios.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlocalSolution {
    pub u: SpaceTimeField,
    pub terminal: SpaceField,
    pub report: FixedPointReport,
}

/// Dense `Q = Gamma calL` over interior nodes, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QMatrix {
    pub n: usize,
    pub data: Vec<f64>,
    /// Max absolute row sum.
    pub sup_norm: f64,
}

impl QMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.data[i * self.n..(i + 1) * self.n].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Dense rows, comma separated, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.n * self.n * 24);
        for i in 0..self.n {
            let row: Vec<String> = self.data[i * self.n..(i + 1) * self.n].iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn check_grid(grid: &Arc<Grid>, op: &GammaOperator, phi: Option<&SpaceTimeField>, xi: &SpaceField) -> Result<(), FixedPointError> {
    let same = **op.grid() == **grid && **xi.grid() == **grid && phi.is_none_or(|p| **p.grid() == **grid);
    if same {
        Ok(())
    } else {
        Err(FixedPointError::GridMismatch)
    }
}

fn source_part(stepper: &Stepper, phi: Option<&SpaceTimeField>) -> Result<Option<SpaceTimeField>, StepperError> {
    phi.map(|p| stepper.source_response(p)).transpose()
}

/// `sup |u(., T) - Gamma u - xi|`.
pub fn bc_residual(u: &SpaceTimeField, op: &GammaOperator, xi: &SpaceField) -> Result<f64, FixedPointError> {
    let gu = op.apply(u)?;
    let top = u.level(u.n_levels() - 1);
    Ok(top
        .iter()
        .zip(gu.values())
        .zip(xi.values())
        .fold(0.0f64, |m, ((a, g), x)| m.max((a - g - x).abs())))
}

fn package(
    stepper: &Stepper,
    phi: Option<&SpaceTimeField>,
    terminal: SpaceField,
    op: &GammaOperator,
    xi: &SpaceField,
    mut report: FixedPointReport,
) -> Result<NonlocalSolution, FixedPointError> {
    let u = stepper.solve(phi, &terminal, stepper.grid().nt())?.u;
    report.bc_residual = bc_residual(&u, op, xi)?;
    Ok(NonlocalSolution { u, terminal, report })
}

/// Picard iteration from `Phi_0 = xi`. Returns with `converged = false` when
/// `max_iter` is exhausted.
pub fn solve_nonlocal(
    grid: &Arc<Grid>,
    coeffs: &CoefficientSet,
    phi: Option<&SpaceTimeField>,
    xi: &SpaceField,
    op: &GammaOperator,
    tol: f64,
    max_iter: usize,
) -> Result<NonlocalSolution, FixedPointError> {
    let stepper = Stepper::new(grid.clone(), coeffs)?;
    solve_nonlocal_with(&stepper, phi, xi, op, tol, max_iter)
}

pub fn solve_nonlocal_with(
    stepper: &Stepper,
    phi: Option<&SpaceTimeField>,
    xi: &SpaceField,
    op: &GammaOperator,
    tol: f64,
    max_iter: usize,
) -> Result<NonlocalSolution, FixedPointError> {
    if !(tol > 0.0) {
        return Err(FixedPointError::BadTolerance(tol));
    }
    let grid = stepper.grid();
    check_grid(grid, op, phi, xi)?;
    // xi + Gamma L phi is fixed across iterations
    let mut base = xi.values().to_vec();
    if let Some(lphi) = source_part(stepper, phi)? {
        for (b, g) in base.iter_mut().zip(op.apply(&lphi)?.values()) {
            *b += g;
        }
    }
    let mut current = xi.clone();
    let mut report = FixedPointReport {
        iterations: 0,
        residuals: Vec::new(),
        ratios: Vec::new(),
        converged: false,
        bc_residual: f64::NAN,
    };
    let mut growing = 0;
    while report.iterations < max_iter {
        let w = stepper.terminal_response(&current)?;
        let gw = op.apply(&w)?;
        let next: Vec<f64> = base.iter().zip(gw.values()).map(|(b, g)| b + g).collect();
        let diff = next
            .iter()
            .zip(current.values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        report.iterations += 1;
        if let Some(&prev) = report.residuals.last() {
            let ratio = diff / prev;
            report.ratios.push(ratio);
            growing = if ratio >= 1.0 { growing + 1 } else { 0 };
        }
        report.residuals.push(diff);
        current = SpaceField::from_values(grid.clone(), next).map_err(StepperError::from)?;
        if diff <= tol {
            report.converged = true;
            break;
        }
        if growing >= DIVERGENCE_WINDOW {
            let last_ratio = *report.ratios.last().unwrap();
            return Err(FixedPointError::Diverged { report, last_ratio });
        }
    }
    package(stepper, phi, current, op, xi, report)
}

/// Columns `Gamma calL e_j`, computed in parallel and stored in column order.
pub fn assemble_q(grid: &Arc<Grid>, coeffs: &CoefficientSet, op: &GammaOperator, cap: usize) -> Result<QMatrix, FixedPointError> {
    let stepper = oracle_stepper(grid, coeffs)?;
    assemble_q_with(&stepper, op, cap)
}

pub fn assemble_q_with(stepper: &Stepper, op: &GammaOperator, cap: usize) -> Result<QMatrix, FixedPointError> {
    let grid = stepper.grid();
    if **op.grid() != **grid {
        return Err(FixedPointError::GridMismatch);
    }
    let n = grid.n_interior();
    if n > cap {
        return Err(FixedPointError::CapExceeded { n, cap });
    }
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| -> Result<Vec<f64>, FixedPointError> {
            let mut e = SpaceField::zeros(grid.clone());
            e.values_mut()[j] = 1.0;
            let w = stepper.terminal_response(&e)?;
            Ok(op.apply(&w)?.into_values())
        })
        .collect::<Result<_, _>>()?;
    let mut data = vec![0.0; n * n];
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            data[i * n + j] = *v;
        }
    }
    let sup_norm = (0..n)
        .map(|i| data[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    Ok(QMatrix { n, data, sup_norm })
}

/// Krylov tolerance for the oracle: unit columns need a tighter absolute
/// residual than O(1) data.
const ORACLE_KRYLOV_TOL: f64 = 1e-13;

fn oracle_stepper(grid: &Arc<Grid>, coeffs: &CoefficientSet) -> Result<Stepper, StepperError> {
    let opts = StepperOptions {
        iterative_tol: ORACLE_KRYLOV_TOL,
        ..StepperOptions::default()
    };
    Stepper::with_options(grid.clone(), coeffs, opts)
}

/// Smallest `|U_ii| / max |U_ii|` accepted from the LU factorisation.
const PIVOT_FLOOR: f64 = 1e-13;

/// Solves `(I - Q) Phi = xi + Gamma L phi` densely.
pub fn solve_nonlocal_direct(
    grid: &Arc<Grid>,
    coeffs: &CoefficientSet,
    phi: Option<&SpaceTimeField>,
    xi: &SpaceField,
    op: &GammaOperator,
    cap: usize,
) -> Result<(NonlocalSolution, QMatrix), FixedPointError> {
    let stepper = oracle_stepper(grid, coeffs)?;
    check_grid(grid, op, phi, xi)?;
    let q = assemble_q_with(&stepper, op, cap)?;
    let n = q.n;
    let mut rhs = xi.values().to_vec();
    if let Some(lphi) = source_part(&stepper, phi)? {
        for (b, g) in rhs.iter_mut().zip(op.apply(&lphi)?.values()) {
            *b += g;
        }
    }
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - q.get(i, j));
    let lu = a.lu();
    let diag = lu.u().diagonal();
    let big = diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let small = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let pivot_ratio = if big > 0.0 { small / big } else { 0.0 };
    if !(pivot_ratio > PIVOT_FLOOR) {
        return Err(FixedPointError::Singular { pivot_ratio });
    }
    let sol = lu
        .solve(&DVector::from_vec(rhs))
        .ok_or(FixedPointError::Singular { pivot_ratio })?;
    let terminal = SpaceField::from_values(grid.clone(), sol.iter().copied().collect()).map_err(StepperError::from)?;
    let report = FixedPointReport {
        iterations: 0,
        residuals: Vec::new(),
        ratios: Vec::new(),
        converged: true,
        bc_residual: f64::NAN,
    };
    Ok((package(&stepper, phi, terminal, op, xi, report)?, q))
}
