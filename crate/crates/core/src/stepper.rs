//! Backward implicit-Euler solver for the terminal-value problem
//!
//! ```text
//! u_t + A u + phi = 0  in D x [0, s),   u = 0 on the wall,   u(., s) = Phi
//! ```
//!
//! Each step solves `(I - dt A_h(t_k)) u^k = u^{k+1} + dt phi^k`. Second
//! derivatives use central differences, the drift uses first-order upwinding
//! on the sign of `f_i` and mixed derivatives use the 4-point cross stencil.
//! Without mixed derivatives and with `lam <= 0` the system matrix is an
//! M-matrix with row sums at least 1, which gives the discrete maximum
//! principle `sup |u| <= sup |Phi| + s sup |phi|`.

use std::sync::Arc;

use thiserror::Error;

use crate::coefficients::{CoefficientError, CoefficientSet, PointCoefficients};
use crate::grid::{Grid, GridError, SpaceField, SpaceTimeField};
use crate::linalg::{bicgstab, CsrMatrix, LinalgError, Tridiagonal};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepperError {
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("linear solve failed at time level {level}: {source}")]
    Linear { level: usize, source: LinalgError },
    #[error("terminal level {level} outside 1..={nt}")]
    BadLevel { level: usize, nt: usize },
    #[error("source has {got} levels, need at least {need}")]
    SourceTooShort { got: usize, need: usize },
    #[error("non-finite value produced at time level {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepperOptions {
    /// Sup-norm residual target for the iterative (2-D) solver.
    pub iterative_tol: f64,
    pub max_krylov_iter: usize,
}

impl Default for StepperOptions {
    fn default() -> Self {
        StepperOptions {
            iterative_tol: 1e-10,
            max_krylov_iter: 2000,
        }
    }
}

/// Monotonicity of one system matrix `I - dt A_h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Monotonicity {
    /// Largest off-diagonal entry; monotone schemes have this `<= 0`.
    pub worst_offdiag: f64,
    /// Smallest row sum.
    pub min_row_sum: f64,
}

impl Monotonicity {
    pub fn is_monotone(&self) -> bool {
        self.worst_offdiag <= 0.0 && self.min_row_sum >= 1.0 - 1e-12
    }

    fn merge(self, other: Monotonicity) -> Monotonicity {
        Monotonicity {
            worst_offdiag: self.worst_offdiag.max(other.worst_offdiag),
            min_row_sum: self.min_row_sum.min(other.min_row_sum),
        }
    }
}

/// Discretised generator `A_h` at one time level, over interior nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteOperator {
    pub matrix: CsrMatrix,
}

impl DiscreteOperator {
    pub fn assemble(grid: &Grid, coeffs: &CoefficientSet, t: f64) -> Result<Self, CoefficientError> {
        let dim = grid.dim();
        let n = grid.n_interior();
        let mut pc = PointCoefficients::default();
        let mut rows = Vec::with_capacity(n);
        for idx in 0..n {
            let p = grid.interior_point(idx);
            coeffs.sample_into(&p[..dim], t, &mut pc)?;
            let m = grid.interior_multi_index(idx);
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(9);
            let mut diag = pc.lam;
            for axis in 0..dim {
                let h = grid.h(axis);
                let diff = pc.b[axis][axis] / (h * h);
                let f = pc.f[axis];
                let (mut lo, mut hi) = (diff, diff);
                diag -= 2.0 * diff;
                if f > 0.0 {
                    hi += f / h;
                    diag -= f / h;
                } else if f < 0.0 {
                    lo -= f / h;
                    diag += f / h;
                }
                let mut minus = m;
                minus[axis] -= 1;
                let mut plus = m;
                plus[axis] += 1;
                if let Some(j) = grid.interior_index(minus) {
                    row.push((j, lo));
                }
                if let Some(j) = grid.interior_index(plus) {
                    row.push((j, hi));
                }
            }
            if dim == 2 {
                let mixed = (pc.b[0][1] + pc.b[1][0]) / (4.0 * grid.h(0) * grid.h(1));
                if mixed != 0.0 {
                    for (di, dj, sign) in [(1i64, 1i64, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)] {
                        let mi = m[0] as i64 + di;
                        let mj = m[1] as i64 + dj;
                        if let Some(j) = grid.interior_index([mi as usize, mj as usize]) {
                            row.push((j, sign * mixed));
                        }
                    }
                }
            }
            row.push((idx, diag));
            rows.push(row);
        }
        Ok(DiscreteOperator {
            matrix: CsrMatrix::from_rows(rows),
        })
    }
}

#[derive(Debug, Clone)]
struct LevelSystem {
    matrix: CsrMatrix,
    tri: Option<Tridiagonal>,
    monotonicity: Monotonicity,
}

impl LevelSystem {
    fn build(grid: &Grid, coeffs: &CoefficientSet, t: f64) -> Result<Self, CoefficientError> {
        let op = DiscreteOperator::assemble(grid, coeffs, t)?;
        let matrix = op.matrix.identity_plus_scaled(-grid.dt());
        let mut mono = Monotonicity {
            worst_offdiag: f64::NEG_INFINITY,
            min_row_sum: f64::INFINITY,
        };
        for i in 0..matrix.n() {
            let mut sum = 0.0;
            for (j, v) in matrix.row(i) {
                sum += v;
                if j != i {
                    mono.worst_offdiag = mono.worst_offdiag.max(v);
                }
            }
            mono.min_row_sum = mono.min_row_sum.min(sum);
        }
        if mono.worst_offdiag == f64::NEG_INFINITY {
            mono.worst_offdiag = 0.0;
        }
        let tri = if grid.dim() == 1 {
            Some(matrix.tridiagonal().expect("1-D stencil is tridiagonal"))
        } else {
            None
        };
        Ok(LevelSystem {
            matrix,
            tri,
            monotonicity: mono,
        })
    }
}

/// Per-solve diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveDiagnostics {
    pub monotonicity: Monotonicity,
    /// `sup|Phi| + s_time sup|phi| - sup|u|`; non-negative for monotone schemes.
    pub max_principle_slack: f64,
    pub max_linear_residual: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutput {
    /// Levels `0..=s`.
    pub u: SpaceTimeField,
    pub diagnostics: SolveDiagnostics,
}

/// Cap on cached system matrices for time-dependent coefficients, in rows.
const CACHE_ROWS: usize = 4_000_000;

/// Reusable backward solver on a fixed grid and coefficient set.
pub struct Stepper {
    grid: Arc<Grid>,
    coeffs: CoefficientSet,
    opts: StepperOptions,
    // one entry if time-independent, nt entries if cached, empty if built on the fly
    systems: Vec<LevelSystem>,
    time_independent: bool,
    monotonicity: Monotonicity,
}

impl Stepper {
    pub fn new(grid: Arc<Grid>, coeffs: &CoefficientSet) -> Result<Self, StepperError> {
        Self::with_options(grid, coeffs, StepperOptions::default())
    }

    pub fn with_options(grid: Arc<Grid>, coeffs: &CoefficientSet, opts: StepperOptions) -> Result<Self, StepperError> {
        if coeffs.dim() != grid.dim() {
            return Err(CoefficientError::Shape(format!(
                "coefficients are {}-dimensional, grid is {}-dimensional",
                coeffs.dim(),
                grid.dim()
            ))
            .into());
        }
        let time_independent = coeffs.is_time_independent();
        let mut systems = Vec::new();
        let mut monotonicity = Monotonicity {
            worst_offdiag: f64::NEG_INFINITY,
            min_row_sum: f64::INFINITY,
        };
        if time_independent {
            systems.push(LevelSystem::build(&grid, coeffs, 0.0)?);
            monotonicity = systems[0].monotonicity;
        } else {
            let cache = grid.n_interior() * grid.nt() <= CACHE_ROWS;
            for k in 0..grid.nt() {
                let sys = LevelSystem::build(&grid, coeffs, grid.time(k))?;
                monotonicity = monotonicity.merge(sys.monotonicity);
                if cache {
                    systems.push(sys);
                }
            }
        }
        Ok(Stepper {
            grid,
            coeffs: coeffs.clone(),
            opts,
            systems,
            time_independent,
            monotonicity,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Worst monotonicity over all time levels.
    pub fn monotonicity(&self) -> Monotonicity {
        self.monotonicity
    }

    /// Marches from level `s` down to 0 starting at `terminal`.
    pub fn solve(&self, phi: Option<&SpaceTimeField>, terminal: &SpaceField, s: usize) -> Result<SolveOutput, StepperError> {
        let nt = self.grid.nt();
        if s == 0 || s > nt {
            return Err(StepperError::BadLevel { level: s, nt });
        }
        if **terminal.grid() != *self.grid {
            return Err(GridError::GridMismatch.into());
        }
        if let Some(phi) = phi {
            if **phi.grid() != *self.grid {
                return Err(GridError::GridMismatch.into());
            }
            if phi.n_levels() < s {
                return Err(StepperError::SourceTooShort {
                    got: phi.n_levels(),
                    need: s,
                });
            }
        }
        let n = self.grid.n_interior();
        let dt = self.grid.dt();
        let mut levels = vec![Vec::new(); s + 1];
        levels[s] = terminal.values().to_vec();
        let mut rhs = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        let mut max_res: f64 = 0.0;
        let mut phi_sup: f64 = 0.0;
        let mut on_the_fly;
        for k in (0..s).rev() {
            let sys: &LevelSystem = if self.time_independent {
                &self.systems[0]
            } else if !self.systems.is_empty() {
                &self.systems[k]
            } else {
                on_the_fly = LevelSystem::build(&self.grid, &self.coeffs, self.grid.time(k))?;
                &on_the_fly
            };
            let next = &levels[k + 1];
            match phi {
                Some(phi) => {
                    let src = phi.level(k);
                    for i in 0..n {
                        rhs[i] = next[i] + dt * src[i];
                        phi_sup = phi_sup.max(src[i].abs());
                    }
                }
                None => rhs.copy_from_slice(next),
            }
            let mut x = next.clone();
            if let Some(tri) = &sys.tri {
                tri.solve_into(&rhs, &mut x, &mut scratch)
                    .map_err(|source| StepperError::Linear { level: k, source })?;
                max_res = max_res.max(sys.matrix.residual_sup(&x, &rhs));
            } else {
                let (res, _) = bicgstab(&sys.matrix, &rhs, &mut x, self.opts.iterative_tol, self.opts.max_krylov_iter)
                    .map_err(|source| StepperError::Linear { level: k, source })?;
                max_res = max_res.max(res);
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(StepperError::NonFinite(k));
            }
            levels[k] = x;
        }
        let u = SpaceTimeField::from_levels(self.grid.clone(), levels)?;
        let bound = terminal.sup_norm() + self.grid.time(s) * phi_sup;
        let mut warnings = Vec::new();
        if !self.monotonicity.is_monotone() {
            warnings.push(format!(
                "stencil is not monotone: worst off-diagonal {:e}, min row sum {}; the maximum principle is not guaranteed",
                self.monotonicity.worst_offdiag, self.monotonicity.min_row_sum
            ));
        }
        Ok(SolveOutput {
            diagnostics: SolveDiagnostics {
                monotonicity: self.monotonicity,
                max_principle_slack: bound - u.sup_norm(),
                max_linear_residual: max_res,
                warnings,
            },
            u,
        })
    }

    /// Source response on `[0, T]` with zero terminal data.
    pub fn source_response(&self, phi: &SpaceTimeField) -> Result<SpaceTimeField, StepperError> {
        let zero = SpaceField::zeros(self.grid.clone());
        Ok(self.solve(Some(phi), &zero, self.grid.nt())?.u)
    }

    /// Terminal response on `[0, T]` with zero source.
    pub fn terminal_response(&self, terminal: &SpaceField) -> Result<SpaceTimeField, StepperError> {
        Ok(self.solve(None, terminal, self.grid.nt())?.u)
    }
}

/// One-shot backward solve from level `s` with source `phi` and terminal data.
pub fn solve_terminal(
    grid: &Arc<Grid>,
    coeffs: &CoefficientSet,
    phi: Option<&SpaceTimeField>,
    terminal: &SpaceField,
    s: usize,
) -> Result<SolveOutput, StepperError> {
    Stepper::new(grid.clone(), coeffs)?.solve(phi, terminal, s)
}

/// Response to a source with zero terminal data over the full horizon.
pub fn apply_source_operator(grid: &Arc<Grid>, coeffs: &CoefficientSet, phi: &SpaceTimeField) -> Result<SpaceTimeField, StepperError> {
    Stepper::new(grid.clone(), coeffs)?.source_response(phi)
}

/// Response to terminal data with zero source over the full horizon.
pub fn apply_terminal_operator(grid: &Arc<Grid>, coeffs: &CoefficientSet, terminal: &SpaceField) -> Result<SpaceTimeField, StepperError> {
    Stepper::new(grid.clone(), coeffs)?.terminal_response(terminal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::Coef;
    use crate::grid::{make_grid, Domain};
    use std::f64::consts::PI;

    fn unit(nx: usize, nt: usize, horizon: f64) -> Arc<Grid> {
        Arc::new(make_grid(Domain::interval(0.0, 1.0).unwrap(), &[nx], nt, horizon).unwrap())
    }

    fn sine(g: &Arc<Grid>) -> SpaceField {
        SpaceField::from_fn(g.clone(), |x| Ok::<_, ()>((PI * x[0]).sin())).unwrap()
    }

    fn mid_amplitude(u: &SpaceTimeField, level: usize) -> f64 {
        let n = u.level(level).len();
        u.level(level)[n / 2]
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let g = unit(21, 10, 1.0);
        let out = solve_terminal(&g, &CoefficientSet::constant_1d(0.1, 0.3, -0.2), None, &SpaceField::zeros(g.clone()), 10).unwrap();
        assert_eq!(out.u.sup_norm(), 0.0);
        let phi = SpaceTimeField::zeros(g.clone());
        assert_eq!(apply_source_operator(&g, &CoefficientSet::constant_1d(0.1, 0.0, 0.0), &phi).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn heat_eigenmode_decays_at_the_closed_form_rate() {
        let g = unit(201, 400, 1.0);
        let out = solve_terminal(&g, &CoefficientSet::constant_1d(0.1, 0.0, 0.0), None, &sine(&g), 400).unwrap();
        let want = (-0.1 * PI * PI).exp();
        let got = mid_amplitude(&out.u, 0);
        assert!(((got - want) / want).abs() < 0.01, "{got} vs {want}");
        assert_eq!(out.u.level(400), sine(&g).values());
        assert!(out.diagnostics.monotonicity.is_monotone());
        assert!(out.diagnostics.max_principle_slack >= 0.0);
    }

    #[test]
    fn killing_rate_multiplies_the_decay() {
        let g = unit(201, 400, 1.0);
        let out = solve_terminal(&g, &CoefficientSet::constant_1d(0.1, 0.0, -1.0), None, &sine(&g), 400).unwrap();
        let want = (-(0.1 * PI * PI + 1.0)).exp();
        let got = mid_amplitude(&out.u, 0);
        assert!(((got - want) / want).abs() < 0.01, "{got} vs {want}");
    }

    #[test]
    fn unit_source_approaches_the_steady_parabola() {
        let g = unit(101, 400, 20.0);
        let phi = SpaceTimeField::from_fn(g.clone(), |_, _| Ok::<_, ()>(1.0)).unwrap();
        let u = apply_source_operator(&g, &CoefficientSet::constant_1d(0.1, 0.0, 0.0), &phi).unwrap();
        let got = mid_amplitude(&u, 0);
        assert!(((got - 1.25) / 1.25).abs() < 0.02, "{got}");
    }

    #[test]
    fn split_into_source_and_terminal_parts() {
        let g = unit(31, 20, 1.0);
        let c = CoefficientSet::constant_1d(0.2, -0.7, -0.3);
        let phi = SpaceTimeField::from_fn(g.clone(), |x, t| Ok::<_, ()>(x[0] * (1.0 - t))).unwrap();
        let term = sine(&g);
        let stepper = Stepper::new(g.clone(), &c).unwrap();
        let full = stepper.solve(Some(&phi), &term, 20).unwrap().u;
        let parts = stepper.source_response(&phi).unwrap().axpby(1.0, &stepper.terminal_response(&term).unwrap(), 1.0).unwrap();
        assert!(full.axpby(1.0, &parts, -1.0).unwrap().sup_norm() < 1e-13);
    }

    #[test]
    fn sub_horizon_solve_has_s_plus_one_levels() {
        let g = unit(11, 10, 1.0);
        let out = solve_terminal(&g, &CoefficientSet::constant_1d(0.1, 0.0, 0.0), None, &sine(&g), 4).unwrap();
        assert_eq!(out.u.n_levels(), 5);
        assert!(matches!(
            solve_terminal(&g, &CoefficientSet::constant_1d(0.1, 0.0, 0.0), None, &sine(&g), 11),
            Err(StepperError::BadLevel { .. })
        ));
    }

    #[test]
    fn upwind_stencil_is_an_m_matrix() {
        let g = unit(21, 5, 1.0);
        for f in [-3.0, 0.0, 2.5] {
            let st = Stepper::new(g.clone(), &CoefficientSet::constant_1d(0.01, f, -0.5)).unwrap();
            assert!(st.monotonicity().is_monotone(), "f = {f}");
            assert!(st.monotonicity().min_row_sum >= 1.0 + 0.5 * g.dt() - 1e-12);
        }
    }

    #[test]
    fn time_dependent_coefficients_use_left_endpoint() {
        let g = unit(21, 8, 1.0);
        let c = CoefficientSet::constant_1d(0.1, 0.0, 0.0).with_lam(Coef::parse("-t").unwrap());
        let out = solve_terminal(&g, &c, None, &sine(&g), 8).unwrap();
        // on the discrete eigenmode each step divides by 1 + dt (b mu_h - lam(t_k))
        let h = g.h(0);
        let mu = 4.0 / (h * h) * (PI * h / 2.0).sin().powi(2);
        let mut amp = 1.0;
        for k in (0..8).rev() {
            amp /= 1.0 + g.dt() * (0.1 * mu + g.time(k));
        }
        let got = mid_amplitude(&out.u, 0);
        assert!((got - amp).abs() < 1e-13, "{got} vs {amp}");
    }

    #[test]
    fn two_dimensional_eigenmode() {
        let d = Domain::new(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let g = Arc::new(make_grid(d, &[41, 41], 100, 0.5).unwrap());
        let c = CoefficientSet::constant_2d([[0.1, 0.0], [0.0, 0.1]], [0.0; 2], 0.0);
        let term = SpaceField::from_fn(g.clone(), |x| Ok::<_, ()>((PI * x[0]).sin() * (PI * x[1]).sin())).unwrap();
        let out = solve_terminal(&g, &c, None, &term, 100).unwrap();
        let want = (-0.1 * 2.0 * PI * PI * 0.5).exp();
        let got = out.u.level_sup_norms()[0];
        assert!(((got - want) / want).abs() < 0.01, "{got} vs {want}");
        assert!(out.diagnostics.max_linear_residual <= 1e-10);
    }

    #[test]
    fn mixed_derivative_is_flagged() {
        let d = Domain::new(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let g = Arc::new(make_grid(d, &[11, 11], 4, 1.0).unwrap());
        let c = CoefficientSet::constant_2d([[0.1, 0.05], [0.05, 0.1]], [0.0; 2], 0.0);
        let st = Stepper::new(g.clone(), &c).unwrap();
        assert!(!st.monotonicity().is_monotone());
        assert!(st.monotonicity().worst_offdiag > 0.0);
        let out = st.solve(None, &SpaceField::zeros(g), 4).unwrap();
        assert_eq!(out.diagnostics.warnings.len(), 1);
    }
}
