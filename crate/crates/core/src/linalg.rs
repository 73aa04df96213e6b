//! Sparse matrices and the two linear solvers used by the backward stepper:
//! tridiagonal elimination for one space dimension and Jacobi-preconditioned
//! BiCGSTAB for two.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("zero pivot at row {0}")]
    ZeroPivot(usize),
    #[error("matrix is not tridiagonal (row {row}, column {col})")]
    NotTridiagonal { row: usize, col: usize },
    #[error("iterative solver stalled after {iterations} iterations, residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("iterative solver breakdown at iteration {0}")]
    Breakdown(usize),
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists. Duplicate columns are summed.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                if last == Some(c) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(cols.len());
        }
        CsrMatrix { n, row_ptr, cols, vals }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).find(|&(c, _)| c == i).map_or(0.0, |(_, v)| v))
            .collect()
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            *yi = acc;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    /// `I + c * self`.
    pub fn identity_plus_scaled(&self, c: f64) -> CsrMatrix {
        let rows = (0..self.n)
            .map(|i| {
                let mut row: Vec<(usize, f64)> = self.row(i).map(|(j, v)| (j, c * v)).collect();
                row.push((i, 1.0));
                row
            })
            .collect();
        CsrMatrix::from_rows(rows)
    }

    /// `max |b - A x|`.
    pub fn residual_sup(&self, x: &[f64], b: &[f64]) -> f64 {
        let ax = self.matvec(x);
        ax.iter().zip(b).fold(0.0, |m, (p, q)| m.max((q - p).abs()))
    }

    /// Extracts the three diagonals of a tridiagonal matrix.
    pub fn tridiagonal(&self) -> Result<Tridiagonal, LinalgError> {
        let mut t = Tridiagonal {
            lower: vec![0.0; self.n],
            diag: vec![0.0; self.n],
            upper: vec![0.0; self.n],
        };
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                if j == i {
                    t.diag[i] = v;
                } else if j + 1 == i {
                    t.lower[i] = v;
                } else if j == i + 1 {
                    t.upper[i] = v;
                } else {
                    return Err(LinalgError::NotTridiagonal { row: i, col: j });
                }
            }
        }
        Ok(t)
    }
}

/// Tridiagonal matrix; `lower[0]` and `upper[n-1]` are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    /// Thomas algorithm. `scratch` must have the system size.
    pub fn solve_into(&self, rhs: &[f64], x: &mut [f64], scratch: &mut [f64]) -> Result<(), LinalgError> {
        let n = self.diag.len();
        let mut beta = self.diag[0];
        if beta == 0.0 {
            return Err(LinalgError::ZeroPivot(0));
        }
        x[0] = rhs[0] / beta;
        for i in 1..n {
            scratch[i] = self.upper[i - 1] / beta;
            beta = self.diag[i] - self.lower[i] * scratch[i];
            if beta == 0.0 || !beta.is_finite() {
                return Err(LinalgError::ZeroPivot(i));
            }
            x[i] = (rhs[i] - self.lower[i] * x[i - 1]) / beta;
        }
        for i in (0..n - 1).rev() {
            x[i] -= scratch[i + 1] * x[i + 1];
        }
        Ok(())
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let n = rhs.len();
        let mut x = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        self.solve_into(rhs, &mut x, &mut scratch)?;
        Ok(x)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn sup(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Jacobi-preconditioned BiCGSTAB. `x` holds the initial guess on entry and
/// the solution on exit. Stops when `max |b - A x| <= tol`; returns the final
/// residual and the iteration count.
pub fn bicgstab(a: &CsrMatrix, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<(f64, usize), LinalgError> {
    let n = a.n();
    let inv_diag: Vec<f64> = a.diag().iter().map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut r = vec![0.0; n];
    a.matvec_into(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut res = sup(&r);
    if res <= tol {
        return Ok((res, 0));
    }
    let r_hat = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            return Err(LinalgError::Breakdown(it));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = inv_diag[i] * p[i];
        }
        a.matvec_into(&y, &mut v);
        let denom = dot(&r_hat, &v);
        if denom == 0.0 {
            return Err(LinalgError::Breakdown(it));
        }
        alpha = rho / denom;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if sup(&s) <= tol {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            res = a.residual_sup(x, b);
            if res <= tol {
                return Ok((res, it));
            }
            a.matvec_into(x, &mut r);
            for i in 0..n {
                r[i] = b[i] - r[i];
            }
            continue;
        }
        for i in 0..n {
            z[i] = inv_diag[i] * s[i];
        }
        a.matvec_into(&z, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        res = sup(&r);
        if res <= tol {
            // guard against drift between the recurrence and the true residual
            res = a.residual_sup(x, b);
            if res <= tol {
                return Ok((res, it));
            }
            a.matvec_into(x, &mut r);
            for i in 0..n {
                r[i] = b[i] - r[i];
            }
        }
    }
    Err(LinalgError::NoConvergence {
        iterations: max_iter,
        residual: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thomas_solves_sample_system() {
        // [2 -1 0; -1 2 -1; 0 -1 2] x = [1 0 1] -> x = [1 1 1]
        let t = Tridiagonal {
            lower: vec![0.0, -1.0, -1.0],
            diag: vec![2.0, 2.0, 2.0],
            upper: vec![-1.0, -1.0, 0.0],
        };
        let x = t.solve(&[1.0, 0.0, 1.0]).unwrap();
        for v in x {
            assert!((v - 1.0).abs() < 1e-15);
        }
        let singular = Tridiagonal {
            lower: vec![0.0, 1.0],
            diag: vec![1.0, 1.0],
            upper: vec![1.0, 0.0],
        };
        assert!(matches!(singular.solve(&[1.0, 1.0]), Err(LinalgError::ZeroPivot(1))));
    }

    #[test]
    fn csr_roundtrips_tridiagonal() {
        let m = CsrMatrix::from_rows(vec![
            vec![(0, 4.0), (1, -1.0)],
            vec![(0, -1.0), (1, 4.0), (2, -1.0), (1, 0.5)],
            vec![(1, -1.0), (2, 4.0)],
        ]);
        let t = m.tridiagonal().unwrap();
        assert_eq!(t.diag, vec![4.0, 4.5, 4.0]);
        let b = vec![1.0, 2.0, 3.0];
        let x = t.solve(&b).unwrap();
        assert!(m.residual_sup(&x, &b) < 1e-14);
        let mut y = vec![0.0; 3];
        let (res, _) = bicgstab(&m, &b, &mut y, 1e-13, 50).unwrap();
        assert!(res <= 1e-13);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-12);
        }
        let wide = CsrMatrix::from_rows(vec![vec![(0, 1.0), (2, 1.0)], vec![(1, 1.0)], vec![(2, 1.0)]]);
        assert!(wide.tridiagonal().is_err());
    }

    #[test]
    fn bicgstab_handles_nonsymmetric_m_matrix() {
        let n = 50;
        let rows = (0..n)
            .map(|i| {
                let mut r = vec![(i, 3.0)];
                if i > 0 {
                    r.push((i - 1, -1.5));
                }
                if i + 1 < n {
                    r.push((i + 1, -0.5));
                }
                if i + 7 < n {
                    r.push((i + 7, -0.25));
                }
                r
            })
            .collect();
        let m = CsrMatrix::from_rows(rows);
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut x = vec![0.0; n];
        let (res, _) = bicgstab(&m, &b, &mut x, 1e-12, 500).unwrap();
        assert!(res <= 1e-12);
        assert!(m.residual_sup(&x, &b) <= 1e-12);
    }
}
