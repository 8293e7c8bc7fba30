//! Compressed sparse row storage and Jacobi-preconditioned conjugate gradients.

use crate::error::{Result, UotError};

pub const DEFAULT_TOL: f64 = 1e-10;

/// Square sparse matrix in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_raw(
        n: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != n + 1 || row_ptr[n] != col_idx.len() || col_idx.len() != values.len() {
            return Err(UotError::invalid("inconsistent CSR arrays"));
        }
        if row_ptr.windows(2).any(|w| w[0] > w[1]) || col_idx.iter().any(|&c| c >= n) {
            return Err(UotError::invalid("malformed CSR structure"));
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds a matrix from (row, col, value) triplets, summing duplicates.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            if r >= n || c >= n {
                return Err(UotError::invalid(format!("triplet ({r}, {c}) out of range for n={n}")));
            }
            rows[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (c, v) in row {
                if col_idx.len() > *row_ptr.last().unwrap() && *col_idx.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.get(r, r)).collect()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[p] * x[self.col_idx[p]];
            }
            *yr = acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    /// Largest `|A(i,j) - A(j,i)|` over stored entries.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

impl SolveReport {
    /// Turns a non-converged report into an error.
    pub fn ok(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(UotError::SolverFailure {
                iterations: self.iterations,
                residual: self.relative_residual,
            })
        }
    }
}

/// Solver settings shared by every PDE solve in a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub tol: f64,
    /// `None` means `10 * n`.
    pub max_iter: Option<usize>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: None,
        }
    }
}

impl SolverSettings {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, max_iter: None }
    }

    pub fn max_iter_for(&self, n: usize) -> usize {
        self.max_iter.unwrap_or(10 * n)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients with diagonal preconditioning, starting from zero.
///
/// Stops once `‖b - Ax‖ / ‖b‖ ≤ tol`. Running out of iterations is reported through
/// [`SolveReport::converged`], not as an error.
pub fn solve_cg(
    a: &CsrMatrix,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = a.dim();
    if b.len() != n {
        return Err(UotError::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }
    if !(tol > 0.0 && tol < 1.0) {
        return Err(UotError::invalid(format!("CG tolerance must lie in (0, 1), got {tol}")));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(UotError::invalid("right-hand side has non-finite entries"));
    }

    let mut x = vec![0.0; n];
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok((
            x,
            SolveReport {
                iterations: 0,
                relative_residual: 0.0,
                converged: true,
            },
        ));
    }

    let inv_diag: Vec<f64> = a
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, m)| r * m).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut res = 1.0;

    for it in 0..max_iter {
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            // Not positive definite along p; report what we have.
            return Ok((
                x,
                SolveReport {
                    iterations: it,
                    relative_residual: res,
                    converged: false,
                },
            ));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = dot(&r, &r).sqrt() / b_norm;
        if res <= tol {
            return Ok((
                x,
                SolveReport {
                    iterations: it + 1,
                    relative_residual: res,
                    converged: true,
                },
            ));
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }

    Ok((
        x,
        SolveReport {
            iterations: max_iter,
            relative_residual: res,
            converged: false,
        },
    ))
}
