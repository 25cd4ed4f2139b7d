//! Dense symmetric positive-definite solves for the normal equations.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, MatRef, Side};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Smallest accepted ratio between a squared Cholesky pivot and the largest
/// diagonal entry of the matrix.
pub const PIVOT_RATIO_TOL: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("normal matrix is singular: {null_dims} null direction(s)")]
    Singular { null_dims: usize },
    #[error("normal matrix contains non-finite entries")]
    NonFinite,
}

pub struct SpdFactor {
    llt: faer::linalg::solvers::Llt<f64>,
}

fn to_faer(m: &DMatrix<f64>) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

fn to_nalgebra(m: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Cholesky factorization that rejects numerically singular matrices and reports
/// the number of (near-)null directions.
pub fn factor_spd(h: &DMatrix<f64>) -> Result<SpdFactor, SolverError> {
    if h.iter().any(|x| !x.is_finite()) {
        return Err(SolverError::NonFinite);
    }
    let scale = h.diagonal().max();
    let singular = || SolverError::Singular {
        null_dims: null_dimension(h),
    };
    if !(scale > 0.0) {
        return Err(singular());
    }
    let llt = to_faer(h).llt(Side::Lower).map_err(|_| singular())?;
    let l = llt.L();
    let min_pivot = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_pivot < PIVOT_RATIO_TOL * scale {
        return Err(singular());
    }
    Ok(SpdFactor { llt })
}

/// Number of eigenvalues below `1e-12 · λ_max`.
pub fn null_dimension(h: &DMatrix<f64>) -> usize {
    let eig = h.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    eig.iter().filter(|v| **v <= 1e-12 * max).count().max(1)
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let b = MatRef::from_column_major_slice(rhs.as_slice(), rhs.len(), 1);
        let x = self.llt.solve(b);
        DVector::from_fn(rhs.len(), |i, _| x[(i, 0)])
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        to_nalgebra(&self.llt.solve(to_faer(rhs)))
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        to_nalgebra(&self.llt.inverse())
    }
}
