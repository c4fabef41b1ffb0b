//! Orthogonal-decomposition primitives.
//!
//! Every projection and annihilator downstream is applied through a stored
//! column-orthonormal basis, so a quadratic form `x'Wx` costs one or two
//! matrix-vector products instead of a materialized `T x T` matrix. The
//! Monte Carlo engine evaluates these forms `N+1` times per dataset, which
//! makes the factored representation the difference between `O(T·dim)` and
//! `O(T^2)` per draw.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default relative tolerance for rank decisions. Exact rank deficiency is a
/// data error and near-deficiency must be surfaced, so the cutoff sits well
/// above f64 noise accumulated by the factorizations.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Column-orthonormal basis of the column space of a source matrix.
#[derive(Debug, Clone)]
pub struct OrthoBasis {
    source_cols: usize,
    basis: DMatrix<f64>,
    tol_used: f64,
}

impl OrthoBasis {
    /// Computes an orthonormal basis of `span(a)` by Householder QR with
    /// column pivoting. The numerical rank is the number of pivoted diagonal
    /// entries of `R` above `tol` relative to the largest one.
    pub fn new(a: &DMatrix<f64>, tol: f64) -> Result<Self> {
        if !tol.is_finite() || tol <= 0.0 {
            return Err(Error::invalid("rank tolerance must be positive"));
        }
        if a.nrows() == 0 {
            return Err(Error::invalid("matrix must have at least one row"));
        }
        ensure_finite(a, "orthonormal basis source")?;

        let t = a.nrows();
        let m = a.ncols();
        if m == 0 {
            return Ok(OrthoBasis {
                source_cols: 0,
                basis: DMatrix::zeros(t, 0),
                tol_used: tol,
            });
        }

        let qr = a.clone().col_piv_qr();
        let r = qr.r();
        let q = qr.q();
        let lead = r.get((0, 0)).map_or(0.0, |v| v.abs());
        let rank = if lead == 0.0 {
            0
        } else {
            (0..r.nrows().min(r.ncols()))
                .take_while(|&i| r[(i, i)].abs() > tol * lead)
                .count()
        };

        Ok(OrthoBasis {
            source_cols: m,
            basis: q.columns(0, rank).into_owned(),
            tol_used: tol,
        })
    }

    /// Basis with the default rank tolerance.
    pub fn with_default_tol(a: &DMatrix<f64>) -> Result<Self> {
        Self::new(a, DEFAULT_RANK_TOL)
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn source_cols(&self) -> usize {
        self.source_cols
    }

    pub fn rows(&self) -> usize {
        self.basis.nrows()
    }

    pub fn tol_used(&self) -> f64 {
        self.tol_used
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Basis coordinates `B'x` of a vector.
    pub fn coords(&self, x: &DVector<f64>) -> DVector<f64> {
        self.basis.tr_mul(x)
    }

    /// Projection `P[A]x = B(B'x)`.
    pub fn project_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.rank() == 0 {
            return DVector::zeros(x.len());
        }
        &self.basis * self.coords(x)
    }

    /// Annihilation `M[A]x = x - B(B'x)` for a vector.
    pub fn annihilate_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.rows() {
            return Err(Error::invalid(format!(
                "annihilate: vector has {} rows, basis has {}",
                x.len(),
                self.rows()
            )));
        }
        if self.rank() == 0 {
            return Ok(x.clone());
        }
        Ok(x - &self.basis * self.basis.tr_mul(x))
    }

    /// Annihilation applied columnwise to a matrix.
    pub fn annihilate_mat(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.rows() {
            return Err(Error::invalid(format!(
                "annihilate: matrix has {} rows, basis has {}",
                x.nrows(),
                self.rows()
            )));
        }
        if self.rank() == 0 {
            return Ok(x.clone());
        }
        Ok(x - &self.basis * self.basis.tr_mul(x))
    }
}

/// Thin pivoted-QR factorization of a full-column-rank matrix, kept for
/// least-squares solves without forming normal equations.
#[derive(Debug, Clone)]
pub struct ThinQr {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    /// Column permutation as an index map: `a.column(perm[j])` is the j-th
    /// pivoted column.
    perm: Vec<usize>,
    cols: usize,
}

impl ThinQr {
    /// Factorizes `a`, requiring full column rank at `tol`.
    pub fn new(a: &DMatrix<f64>, tol: f64, what: &str) -> Result<Self> {
        let m = a.ncols();
        if m == 0 {
            return Ok(ThinQr {
                q: DMatrix::zeros(a.nrows(), 0),
                r: DMatrix::zeros(0, 0),
                perm: Vec::new(),
                cols: 0,
            });
        }
        if a.nrows() < m {
            return Err(Error::IdentificationData(format!(
                "{what}: fewer rows than columns ({} x {})",
                a.nrows(),
                m
            )));
        }
        let qr = a.clone().col_piv_qr();
        let q = qr.q().columns(0, m).into_owned();
        let r = qr.r().rows(0, m).into_owned();
        let lead = r[(0, 0)].abs();
        let deficient =
            lead == 0.0 || (0..m).any(|i| r[(i, i)].abs() <= tol * lead);
        if deficient {
            return Err(Error::IdentificationData(format!(
                "{what}: numerically rank deficient at tolerance {tol:e}"
            )));
        }
        // Recover the permutation by applying the sequence to 0..m-1.
        let mut idx = DMatrix::<f64>::zeros(1, m);
        for j in 0..m {
            idx[(0, j)] = j as f64;
        }
        qr.p().permute_columns(&mut idx);
        let perm: Vec<usize> = (0..m).map(|j| idx[(0, j)] as usize).collect();
        Ok(ThinQr { q, r, perm, cols: m })
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Orthonormal basis columns of the factorization.
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Least-squares coefficients `argmin ||a·c - x||`.
    pub fn solve(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.cols == 0 {
            return DVector::zeros(0);
        }
        let w = self.q.tr_mul(x);
        let z = self
            .r
            .view((0, 0), (self.cols, self.cols))
            .solve_upper_triangular(&w)
            .expect("validated full rank");
        let mut out = DVector::zeros(self.cols);
        for j in 0..self.cols {
            out[self.perm[j]] = z[j];
        }
        out
    }
}

/// Numerical rank: the number of singular values above `tol` times the
/// largest one.
pub fn numerical_rank(a: &DMatrix<f64>, tol: f64) -> Result<usize> {
    if !tol.is_finite() || tol <= 0.0 {
        return Err(Error::invalid("rank tolerance must be positive"));
    }
    ensure_finite(a, "numerical rank input")?;
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(0);
    }
    let sv = a.clone().singular_values();
    let max = sv.max();
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > tol * max).count())
}

/// Least squares by SVD with the residual sum of squares. Independent of the
/// QR-based production path; used by the regression-form oracle.
pub fn lstsq_ssr(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    if a.nrows() != b.len() {
        return Err(Error::invalid("lstsq: row mismatch"));
    }
    if a.ncols() == 0 {
        return Ok((DVector::zeros(0), b.norm_squared()));
    }
    let svd = a.clone().svd(true, true);
    let coef = svd
        .solve(b, 1e-13)
        .map_err(|e| Error::invalid(format!("lstsq: {e}")))?;
    let resid = b - a * &coef;
    Ok((coef, resid.norm_squared()))
}

pub(crate) fn ensure_finite(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} contains non-finite entries")));
    }
    Ok(())
}

pub(crate) fn ensure_finite_vec(a: &DVector<f64>, what: &str) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} contains non-finite entries")));
    }
    Ok(())
}
