//! Shared factored representation of the design blocks.
//!
//! Holds orthonormal bases for the spans of `X1`, `M1·X2`, `M1·Y`, `N1·Y`,
//! `M·Y` and `M[Ybar]·X2`, plus the small `G x G` covariance blocks built
//! from them. Estimation and the statistic weight operators both read from
//! here, so the annihilators are factored exactly once per dataset.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{OrthoBasis, ThinQr, DEFAULT_RANK_TOL};
use crate::model::{ExogeneityProblem, Kappas, ProblemDims};

#[derive(Debug, Clone)]
pub(crate) struct DesignFactor {
    pub dims: ProblemDims,
    pub kappas: Kappas,
    /// Basis of `span(X1)`; `M1 x = x - q1(q1'x)`.
    pub q1: OrthoBasis,
    /// Basis of `span(M1 X2)`; `N1 x = q2(q2'x)`.
    pub q2: OrthoBasis,
    pub m1y: DMatrix<f64>,
    /// Least-squares factor of `M1 Y`; `solve` gives `(Y'M1Y)^-1 Y'M1 x`.
    pub m1y_qr: ThinQr,
    /// Least-squares factor of `N1 Y`; `solve` gives `(Y'N1Y)^-1 Y'N1 x`.
    pub n1y_qr: ThinQr,
    /// Basis of `span(M[Ybar] X2)`; the numerator projector of the RH
    /// statistic, `T·Psi_R = P[M[Ybar] X2]`.
    pub qw: OrthoBasis,
    pub omega_iv: DMatrix<f64>,
    pub omega_ls: DMatrix<f64>,
    pub sigma_v: DMatrix<f64>,
    pub omega_iv_inv: DMatrix<f64>,
    pub omega_ls_inv: DMatrix<f64>,
    pub delta_hat: DMatrix<f64>,
    /// `Delta^-1` by the additive positive-definite closed form; never by
    /// inverting `delta_hat`.
    pub delta_inv: DMatrix<f64>,
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| {
        Error::IdentificationData(format!("{what} is not positive definite"))
    })
}

impl DesignFactor {
    pub fn new(p: &ExogeneityProblem) -> Result<Self> {
        let dims = p.dims();
        let t = dims.t as f64;
        let tol = DEFAULT_RANK_TOL;

        let q1 = OrthoBasis::new(p.x1(), tol)?;
        if q1.rank() < dims.k1 {
            return Err(Error::IdentificationData(
                "X1 is rank deficient".into(),
            ));
        }
        let m1x2 = q1.annihilate_mat(p.x2())?;
        let q2 = OrthoBasis::new(&m1x2, tol)?;
        if q2.rank() < dims.k2 {
            return Err(Error::IdentificationData(
                "instruments are collinear with X1".into(),
            ));
        }

        let m1y = q1.annihilate_mat(p.endog())?;
        let m1y_qr = ThinQr::new(&m1y, tol, "M1·Y")?;
        let n1y = q2.basis() * q2.basis().tr_mul(&m1y);
        let n1y_qr = ThinQr::new(&n1y, tol, "N1·Y").map_err(|_| {
            Error::IdentificationData(
                "Y'N1Y is numerically singular: instruments carry no \
                 information on Y given X1"
                    .into(),
            )
        })?;

        // M Y = M1 Y - N1 Y.
        let my = &m1y - &n1y;
        let omega_iv = n1y.tr_mul(&n1y) / t;
        let omega_ls = m1y.tr_mul(&m1y) / t;
        let sigma_v = my.tr_mul(&my) / t;

        let sigma_v_inv = spd_inverse(&sigma_v, "Sigma_V (= Y'MY/T)")?;
        let omega_iv_inv = spd_inverse(&omega_iv, "Omega_IV")?;
        let omega_ls_inv = spd_inverse(&omega_ls, "Omega_LS")?;
        let delta_hat = &omega_iv_inv - &omega_ls_inv;
        let delta_inv = &omega_iv + &omega_iv * &sigma_v_inv * &omega_iv;

        // M[Ybar] X2 = M1 X2 - P[M1 Y] (M1 X2).
        let qa = m1y_qr.q();
        let ybar_x2 = &m1x2 - qa * qa.tr_mul(&m1x2);
        let qw = OrthoBasis::new(&ybar_x2, tol)?;
        if qw.rank() < dims.k2 {
            return Err(Error::IdentificationData(
                "[Y, X1, X2] is rank deficient".into(),
            ));
        }

        Ok(DesignFactor {
            kappas: dims.kappas(),
            dims,
            q1,
            q2,
            m1y,
            m1y_qr,
            n1y_qr,
            qw,
            omega_iv,
            omega_ls,
            sigma_v,
            omega_iv_inv,
            omega_ls_inv,
            delta_hat,
            delta_inv,
        })
    }

    /// `M x = x - P[X] x`, using `P[X] = P[X1] + P[M1 X2]`.
    pub fn annihilate_full(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        if self.q1.rank() > 0 {
            out -= self.q1.basis() * self.q1.coords(x);
        }
        if self.q2.rank() > 0 {
            out -= self.q2.basis() * self.q2.coords(x);
        }
        out
    }
}
