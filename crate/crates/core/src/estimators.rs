//! OLS and 2SLS estimation with every scale and covariance-block estimator
//! entering the exogeneity statistics.
//!
//! All scale estimators divide by `T`, without degrees-of-freedom
//! correction. `Delta^-1` is produced by the additive closed form
//! `Omega_IV + Omega_IV (Omega_LS - Omega_IV)^-1 Omega_IV`, which is
//! positive definite by construction even when `Delta` itself is
//! ill-conditioned under strong instruments; direct inversion exists only
//! as a cross-check path.

use nalgebra::{DMatrix, DVector};

use crate::design::DesignFactor;
use crate::error::{Error, Result};
use crate::linalg::ThinQr;
use crate::model::ExogeneityProblem;

/// Estimates and covariance blocks of a fitted problem.
#[derive(Debug, Clone)]
pub struct EstimatorBundle {
    pub beta_ols: DVector<f64>,
    pub beta_2sls: DVector<f64>,
    pub gamma_ols: DVector<f64>,
    pub gamma_2sls: DVector<f64>,
    pub u_hat: DVector<f64>,
    pub u_tilde: DVector<f64>,
    pub sigma2_hat: f64,
    pub sigma2_tilde: f64,
    pub sigma2_tilde1: f64,
    pub sigma2_tilde2: f64,
    pub sigma2_tilde_e: f64,
    pub omega_iv: DMatrix<f64>,
    pub omega_ls: DMatrix<f64>,
    /// Sample covariance of the reduced-form LS residuals, `Y'MY/T`.
    pub sigma_v: DMatrix<f64>,
    pub delta_hat: DMatrix<f64>,
    pub delta_hat_inv: DMatrix<f64>,
}

impl EstimatorBundle {
    /// `(b_2sls - b_ols)' Delta^-1 (b_2sls - b_ols)`, the common numerator
    /// of the DWH statistics.
    pub fn contrast_quadratic(&self) -> f64 {
        let d = &self.beta_2sls - &self.beta_ols;
        (&d.transpose() * &self.delta_hat_inv * &d)[(0, 0)]
    }
}

/// Fits OLS and 2SLS and assembles every scale estimator.
pub fn fit(p: &ExogeneityProblem) -> Result<EstimatorBundle> {
    let f = DesignFactor::new(p)?;
    fit_with_design(p, &f)
}

pub(crate) fn fit_with_design(
    p: &ExogeneityProblem,
    f: &DesignFactor,
) -> Result<EstimatorBundle> {
    let t = f.dims.t as f64;
    let y = p.y();

    let beta_ols = f.m1y_qr.solve(y);
    let beta_2sls = f.n1y_qr.solve(y);

    let x1_qr = ThinQr::new(p.x1(), 1e-10, "X1")?;
    let resid_ols = y - p.endog() * &beta_ols;
    let resid_2sls = y - p.endog() * &beta_2sls;
    let gamma_ols = x1_qr.solve(&resid_ols);
    let gamma_2sls = x1_qr.solve(&resid_2sls);

    let u_hat = f.q1.annihilate_vec(&resid_ols)?;
    let u_tilde = f.q1.annihilate_vec(&resid_2sls)?;

    let sigma2_hat = u_hat.norm_squared() / t;
    let sigma2_tilde = u_tilde.norm_squared() / t;
    // N1 w = q2 (q2' w); M w = w - P[X] w.
    let sigma2_tilde1 = f.q2.coords(&resid_2sls).norm_squared() / t;
    let sigma2_tilde_e = f.annihilate_full(&resid_2sls).norm_squared() / t;

    let diff = &beta_2sls - &beta_ols;
    let quad = (&diff.transpose() * &f.delta_inv * &diff)[(0, 0)];
    let sigma2_tilde2 = sigma2_hat - quad;

    Ok(EstimatorBundle {
        beta_ols,
        beta_2sls,
        gamma_ols,
        gamma_2sls,
        u_hat,
        u_tilde,
        sigma2_hat,
        sigma2_tilde,
        sigma2_tilde1,
        sigma2_tilde2,
        sigma2_tilde_e,
        omega_iv: f.omega_iv.clone(),
        omega_ls: f.omega_ls.clone(),
        sigma_v: f.sigma_v.clone(),
        delta_hat: f.delta_hat.clone(),
        delta_hat_inv: f.delta_inv.clone(),
    })
}

/// `Delta^-1` by its three closed forms: the `Omega_IV` additive form, the
/// `Omega_LS Sigma_V^-1 Omega_LS - Omega_LS` form, and direct inversion of
/// `Delta`. Test oracle; the forms must agree on valid data.
pub fn delta_inverse_paths(b: &EstimatorBundle) -> Result<[DMatrix<f64>; 3]> {
    let sigma_v_inv = b
        .sigma_v
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::IdentificationData("Sigma_V is singular".into()))?;
    let additive = &b.omega_iv + &b.omega_iv * &sigma_v_inv * &b.omega_iv;
    let ls_form = &b.omega_ls * &sigma_v_inv * &b.omega_ls - &b.omega_ls;
    let direct = b
        .delta_hat
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::IdentificationData("Delta is singular".into()))?;
    Ok([additive, ls_form, direct])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{desk_problem, dense_oracle, zero_error_problem};
    use nalgebra::DMatrix;

    #[test]
    fn desk_fit_matches_dense_oracle() {
        let p = desk_problem();
        let b = fit(&p).unwrap();
        let o = dense_oracle(&p);

        assert!((&b.beta_ols - &o.beta_ols).norm() < 1e-10);
        assert!((&b.beta_2sls - &o.beta_2sls).norm() < 1e-10);
        assert!((&b.gamma_ols - &o.gamma_ols).norm() < 1e-10);
        assert!((b.sigma2_hat - o.sigma2_hat).abs() < 1e-10);
        assert!((b.sigma2_tilde - o.sigma2_tilde).abs() < 1e-10);
        assert!((b.sigma2_tilde1 - o.sigma2_tilde1).abs() < 1e-10);
        assert!((b.sigma2_tilde2 - o.sigma2_tilde2).abs() < 1e-10);
        assert!((b.sigma2_tilde_e - o.sigma2_tilde_e).abs() < 1e-10);
        assert!((&b.omega_iv - &o.omega_iv).norm() < 1e-10);
        assert!((&b.omega_ls - &o.omega_ls).norm() < 1e-10);
        assert!((&b.delta_hat_inv - &o.delta_inv).norm() < 1e-8);
    }

    #[test]
    fn scale_identities_hold() {
        let p = desk_problem();
        let b = fit(&p).unwrap();
        assert!((b.sigma2_tilde1 - (b.sigma2_tilde - b.sigma2_tilde_e)).abs() < 1e-10);
        assert!(
            (b.sigma2_tilde2 - (b.sigma2_hat - b.contrast_quadratic())).abs() < 1e-10
        );
        assert!(b.sigma2_tilde2 >= 0.0);
        // u_tilde really is M1(y - Y b_2sls).
        let resid = p.y() - p.endog() * &b.beta_2sls;
        let proj =
            &resid - p.x1() * crate::linalg::lstsq_ssr(p.x1(), &resid).unwrap().0;
        assert!((&b.u_tilde - &proj).norm() < 1e-10);
    }

    #[test]
    fn delta_inverse_paths_agree_and_are_pd() {
        let p = desk_problem();
        let b = fit(&p).unwrap();
        let [add, ls, direct] = delta_inverse_paths(&b).unwrap();
        let rel = |x: &DMatrix<f64>, y: &DMatrix<f64>| (x - y).norm() / x.norm();
        assert!(rel(&add, &ls) < 1e-8);
        assert!(rel(&add, &direct) < 1e-8);
        assert!(add.clone().cholesky().is_some());
        // Delta^-1 Delta = I.
        let eye = &add * &b.delta_hat;
        assert!((eye - DMatrix::identity(1, 1)).norm() < 1e-8);
    }

    #[test]
    fn sandwich_bound_holds_for_random_directions() {
        let p = desk_problem();
        let b = fit(&p).unwrap();
        let sigma_v_inv = b.sigma_v.clone().cholesky().unwrap().inverse();
        let upper = &b.omega_ls * &sigma_v_inv * &b.omega_ls;
        for s in 0..20 {
            let d = nalgebra::DVector::from_fn(1, |_, _| (s as f64 * 0.7).sin() + 0.1);
            let q = |m: &DMatrix<f64>| (&d.transpose() * m * &d)[(0, 0)];
            assert!(q(&b.omega_iv) <= q(&b.delta_hat_inv) + 1e-10);
            assert!(q(&b.delta_hat_inv) <= q(&upper) + 1e-10);
        }
    }

    #[test]
    fn exact_fit_gives_zero_residual_scales() {
        let (p, beta) = zero_error_problem();
        let b = fit(&p).unwrap();
        assert!((&b.beta_ols - &beta).norm() < 1e-8);
        assert!((&b.beta_2sls - &beta).norm() < 1e-8);
        assert!(b.sigma2_hat.abs() < 1e-16);
        assert!(b.sigma2_tilde.abs() < 1e-16);
    }

    #[test]
    fn uninformative_instruments_error() {
        // Y orthogonal to X2 given X1: N1 Y = 0.
        let p = desk_problem();
        let q1 = crate::linalg::OrthoBasis::with_default_tol(p.x1()).unwrap();
        let m1x2 = q1.annihilate_mat(p.x2()).unwrap();
        let q2 = crate::linalg::OrthoBasis::with_default_tol(&m1x2).unwrap();
        // Build Y inside span(X1) + orthogonal complement of span(X1, X2).
        let raw = p.endog().clone();
        let cleaned = q2.annihilate_mat(&raw).unwrap();
        let r = ExogeneityProblem::new(
            p.y().clone(),
            cleaned,
            p.x1().clone(),
            p.x2().clone(),
            false,
        );
        match r {
            // Construction may already reject [P[X]Y, X1] rank failure; or
            // fit fails on Y'N1Y.
            Err(crate::error::Error::IdentificationData(_)) => {}
            Ok(p2) => {
                assert!(matches!(
                    fit(&p2),
                    Err(crate::error::Error::IdentificationData(_))
                ));
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
