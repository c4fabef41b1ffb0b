//! Deterministic fixtures and dense oracles backing the test suites.
//!
//! The dense paths here materialize the full `T x T` projection matrices
//! with explicit inverses. They are deliberately independent of the factored
//! production code so cross-checks are meaningful.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::ExogeneityProblem;
use crate::rng::{substream, StreamDomain};

/// Fixed-seed 20-row problem with one endogenous regressor, one exogenous
/// column plus intercept, and three instruments.
pub fn desk_problem() -> ExogeneityProblem {
    let (y, endog, x1, x2) = desk_parts();
    ExogeneityProblem::new(y, endog, x1, x2, true).expect("desk data is valid")
}

fn desk_parts() -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let t = 20;
    let mut rng = substream(0xDE5C, StreamDomain::Design, 0);
    let normal = |rng: &mut rand_chacha::ChaCha12Rng| -> f64 {
        StandardNormal.sample(rng)
    };
    let x1 = DMatrix::from_fn(t, 1, |_, _| normal(&mut rng));
    let x2 = DMatrix::from_fn(t, 3, |_, _| normal(&mut rng));
    let v = DVector::from_fn(t, |_, _| normal(&mut rng));
    let e = DVector::from_fn(t, |_, _| normal(&mut rng));
    let endog = DMatrix::from_fn(t, 1, |i, _| {
        0.6 * x2[(i, 0)] - 0.4 * x2[(i, 1)] + 0.3 * x1[(i, 0)] + v[i]
    });
    let u = &v * 0.7 + &e;
    let y = DVector::from_fn(t, |i, _| 1.0 + 1.5 * endog[(i, 0)] + 0.8 * x1[(i, 0)] + u[i]);
    (y, endog, x1, x2)
}

/// Desk design with `y = Y*beta + X1*gamma` exactly (no error term).
pub fn zero_error_problem() -> (ExogeneityProblem, DVector<f64>) {
    let (_, endog, x1, x2) = desk_parts();
    let beta = DVector::from_element(1, 1.5);
    let y = &endog * &beta + x1.column(0) * 0.8;
    let p = ExogeneityProblem::new(y, endog, x1, x2, true).expect("valid");
    (p, beta)
}

/// A random valid problem for randomized identity suites. `k1` counts all
/// included exogenous columns; no intercept is added.
pub fn random_problem(
    rng: &mut rand_chacha::ChaCha12Rng,
    t: usize,
    g: usize,
    k1: usize,
    k2: usize,
) -> ExogeneityProblem {
    let normal = |rng: &mut rand_chacha::ChaCha12Rng| -> f64 {
        StandardNormal.sample(rng)
    };
    loop {
        let x1 = DMatrix::from_fn(t, k1, |_, _| normal(rng));
        let x2 = DMatrix::from_fn(t, k2, |_, _| normal(rng));
        let v = DMatrix::from_fn(t, g, |_, _| normal(rng));
        // First-stage coefficients strong enough to keep ranks comfortable.
        let pi2 = DMatrix::from_fn(k2, g, |i, j| {
            if i % g == j {
                0.8
            } else {
                0.2 * normal(rng)
            }
        });
        let endog = &x2 * &pi2 + &v;
        let beta = DVector::from_fn(g, |i, _| 1.0 + i as f64);
        let gamma = DVector::from_fn(k1, |i, _| 0.5 - 0.1 * i as f64);
        let a = DVector::from_fn(g, |_, _| 0.4 * rng.random::<f64>());
        let e = DVector::from_fn(t, |_, _| normal(rng));
        let u = &v * &a + e;
        let y = &endog * &beta + &x1 * &gamma + u;
        if let Ok(p) = ExogeneityProblem::new(y, endog, x1, x2, false) {
            return p;
        }
    }
}

/// Dense-matrix estimator quantities (independent oracle path).
pub struct DenseOracle {
    pub beta_ols: DVector<f64>,
    pub beta_2sls: DVector<f64>,
    pub gamma_ols: DVector<f64>,
    pub sigma2_hat: f64,
    pub sigma2_tilde: f64,
    pub sigma2_tilde1: f64,
    pub sigma2_tilde2: f64,
    pub sigma2_tilde_e: f64,
    pub omega_iv: DMatrix<f64>,
    pub omega_ls: DMatrix<f64>,
    pub delta_inv: DMatrix<f64>,
}

fn dense_projector(a: &DMatrix<f64>) -> DMatrix<f64> {
    let t = a.nrows();
    if a.ncols() == 0 {
        return DMatrix::zeros(t, t);
    }
    let gram = a.tr_mul(a);
    let inv = gram.try_inverse().expect("full rank");
    a * inv * a.transpose()
}

fn dense_annihilator(a: &DMatrix<f64>) -> DMatrix<f64> {
    let t = a.nrows();
    DMatrix::identity(t, t) - dense_projector(a)
}

pub fn dense_oracle(p: &ExogeneityProblem) -> DenseOracle {
    let t = p.dims().t as f64;
    let y = p.y();
    let yy = p.endog();
    let m1 = dense_annihilator(p.x1());
    let px = dense_projector(&p.concat_x());
    let m = DMatrix::identity(p.dims().t, p.dims().t) - &px;
    let n1 = &m1 * &px;

    let y_m1_y = yy.tr_mul(&(&m1 * yy));
    let y_n1_y = yy.tr_mul(&(&n1 * yy));
    let beta_ols = y_m1_y
        .clone()
        .try_inverse()
        .unwrap()
        * yy.tr_mul(&(&m1 * y));
    let beta_2sls = y_n1_y
        .clone()
        .try_inverse()
        .unwrap()
        * yy.tr_mul(&(&n1 * y));
    let x1g = p.x1().tr_mul(p.x1());
    let gamma_ols = if p.dims().k1 > 0 {
        x1g.try_inverse().unwrap() * p.x1().tr_mul(&(y - yy * &beta_ols))
    } else {
        DVector::zeros(0)
    };

    let u_hat = &m1 * (y - yy * &beta_ols);
    let r2 = y - yy * &beta_2sls;
    let u_tilde = &m1 * &r2;
    let sigma2_hat = u_hat.norm_squared() / t;
    let sigma2_tilde = u_tilde.norm_squared() / t;
    let sigma2_tilde1 = (r2.transpose() * &n1 * &r2)[(0, 0)] / t;
    let sigma2_tilde_e = (r2.transpose() * &m * &r2)[(0, 0)] / t;

    let omega_iv = &y_n1_y / t;
    let omega_ls = &y_m1_y / t;
    let delta = omega_iv.clone().try_inverse().unwrap()
        - omega_ls.clone().try_inverse().unwrap();
    let delta_inv = delta.try_inverse().unwrap();
    let d = &beta_2sls - &beta_ols;
    let quad = (d.transpose() * &delta_inv * &d)[(0, 0)];
    let sigma2_tilde2 = sigma2_hat - quad;

    DenseOracle {
        beta_ols,
        beta_2sls,
        gamma_ols,
        sigma2_hat,
        sigma2_tilde,
        sigma2_tilde1,
        sigma2_tilde2,
        sigma2_tilde_e,
        omega_iv,
        omega_ls,
        delta_inv,
    }
}

/// Dense `T x T` weight matrices of the quadratic-form representation.
pub struct DenseWeights {
    pub psi0: DMatrix<f64>,
    pub lambda1: DMatrix<f64>,
    pub lambda2: DMatrix<f64>,
    pub lambda3: DMatrix<f64>,
    pub lambda4: DMatrix<f64>,
    pub psi_r: DMatrix<f64>,
    pub lambda_r: DMatrix<f64>,
    pub c1: DMatrix<f64>,
}

pub fn dense_weight_matrices(p: &ExogeneityProblem) -> DenseWeights {
    let dims = p.dims();
    let t = dims.t as f64;
    let tn = dims.t;
    let yy = p.endog();
    let m1 = dense_annihilator(p.x1());
    let px = dense_projector(&p.concat_x());
    let n1 = &m1 * &px;

    let m1y = &m1 * yy;
    let n1y = &n1 * yy;
    let b1 = yy.tr_mul(&m1y).try_inverse().unwrap() * m1y.transpose();
    let b2 = yy.tr_mul(&n1y).try_inverse().unwrap() * n1y.transpose();
    let c1 = &b2 - &b1;
    let omega_iv = yy.tr_mul(&n1y) / t;
    let omega_ls = yy.tr_mul(&m1y) / t;
    let delta = omega_iv.try_inverse().unwrap() - omega_ls.try_inverse().unwrap();
    let delta_inv = delta.try_inverse().unwrap();
    let psi0 = c1.transpose() * &delta_inv * &c1;

    let lambda1 = &n1 * dense_annihilator(&n1y) * &n1 / t;
    let m_m1y = dense_annihilator(&m1y);
    let lambda4 = &m1 * &m_m1y * &m1 / t;
    let lambda2 = &lambda4 - &psi0;
    let n2 = DMatrix::identity(tn, tn) - &m1y * &b2;
    let lambda3 = &m1 * n2.transpose() * &n2 * &m1 / t;

    // Ybar = [Y, X1], Z = [Y, X1, X2].
    let mut ybar = DMatrix::zeros(tn, dims.g + dims.k1);
    ybar.view_mut((0, 0), (tn, dims.g)).copy_from(yy);
    ybar.view_mut((0, dims.g), (tn, dims.k1)).copy_from(p.x1());
    let mut z = DMatrix::zeros(tn, dims.g + dims.k1 + dims.k2);
    z.view_mut((0, 0), (tn, dims.g + dims.k1)).copy_from(&ybar);
    z.view_mut((0, dims.g + dims.k1), (tn, dims.k2))
        .copy_from(p.x2());
    let m_ybar = dense_annihilator(&ybar);
    let m_z = dense_annihilator(&z);
    let psi_r = (&m_ybar - &m_z) / t;
    let lambda_r = &m_z / t;

    DenseWeights {
        psi0,
        lambda1,
        lambda2,
        lambda3,
        lambda4,
        psi_r,
        lambda_r,
        c1,
    }
}
