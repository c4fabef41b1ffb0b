//! The eight exogeneity statistics by three independently coded routes, the
//! factored weight operators for fast repeated evaluation, reference
//! p-values, and the block-triangular invariance transform.
//!
//! Route one (`compute_direct`) follows the estimator definitions: Wald
//! contrasts of OLS against 2SLS with the various scale estimators. Route
//! two (`compute_from_vector`) evaluates the same statistics as ratios of
//! quadratic forms in a single vector, which is what the Monte Carlo engine
//! replays on simulated error vectors. Route three (`compute_ssr_oracle`)
//! recovers them from restricted/unrestricted sums of squared residuals of
//! augmented regressions and exists to cross-check the other two.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::DesignFactor;
use crate::dist;
use crate::error::{Error, Result};
use crate::estimators::EstimatorBundle;
use crate::linalg::{self, lstsq_ssr, numerical_rank, OrthoBasis};
use crate::model::{ExogeneityProblem, Kappas, ProblemDims};

/// Identifier of one exogeneity statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Statistic {
    T1,
    T2,
    T3,
    T4,
    H1,
    H2,
    H3,
    R,
}

impl Statistic {
    pub const ALL: [Statistic; 8] = [
        Statistic::T1,
        Statistic::T2,
        Statistic::T3,
        Statistic::T4,
        Statistic::H1,
        Statistic::H2,
        Statistic::H3,
        Statistic::R,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::T1 => "T1",
            Statistic::T2 => "T2",
            Statistic::T3 => "T3",
            Statistic::T4 => "T4",
            Statistic::H1 => "H1",
            Statistic::H2 => "H2",
            Statistic::H3 => "H3",
            Statistic::R => "R",
        }
    }

    pub fn parse(s: &str) -> Option<Statistic> {
        Statistic::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
    }

    /// Whether the reference p-value is exact under Gaussian errors (an F
    /// law) rather than a large-sample chi-square approximation.
    pub fn reference_is_exact(self) -> bool {
        matches!(self, Statistic::T1 | Statistic::T2 | Statistic::R)
    }
}

impl std::fmt::Display for Statistic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Values of the eight statistics plus their degrees-of-freedom constants
/// and validity flags.
#[derive(Debug, Clone, Serialize)]
pub struct StatisticSet {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub t4: f64,
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
    pub r: f64,
    pub kappas: Kappas,
    /// False when `k2 = G`; `t1` is NaN in that case.
    pub t1_defined: bool,
    /// Whether the H1 scale matrix was positive definite. H1 is reported
    /// as-is either way (it can be negative in finite samples); NaN only if
    /// the matrix was numerically singular.
    pub h1_scale_pd: bool,
    /// Set when a perfect fit forced 0/0 statistics to zero.
    pub degenerate: bool,
}

impl StatisticSet {
    pub fn get(&self, s: Statistic) -> f64 {
        match s {
            Statistic::T1 => self.t1,
            Statistic::T2 => self.t2,
            Statistic::T3 => self.t3,
            Statistic::T4 => self.t4,
            Statistic::H1 => self.h1,
            Statistic::H2 => self.h2,
            Statistic::H3 => self.h3,
            Statistic::R => self.r,
        }
    }

    pub fn defined(&self, s: Statistic) -> bool {
        match s {
            Statistic::T1 => self.t1_defined,
            _ => true,
        }
    }
}

/// The raw quadratic forms behind the statistics, for one vector.
#[derive(Debug, Clone)]
pub struct QuadraticForms {
    /// `x' Psi_0 x`
    pub psi0: f64,
    /// `x' Lambda_1 x`
    pub lambda1: f64,
    /// `x' Lambda_2 x`
    pub lambda2: f64,
    /// `x' Lambda_3 x`
    pub lambda3: f64,
    /// `x' Lambda_4 x`
    pub lambda4: f64,
    /// `x' Psi_R x`
    pub psi_r: f64,
    /// `x' Lambda_R x`
    pub lambda_r: f64,
    /// `C1 x`, the estimator contrast the vector induces.
    pub c1x: DVector<f64>,
    /// Mean square of `M1 x`, the degeneracy reference scale.
    pub scale: f64,
}

/// Factored weight operators of the quadratic-form representation. Depends
/// only on `X` and `Y`, never on the outcome vector, and is immutable, so
/// Monte Carlo workers share it read-only.
#[derive(Debug, Clone)]
pub struct WeightOperatorSet {
    f: DesignFactor,
}

impl WeightOperatorSet {
    pub fn dims(&self) -> ProblemDims {
        self.f.dims
    }

    pub fn kappas(&self) -> &Kappas {
        &self.f.kappas
    }

    pub fn omega_iv(&self) -> &DMatrix<f64> {
        &self.f.omega_iv
    }

    pub fn omega_ls(&self) -> &DMatrix<f64> {
        &self.f.omega_ls
    }

    /// `C1 x = B2 x - B1 x`.
    pub fn c1(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let m1x = self.f.q1.annihilate_vec(x)?;
        Ok(self.f.n1y_qr.solve(&m1x) - self.f.m1y_qr.solve(&m1x))
    }

    /// Evaluates every quadratic form in `O(T·dim)`.
    pub fn quadratic_forms(&self, x: &DVector<f64>) -> Result<QuadraticForms> {
        if x.len() != self.f.dims.t {
            return Err(Error::invalid(format!(
                "vector has {} rows, problem has {}",
                x.len(),
                self.f.dims.t
            )));
        }
        linalg::ensure_finite_vec(x, "statistic input vector")?;
        let t = self.f.dims.t as f64;

        let m1x = self.f.q1.annihilate_vec(x)?;
        let b1 = self.f.m1y_qr.solve(&m1x);
        let b2 = self.f.n1y_qr.solve(&m1x);
        let c1x = &b2 - &b1;
        let psi0 = (c1x.transpose() * &self.f.delta_inv * &c1x)[(0, 0)];

        let qa_coords = self.f.m1y_qr.q().tr_mul(&m1x);
        let lambda4 = (m1x.norm_squared() - qa_coords.norm_squared()).max(0.0) / t;
        let lambda2 = lambda4 - psi0;

        let n1_coords = self.f.q2.coords(&m1x);
        let n1x = self.f.q2.basis() * &n1_coords;
        let qb_coords = self.f.n1y_qr.q().tr_mul(&n1x);
        let lambda1 =
            (n1_coords.norm_squared() - qb_coords.norm_squared()).max(0.0) / t;

        let u_tilde = &m1x - &self.f.m1y * &b2;
        let lambda3 = u_tilde.norm_squared() / t;

        let psi_r = self.f.qw.coords(&m1x).norm_squared() / t;
        let lambda_r = lambda4 - psi_r;

        Ok(QuadraticForms {
            psi0,
            lambda1,
            lambda2,
            lambda3,
            lambda4,
            psi_r,
            lambda_r,
            c1x,
            scale: m1x.norm_squared() / t,
        })
    }
}

/// Builds the factored weight operators of a validated problem.
pub fn weight_operators(p: &ExogeneityProblem) -> Result<WeightOperatorSet> {
    Ok(WeightOperatorSet {
        f: DesignFactor::new(p)?,
    })
}

/// Degenerate-safe ratio: a vanishing denominator with a vanishing
/// numerator (perfect fit) yields zero, otherwise infinity.
fn ratio(num: f64, den: f64, scale: f64, degenerate: &mut bool) -> f64 {
    let eps = 1e-12 * scale.max(f64::MIN_POSITIVE);
    if den > eps {
        num / den
    } else if num.abs() <= eps {
        *degenerate = true;
        0.0
    } else {
        f64::INFINITY
    }
}

/// H1's scale matrix can be indefinite in finite samples; solve it by
/// symmetric eigendecomposition and report whether it was positive definite.
/// Returns NaN if the matrix is numerically singular.
fn h1_indefinite_form(
    sigma1: &DMatrix<f64>,
    contrast: &DVector<f64>,
    t: f64,
) -> (f64, bool) {
    let eig = sigma1.clone().symmetric_eigen();
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let pd = eig.eigenvalues.iter().all(|&v| v > 0.0);
    if max_abs == 0.0 {
        return (f64::NAN, false);
    }
    let cutoff = 1e-12 * max_abs;
    if eig.eigenvalues.iter().any(|&v| v.abs() <= cutoff) {
        return (f64::NAN, pd);
    }
    let w = eig.eigenvectors.tr_mul(contrast);
    let quad: f64 = w
        .iter()
        .zip(eig.eigenvalues.iter())
        .map(|(wi, li)| wi * wi / li)
        .sum();
    (t * quad, pd)
}

struct StatisticPieces<'a> {
    psi0: f64,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
    lambda4: f64,
    psi_r: f64,
    lambda_r: f64,
    /// Mean square of `M1 x`: the degeneracy reference. A denominator below
    /// `1e-12` of this is a perfect fit, not a small residual.
    scale: f64,
    contrast: &'a DVector<f64>,
    omega_iv_inv: &'a DMatrix<f64>,
    omega_ls_inv: &'a DMatrix<f64>,
}

fn assemble(dims: ProblemDims, pieces: StatisticPieces<'_>) -> Result<StatisticSet> {
    let kappas = dims.kappas();
    if kappas.kappa2 <= 0.0 || kappas.kappa3 <= 0.0 || kappas.kappa_r <= 0.0 {
        return Err(Error::DegenerateDims(format!(
            "T = {} is too small for (G, k1, k2) = ({}, {}, {})",
            dims.t, dims.g, dims.k1, dims.k2
        )));
    }
    let t = dims.t as f64;
    let scale = pieces.scale;
    let mut degenerate = false;

    let t1 = if dims.t1_defined() {
        kappas.kappa1 * ratio(pieces.psi0, pieces.lambda1, scale, &mut degenerate)
    } else {
        f64::NAN
    };
    let t2 = kappas.kappa2 * ratio(pieces.psi0, pieces.lambda2, scale, &mut degenerate);
    let t3 = kappas.kappa3 * ratio(pieces.psi0, pieces.lambda3, scale, &mut degenerate);
    let t4 = kappas.kappa4 * ratio(pieces.psi0, pieces.lambda4, scale, &mut degenerate);
    let h2 = t * ratio(pieces.psi0, pieces.lambda3, scale, &mut degenerate);
    let h3 = t * ratio(pieces.psi0, pieces.lambda4, scale, &mut degenerate);
    let r = kappas.kappa_r * ratio(pieces.psi_r, pieces.lambda_r, scale, &mut degenerate);

    let eps = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let (h1, h1_scale_pd) = if pieces.lambda3 <= eps && pieces.lambda4 <= eps {
        degenerate = true;
        (0.0, false)
    } else {
        let sigma1 = pieces.omega_iv_inv * pieces.lambda3
            - pieces.omega_ls_inv * pieces.lambda4;
        h1_indefinite_form(&sigma1, pieces.contrast, t)
    };

    Ok(StatisticSet {
        t1,
        t2,
        t3,
        t4,
        h1,
        h2,
        h3,
        r,
        kappas,
        t1_defined: dims.t1_defined(),
        h1_scale_pd,
        degenerate,
    })
}

/// Statistics from the estimator definitions (route one).
pub fn compute_direct(p: &ExogeneityProblem, b: &EstimatorBundle) -> Result<StatisticSet> {
    let dims = p.dims();
    let t = dims.t as f64;
    let quad = b.contrast_quadratic();
    let contrast = &b.beta_2sls - &b.beta_ols;

    // RH pieces from one augmented regression: T·sigma_R^2 is the SSR of y
    // on Z = [Y, X1, X2].
    let mut z = DMatrix::zeros(dims.t, dims.g + dims.k1 + dims.k2);
    z.view_mut((0, 0), (dims.t, dims.g)).copy_from(p.endog());
    z.view_mut((0, dims.g), (dims.t, dims.k1)).copy_from(p.x1());
    z.view_mut((0, dims.g + dims.k1), (dims.t, dims.k2))
        .copy_from(p.x2());
    let (_, ssr_z) = lstsq_ssr(&z, p.y())?;
    let sigma_r2 = ssr_z / t;
    let psi_r = (b.sigma2_hat - sigma_r2).max(0.0);
    let (_, m1y_ss) = lstsq_ssr(p.x1(), p.y())?;
    let scale = m1y_ss / t;

    let omega_iv_inv = spd_inv(&b.omega_iv, "Omega_IV")?;
    let omega_ls_inv = spd_inv(&b.omega_ls, "Omega_LS")?;

    assemble(
        dims,
        StatisticPieces {
            psi0: quad,
            lambda1: b.sigma2_tilde1,
            lambda2: b.sigma2_tilde2,
            lambda3: b.sigma2_tilde,
            lambda4: b.sigma2_hat,
            psi_r,
            lambda_r: sigma_r2,
            scale,
            contrast: &contrast,
            omega_iv_inv: &omega_iv_inv,
            omega_ls_inv: &omega_ls_inv,
        },
    )
}

/// Statistics as quadratic-form ratios in an arbitrary vector (route two).
/// With `x` equal to the observed outcome this reproduces
/// [`compute_direct`]; with simulated error vectors it realizes the pivotal
/// null representation the Monte Carlo test draws from.
pub fn compute_from_vector(w: &WeightOperatorSet, x: &DVector<f64>) -> Result<StatisticSet> {
    let qf = w.quadratic_forms(x)?;
    assemble(
        w.dims(),
        StatisticPieces {
            psi0: qf.psi0,
            lambda1: qf.lambda1,
            lambda2: qf.lambda2,
            lambda3: qf.lambda3,
            lambda4: qf.lambda4,
            psi_r: qf.psi_r,
            lambda_r: qf.lambda_r,
            scale: qf.scale,
            contrast: &qf.c1x,
            omega_iv_inv: &w.f.omega_iv_inv,
            omega_ls_inv: &w.f.omega_ls_inv,
        },
    )
}

fn spd_inv(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::IdentificationData(format!("{what} is singular")))
}

/// Statistics from restricted/unrestricted sums of squared residuals of the
/// augmented regressions (route three; test oracle). H1 has no
/// regression-SSR form and is NaN here.
pub fn compute_ssr_oracle(p: &ExogeneityProblem) -> Result<StatisticSet> {
    let dims = p.dims();
    let kappas = dims.kappas();
    if kappas.kappa2 <= 0.0 || kappas.kappa3 <= 0.0 || kappas.kappa_r <= 0.0 {
        return Err(Error::DegenerateDims("sample too small".into()));
    }
    let t = dims.t as f64;
    let y = p.y();

    let x = p.concat_x();
    let xb = OrthoBasis::with_default_tol(&x)?;
    let fitted_y = xb.basis() * xb.basis().tr_mul(p.endog()); // P[X] Y
    let v_hat = p.endog() - &fitted_y; // M[X] Y

    let concat = |blocks: &[&DMatrix<f64>]| -> DMatrix<f64> {
        let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
        let mut m = DMatrix::zeros(dims.t, cols);
        let mut at = 0;
        for b in blocks {
            m.view_mut((0, at), (dims.t, b.ncols())).copy_from(*b);
            at += b.ncols();
        }
        m
    };

    let x1 = p.x1();
    // Restricted (a = 0): y on [Y, X1].
    let (_, s0) = lstsq_ssr(&concat(&[p.endog(), x1]), y)?;
    // Unrestricted control-function regression: y on [Y, X1, V_hat].
    let (_, s_unres) = lstsq_ssr(&concat(&[p.endog(), x1, &v_hat]), y)?;

    // Second stage of 2SLS: y on [P[X]Y, X1]; the leading G coefficients
    // are the 2SLS beta.
    let (theta2, _) = lstsq_ssr(&concat(&[&fitted_y, x1]), y)?;
    let beta_2sls = theta2.rows(0, dims.g).into_owned();
    let z_tilde = y - p.endog() * &beta_2sls;
    // Intermediate regressions of y - Y·beta_2sls on X1 and on X.
    let (_, s_int0) = lstsq_ssr(&concat(&[x1]), &z_tilde)?;
    let (_, s_int) = lstsq_ssr(&x, &z_tilde)?;

    // RH regression: y on [Y, X1, X2]; restricted form is s0.
    let (_, s_rh) = lstsq_ssr(&concat(&[p.endog(), x1, p.x2()]), y)?;

    let gain = (s0 - s_unres).max(0.0);
    let (_, m1y_ss) = lstsq_ssr(x1, y)?;
    let scale = m1y_ss / t;
    let mut degenerate = false;
    let t1 = if dims.t1_defined() {
        kappas.kappa1 * ratio(gain, s_int0 - s_int, scale, &mut degenerate)
    } else {
        f64::NAN
    };
    let t2 = kappas.kappa2 * ratio(gain, s_unres, scale, &mut degenerate);
    let t3 = kappas.kappa3 * ratio(gain, s_int0, scale, &mut degenerate);
    let t4 = kappas.kappa4 * ratio(gain, s0, scale, &mut degenerate);
    let h2 = t * ratio(gain, s_int0, scale, &mut degenerate);
    let h3 = t * ratio(gain, s0, scale, &mut degenerate);
    let r = kappas.kappa_r * ratio((s0 - s_rh).max(0.0), s_rh, scale, &mut degenerate);

    Ok(StatisticSet {
        t1,
        t2,
        t3,
        t4,
        h1: f64::NAN,
        h2,
        h3,
        r,
        kappas,
        t1_defined: dims.t1_defined(),
        h1_scale_pd: false,
        degenerate,
    })
}

/// The Q-form building blocks of the original Wu statistics, computed
/// densely as a further oracle: `A1 = M1`, `A2 = M1 - M`, so that
/// `Q1 = T·sigma_tilde_1^2`, `Q3 = T·sigma_tilde^2`, `Q4 = T·sigma_hat^2`,
/// `Q2 = Q4 - Q*` and `Q* = T·(b2 - b1)' Delta^-1 (b2 - b1)`.
#[derive(Debug, Clone)]
pub struct WuQForms {
    pub q_star: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub q4: f64,
}

pub fn wu_q_forms(p: &ExogeneityProblem) -> Result<WuQForms> {
    let q1b = OrthoBasis::with_default_tol(p.x1())?;
    let xb = OrthoBasis::with_default_tol(&p.concat_x())?;
    let dims = p.dims();
    let y = p.y();

    let a1 = |v: &DVector<f64>| q1b.annihilate_vec(v).expect("same rows");
    let a1m = |m: &DMatrix<f64>| q1b.annihilate_mat(m).expect("same rows");
    // A2 = M1 - M applied to a vector: P[X]v - P[X1]v.
    let a2 = |v: &DVector<f64>| {
        let mv = xb.annihilate_vec(v).expect("same rows");
        a1(v) - mv
    };
    let a2m = |m: &DMatrix<f64>| {
        let mm = xb.annihilate_mat(m).expect("same rows");
        a1m(m) - mm
    };

    let yy = p.endog();
    let y_a1_y = yy.tr_mul(&a1m(yy));
    let y_a2_y = yy.tr_mul(&a2m(yy));
    let b1 = y_a1_y
        .clone()
        .lu()
        .solve(&yy.tr_mul(&a1(y)))
        .ok_or_else(|| Error::IdentificationData("Y'A1Y singular".into()))?;
    let b2 = y_a2_y
        .clone()
        .lu()
        .solve(&yy.tr_mul(&a2(y)))
        .ok_or_else(|| Error::IdentificationData("Y'A2Y singular".into()))?;

    let inv = |m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        m.clone()
            .try_inverse()
            .ok_or_else(|| Error::IdentificationData("singular Q-form block".into()))
    };
    let mid = inv(&(inv(&y_a2_y)? - inv(&y_a1_y)?))?;
    let diff = &b1 - &b2;
    let q_star = (diff.transpose() * mid * &diff)[(0, 0)];

    let r2 = y - yy * &b2;
    let r1 = y - yy * &b1;
    let q1 = r2.dot(&a2(&r2));
    let q3 = r2.dot(&a1(&r2));
    let q4 = r1.dot(&a1(&r1));
    let q2 = q4 - q_star;
    let _ = dims;
    Ok(WuQForms { q_star, q1, q2, q3, q4 })
}

/// Reference p-values: exact-Gaussian F laws for T1, T2, R; large-sample
/// chi-square(G) for the rest.
#[derive(Debug, Clone, Serialize)]
pub struct ReferencePValues {
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    pub t3: Option<f64>,
    pub t4: Option<f64>,
    pub h1: Option<f64>,
    pub h2: Option<f64>,
    pub h3: Option<f64>,
    pub r: Option<f64>,
}

impl ReferencePValues {
    pub fn get(&self, s: Statistic) -> Option<f64> {
        match s {
            Statistic::T1 => self.t1,
            Statistic::T2 => self.t2,
            Statistic::T3 => self.t3,
            Statistic::T4 => self.t4,
            Statistic::H1 => self.h1,
            Statistic::H2 => self.h2,
            Statistic::H3 => self.h3,
            Statistic::R => self.r,
        }
    }
}

pub fn reference_pvalues(s: &StatisticSet, dims: ProblemDims) -> Result<ReferencePValues> {
    let (t, g, k1, k2) = (
        dims.t as f64,
        dims.g as f64,
        dims.k1 as f64,
        dims.k2 as f64,
    );
    let tail_f = |stat: f64, d1: f64, d2: f64| -> Result<Option<f64>> {
        if !stat.is_finite() {
            return Ok(if stat == f64::INFINITY { Some(0.0) } else { None });
        }
        Ok(Some(dist::f_sf(stat, d1, d2)?))
    };
    let tail_chi2 = |stat: f64| -> Result<Option<f64>> {
        if !stat.is_finite() {
            return Ok(if stat == f64::INFINITY { Some(0.0) } else { None });
        }
        Ok(Some(dist::chi2_sf(stat, g)?))
    };

    Ok(ReferencePValues {
        t1: if s.t1_defined {
            tail_f(s.t1, g, k2 - g)?
        } else {
            None
        },
        t2: tail_f(s.t2, g, t - k1 - 2.0 * g)?,
        t3: tail_chi2(s.t3)?,
        t4: tail_chi2(s.t4)?,
        h1: if s.h1_scale_pd { tail_chi2(s.h1)? } else { None },
        h2: tail_chi2(s.h2)?,
        h3: tail_chi2(s.h3)?,
        r: tail_f(s.r, k2, t - k1 - k2 - g)?,
    })
}

/// Replaces `(y, Y)` by `(y·r11 + Y·r21, Y·r22)`. All eight statistics are
/// invariant under this family of transformations.
pub fn block_triangular_transform(
    p: &ExogeneityProblem,
    r11: f64,
    r21: &DVector<f64>,
    r22: &DMatrix<f64>,
) -> Result<ExogeneityProblem> {
    let dims = p.dims();
    if !r11.is_finite() || r11 == 0.0 {
        return Err(Error::invalid("r11 must be a nonzero scalar"));
    }
    if r21.len() != dims.g || r22.nrows() != dims.g || r22.ncols() != dims.g {
        return Err(Error::invalid("transform blocks must be G-dimensional"));
    }
    linalg::ensure_finite(r22, "R22")?;
    if numerical_rank(r22, 1e-12)? < dims.g {
        return Err(Error::invalid("R22 must be nonsingular"));
    }
    let y_star = p.y() * r11 + p.endog() * r21;
    let endog_star = p.endog() * r22;
    ExogeneityProblem::new(
        y_star,
        endog_star,
        p.x1().clone(),
        p.x2().clone(),
        false,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::fit;
    use crate::testutil::{desk_problem, dense_weight_matrices, zero_error_problem};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-30)
    }

    #[test]
    fn three_paths_agree_on_desk_data() {
        let p = desk_problem();
        let b = fit(&p).unwrap();
        let w = weight_operators(&p).unwrap();
        let direct = compute_direct(&p, &b).unwrap();
        let vector = compute_from_vector(&w, p.y()).unwrap();
        let ssr = compute_ssr_oracle(&p).unwrap();

        for s in Statistic::ALL {
            assert!(
                rel(direct.get(s), vector.get(s)) < 1e-8,
                "{s}: direct {} vs vector {}",
                direct.get(s),
                vector.get(s)
            );
            if s != Statistic::H1 {
                assert!(
                    rel(direct.get(s), ssr.get(s)) < 1e-8,
                    "{s}: direct {} vs ssr {}",
                    direct.get(s),
                    ssr.get(s)
                );
            }
        }
    }

    #[test]
    fn algebraic_links_hold() {
        let p = desk_problem();
        let b = fit(&p).unwrap();
        let s = compute_direct(&p, &b).unwrap();
        let k = &s.kappas;
        let t = p.dims().t as f64;
        assert!((s.t3 - k.kappa3 / t * s.h2).abs() < 1e-10);
        assert!((s.t4 - k.kappa4 / t * s.h3).abs() < 1e-10);
        assert!((s.t4 - k.kappa4 * s.t2 / (s.t2 + k.kappa2)).abs() < 1e-10);
    }

    #[test]
    fn quadratic_forms_match_dense_weight_matrices() {
        let p = desk_problem();
        let w = weight_operators(&p).unwrap();
        let dense = dense_weight_matrices(&p);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..5 {
            let x = nalgebra::DVector::from_fn(p.dims().t, |_, _| {
                rng.random::<f64>() * 2.0 - 1.0
            });
            let qf = w.quadratic_forms(&x).unwrap();
            let q = |m: &nalgebra::DMatrix<f64>| (x.transpose() * m * &x)[(0, 0)];
            assert!(rel(qf.psi0, q(&dense.psi0)) < 1e-8);
            assert!(rel(qf.lambda1, q(&dense.lambda1)) < 1e-8);
            assert!(rel(qf.lambda2, q(&dense.lambda2)) < 1e-8);
            assert!(rel(qf.lambda3, q(&dense.lambda3)) < 1e-8);
            assert!(rel(qf.lambda4, q(&dense.lambda4)) < 1e-8);
            assert!(rel(qf.psi_r, q(&dense.psi_r)) < 1e-8);
            assert!(rel(qf.lambda_r, q(&dense.lambda_r)) < 1e-8);
        }
    }

    #[test]
    fn desk_projector_traces_match_dims() {
        // T=20, intercept + one exogenous column, one endogenous, three
        // instruments: trace(T*Lambda4) = 20 - 2 - 1 = 17, trace(T*Psi_R) = 3.
        let p = desk_problem();
        let dense = dense_weight_matrices(&p);
        let t = p.dims().t as f64;
        assert!(((&dense.lambda4 * t).trace() - 17.0).abs() < 1e-10);
        assert!(((&dense.psi_r * t).trace() - 3.0).abs() < 1e-10);
        assert!(((&dense.psi0 * t).trace() - 1.0).abs() < 1e-10);
        assert!(((&dense.lambda1 * t).trace() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn c1_annihilates_y_and_x1() {
        let p = desk_problem();
        let w = weight_operators(&p).unwrap();
        for j in 0..p.dims().g {
            let col = p.endog().column(j).into_owned();
            assert!(w.c1(&col).unwrap().norm() < 1e-10);
        }
        for j in 0..p.dims().k1 {
            let col = p.x1().column(j).into_owned();
            assert!(w.c1(&col).unwrap().norm() < 1e-10);
        }
    }

    #[test]
    fn vector_route_is_scale_invariant() {
        let p = desk_problem();
        let w = weight_operators(&p).unwrap();
        let a = compute_from_vector(&w, p.y()).unwrap();
        let b = compute_from_vector(&w, &(p.y() * 5.0)).unwrap();
        for s in Statistic::ALL {
            if a.defined(s) {
                assert!(rel(a.get(s), b.get(s)) < 1e-10, "{s}");
            }
        }
    }

    #[test]
    fn m1y_column_gives_zero_numerator() {
        let p = desk_problem();
        let w = weight_operators(&p).unwrap();
        let q1 = OrthoBasis::with_default_tol(p.x1()).unwrap();
        let m1y_col = q1
            .annihilate_vec(&p.endog().column(0).into_owned())
            .unwrap();
        let s = compute_from_vector(&w, &m1y_col).unwrap();
        assert!(s.t2.abs() < 1e-8);
        assert!(s.h3.abs() < 1e-8);
    }

    #[test]
    fn zero_error_data_degenerates_to_zero() {
        let (p, _) = zero_error_problem();
        let b = fit(&p).unwrap();
        let s = compute_direct(&p, &b).unwrap();
        assert!(s.degenerate);
        for st in [Statistic::T2, Statistic::T3, Statistic::T4, Statistic::H2, Statistic::H3, Statistic::R] {
            assert_eq!(s.get(st), 0.0, "{st}");
        }
    }

    #[test]
    fn wu_q_forms_match_bundle() {
        let p = desk_problem();
        let b = fit(&p).unwrap();
        let t = p.dims().t as f64;
        let q = wu_q_forms(&p).unwrap();
        assert!(rel(q.q_star, t * b.contrast_quadratic()) < 1e-8);
        assert!(rel(q.q1, t * b.sigma2_tilde1) < 1e-8);
        assert!(rel(q.q2, t * b.sigma2_tilde2) < 1e-8);
        assert!(rel(q.q3, t * b.sigma2_tilde) < 1e-8);
        assert!(rel(q.q4, t * b.sigma2_hat) < 1e-8);
    }

    #[test]
    fn block_triangular_invariance_on_desk_data() {
        let p = desk_problem();
        let b = fit(&p).unwrap();
        let base = compute_direct(&p, &b).unwrap();

        // Identity transform.
        let g = p.dims().g;
        let id = block_triangular_transform(
            &p,
            1.0,
            &nalgebra::DVector::zeros(g),
            &nalgebra::DMatrix::identity(g, g),
        )
        .unwrap();
        assert_eq!(id.y(), p.y());

        // Scaling and a random lower-triangular mix.
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for _ in 0..5 {
            let r11 = rng.random::<f64>() + 0.5;
            let r21 =
                nalgebra::DVector::from_fn(g, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let mut r22 = nalgebra::DMatrix::zeros(g, g);
            for i in 0..g {
                for j in 0..=i {
                    r22[(i, j)] = rng.random::<f64>() * 2.0 - 1.0;
                }
                r22[(i, i)] += 2.0;
            }
            let q = block_triangular_transform(&p, r11, &r21, &r22).unwrap();
            let bq = fit(&q).unwrap();
            let sq = compute_direct(&q, &bq).unwrap();
            for st in Statistic::ALL {
                if base.defined(st) {
                    assert!(
                        rel(base.get(st), sq.get(st)) < 1e-8,
                        "{st}: {} vs {}",
                        base.get(st),
                        sq.get(st)
                    );
                }
            }
        }
    }

    #[test]
    fn singular_r22_rejected() {
        let p = desk_problem();
        let g = p.dims().g;
        let err = block_triangular_transform(
            &p,
            1.0,
            &nalgebra::DVector::zeros(g),
            &nalgebra::DMatrix::zeros(g, g),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn t2_equals_r_when_just_identified() {
        // With k2 = G the spans [Y, X1, V_hat] and [Y, X1, X2] coincide, so
        // the T2 and R statistics are identical (their constants match too).
        use rand_distr::Distribution;
        let mut rng = crate::rng::substream(0x7E5, crate::rng::StreamDomain::Design, 0);
        let t = 150;
        let draw = |rng: &mut rand_chacha::ChaCha12Rng| -> f64 {
            rand_distr::StandardNormal.sample(rng)
        };
        let x1 = nalgebra::DMatrix::from_fn(t, 2, |_, _| draw(&mut rng));
        let x2 = nalgebra::DMatrix::from_fn(t, 1, |_, _| draw(&mut rng));
        let v = nalgebra::DVector::from_fn(t, |_, _| draw(&mut rng));
        let endog = nalgebra::DMatrix::from_fn(t, 1, |i, _| {
            0.4 * x2[(i, 0)] + 0.2 * x1[(i, 0)] + v[i]
        });
        let y = nalgebra::DVector::from_fn(t, |i, _| {
            1.0 + 0.3 * endog[(i, 0)] + 0.5 * x1[(i, 0)] - 0.2 * x1[(i, 1)]
                + 0.6 * v[i]
                + draw(&mut rng)
        });
        let p = ExogeneityProblem::new(y, endog, x1, x2, true).unwrap();
        let s = compute_direct(&p, &fit(&p).unwrap()).unwrap();
        assert!(!s.t1_defined);
        assert!(rel(s.t2, s.r) < 1e-8, "T2 {} vs R {}", s.t2, s.r);
        assert_eq!(s.kappas.kappa2, s.kappas.kappa_r);
    }

    #[test]
    fn reference_pvalues_edge_cases() {
        let p = desk_problem();
        let b = fit(&p).unwrap();
        let mut s = compute_direct(&p, &b).unwrap();
        s.t2 = 0.0;
        let pv = reference_pvalues(&s, p.dims()).unwrap();
        assert_eq!(pv.t2, Some(1.0));
        assert!(pv.t1.is_some());
    }
}
