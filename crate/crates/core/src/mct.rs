//! The exact Monte Carlo exogeneity test: simulate the null distribution of
//! each statistic conditional on `(X, Y)`, rank the observed value among the
//! simulated ones, and reject at an exactly achievable level.
//!
//! The weight operators are precomputed once per dataset; each of the `N`
//! replications then costs `O(T·dim)`. Replications draw from per-index
//! substreams, so the report is bit-identical for any worker count.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ExogeneityProblem;
use crate::rng::{derive_seed, substream, StreamDomain};
use crate::statistics::{
    compute_from_vector, weight_operators, Statistic, StatisticSet, WeightOperatorSet,
};

/// User-supplied error law. Receives the conditioning design blocks, so the
/// simulated law may depend on the instruments.
pub trait ErrorSampler: Send + Sync {
    fn sample(
        &self,
        t: usize,
        x1: &DMatrix<f64>,
        x2: &DMatrix<f64>,
        rng: &mut ChaCha12Rng,
    ) -> DVector<f64>;
    fn label(&self) -> String;
}

/// Distribution of the standardized structural error. Location and scale are
/// irrelevant: every statistic is invariant to rescaling of the vector, so
/// Student-t draws are used raw rather than variance-standardized.
#[derive(Clone)]
pub enum ErrorLaw {
    GaussianIid,
    StudentT { df: u32 },
    Custom(Arc<dyn ErrorSampler>),
}

impl std::fmt::Debug for ErrorLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

impl ErrorLaw {
    pub fn student_t(df: u32) -> Result<ErrorLaw> {
        if df < 1 {
            return Err(Error::invalid("student-t needs df >= 1"));
        }
        Ok(ErrorLaw::StudentT { df })
    }

    pub fn label(&self) -> String {
        match self {
            ErrorLaw::GaussianIid => "gaussian".into(),
            ErrorLaw::StudentT { df } => format!("t({df})"),
            ErrorLaw::Custom(s) => s.label(),
        }
    }

    pub(crate) fn draw(
        &self,
        t: usize,
        x1: &DMatrix<f64>,
        x2: &DMatrix<f64>,
        rng: &mut ChaCha12Rng,
    ) -> DVector<f64> {
        match self {
            ErrorLaw::GaussianIid => {
                DVector::from_fn(t, |_, _| StandardNormal.sample(rng))
            }
            ErrorLaw::StudentT { df } => {
                let dist = StudentT::new(*df as f64).expect("df >= 1");
                DVector::from_fn(t, |_, _| dist.sample(rng))
            }
            ErrorLaw::Custom(s) => s.sample(t, x1, x2, rng),
        }
    }
}

/// Monte Carlo test configuration.
#[derive(Debug, Clone)]
pub struct MctConfig {
    pub n_draws: usize,
    pub alpha_star: f64,
    pub seed: u64,
    pub law: ErrorLaw,
    pub statistics: Vec<Statistic>,
}

impl MctConfig {
    pub fn new(law: ErrorLaw, seed: u64) -> Self {
        MctConfig {
            n_draws: 199,
            alpha_star: 0.05,
            seed,
            law,
            statistics: Statistic::ALL.to_vec(),
        }
    }
}

/// The achievable level `(floor(alpha*·N) + 1)/(N + 1)`.
pub fn plan_level(alpha_star: f64, n_draws: usize) -> Result<f64> {
    if n_draws == 0 {
        return Err(Error::invalid("need at least one Monte Carlo draw"));
    }
    if !(alpha_star > 0.0 && alpha_star < 1.0) {
        return Err(Error::invalid("alpha* must lie in (0, 1)"));
    }
    let n = n_draws as f64;
    Ok(((alpha_star * n).floor() + 1.0) / (n + 1.0))
}

/// Simulated p-value `(1 + #{j: W_j >= x}) / (N + 1)` with a randomized
/// tie-breaker: exact ties are ordered by independent uniforms, one for the
/// observed value and one per draw, derived from `tie_seed`.
pub fn mc_pvalue(observed: f64, draws: &[f64], tie_seed: u64) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::invalid("empty draw vector"));
    }
    if observed.is_nan() || draws.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid(
            "NaN in Monte Carlo ranking; map undefined draws to +inf upstream",
        ));
    }
    let n = draws.len();
    let mut greater = 0usize;
    let mut tied: Vec<usize> = Vec::new();
    for (j, &w) in draws.iter().enumerate() {
        if w > observed {
            greater += 1;
        } else if w == observed {
            tied.push(j);
        }
    }
    let mut count = greater;
    if !tied.is_empty() {
        let mut rng = substream(tie_seed, StreamDomain::TieBreak, 0);
        let u: Vec<f64> = (0..=n).map(|_| rng.random::<f64>()).collect();
        count += tied.iter().filter(|&&j| u[j + 1] >= u[0]).count();
    }
    Ok((1 + count) as f64 / (n + 1) as f64)
}

/// Statistics of `N` simulated null error vectors, evaluated through the
/// factored operators. Deterministic given the seed for any worker count;
/// a non-finite draw from a custom sampler is an error naming the earliest
/// failing replication.
pub fn draw_null_statistics(
    w: &WeightOperatorSet,
    law: &ErrorLaw,
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<StatisticSet>> {
    if n_draws == 0 {
        return Err(Error::invalid("need at least one Monte Carlo draw"));
    }
    let t = w.dims().t;
    let results: Vec<Result<StatisticSet>> = (0..n_draws)
        .into_par_iter()
        .map(|j| {
            let mut rng = substream(seed, StreamDomain::McDraw, j as u64 + 1);
            let eps = law.draw(t, x1, x2, &mut rng);
            if eps.len() != t || eps.iter().any(|v| !v.is_finite()) {
                return Err(Error::Draw {
                    replication: j + 1,
                    message: "sampler produced a non-finite or misshaped vector"
                        .into(),
                });
            }
            compute_from_vector(w, &eps).map_err(|e| Error::Draw {
                replication: j + 1,
                message: e.to_string(),
            })
        })
        .collect();
    // Surface the earliest failure so the error is deterministic.
    let mut out = Vec::with_capacity(n_draws);
    for r in results {
        out.push(r?);
    }
    Ok(out)
}

/// Per-statistic outcome of a Monte Carlo test.
#[derive(Debug, Clone, Serialize)]
pub struct MctEntry {
    pub statistic: Statistic,
    pub observed: f64,
    pub p_value: f64,
    pub reject: bool,
    pub draw_min: f64,
    pub draw_median: f64,
    pub draw_max: f64,
}

/// Full Monte Carlo test report.
#[derive(Debug, Clone, Serialize)]
pub struct MctReport {
    pub n_draws: usize,
    pub alpha_star: f64,
    pub achieved_alpha: f64,
    pub seed: u64,
    pub law: String,
    pub entries: Vec<MctEntry>,
}

impl MctReport {
    pub fn entry(&self, s: Statistic) -> Option<&MctEntry> {
        self.entries.iter().find(|e| e.statistic == s)
    }
}

/// Undefined or non-finite draws rank as +inf: conservative, and
/// deterministic even when a draw makes H1's inner matrix singular.
fn rank_value(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Runs the exact Monte Carlo exogeneity test on a dataset.
pub fn mc_test(p: &ExogeneityProblem, cfg: &MctConfig) -> Result<MctReport> {
    let w = weight_operators(p)?;
    mc_test_with_operators(&w, p, cfg)
}

pub fn mc_test_with_operators(
    w: &WeightOperatorSet,
    p: &ExogeneityProblem,
    cfg: &MctConfig,
) -> Result<MctReport> {
    if cfg.statistics.is_empty() {
        return Err(Error::invalid("no statistics selected"));
    }
    let achieved = plan_level(cfg.alpha_star, cfg.n_draws)?;
    let observed = compute_from_vector(w, p.y())?;
    let draws = draw_null_statistics(w, &cfg.law, p.x1(), p.x2(), cfg.n_draws, cfg.seed)?;

    let mut entries = Vec::new();
    for (idx, &stat) in cfg.statistics.iter().enumerate() {
        if !observed.defined(stat) {
            continue;
        }
        let obs = rank_value(observed.get(stat));
        let mut vals: Vec<f64> = draws.iter().map(|d| rank_value(d.get(stat))).collect();
        let tie_seed = derive_seed(cfg.seed, StreamDomain::TieBreak, idx as u64);
        let p_value = mc_pvalue(obs, &vals, tie_seed)?;
        vals.sort_by(|a, b| a.partial_cmp(b).expect("no NaN after mapping"));
        let median = if vals.len() % 2 == 1 {
            vals[vals.len() / 2]
        } else {
            0.5 * (vals[vals.len() / 2 - 1] + vals[vals.len() / 2])
        };
        entries.push(MctEntry {
            statistic: stat,
            observed: observed.get(stat),
            p_value,
            reject: p_value <= achieved,
            draw_min: vals[0],
            draw_median: median,
            draw_max: vals[vals.len() - 1],
        });
    }

    Ok(MctReport {
        n_draws: cfg.n_draws,
        alpha_star: cfg.alpha_star,
        achieved_alpha: achieved,
        seed: cfg.seed,
        law: cfg.law.label(),
        entries,
    })
}
