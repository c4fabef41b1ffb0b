//! JSON report assembly for `exotest test`.
//!
//! The report embeds a run manifest (command, resolved options, seed, tool
//! version, input digest, timestamp). Rerunning the same manifest reproduces
//! the report bit-exactly, timestamp aside. The shape is pinned by
//! `schemas/report.schema.json` at the repository root.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use exotest_core::estimators::fit;
use exotest_core::mct::{mc_test, ErrorLaw, MctConfig};
use exotest_core::model::{ExogeneityProblem, ValidationReport};
use exotest_core::rng::{derive_seed, StreamDomain};
use exotest_core::statistics::{compute_direct, reference_pvalues, Statistic};

pub const REPORT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub options: serde_json::Value,
    pub seed: u64,
    pub tool_version: String,
    pub input_sha256: Option<String>,
    pub timestamp_unix: u64,
}

impl Manifest {
    pub fn new(
        command: &str,
        options: serde_json::Value,
        seed: u64,
        input_sha256: Option<String>,
    ) -> Self {
        Manifest {
            command: command.to_string(),
            options,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            input_sha256,
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

#[derive(Serialize)]
struct StatisticsBlock {
    t1: Option<f64>,
    t2: f64,
    t3: f64,
    t4: f64,
    h1: Option<f64>,
    h2: f64,
    h3: f64,
    r: f64,
    kappa1: f64,
    kappa2: f64,
    kappa3: f64,
    kappa4: f64,
    kappa_r: f64,
    t1_defined: bool,
    h1_scale_pd: bool,
    degenerate: bool,
}

#[derive(Serialize)]
struct PValueBlock {
    t1: Option<f64>,
    t2: Option<f64>,
    t3: Option<f64>,
    t4: Option<f64>,
    h1: Option<f64>,
    h2: Option<f64>,
    h3: Option<f64>,
    r: Option<f64>,
    /// Statistics whose reference law is exact under Gaussian errors (the
    /// others carry large-sample chi-square approximations).
    exact: Vec<String>,
}

#[derive(Serialize)]
struct McEntryBlock {
    statistic: String,
    observed: f64,
    p_value: f64,
    reject: bool,
    draw_min: f64,
    draw_median: f64,
    draw_max: f64,
}

#[derive(Serialize)]
struct McBlock {
    law: String,
    n_draws: usize,
    alpha_star: f64,
    achieved_alpha: f64,
    seed: u64,
    entries: Vec<McEntryBlock>,
}

#[derive(Serialize)]
struct TestReport {
    report_version: u32,
    manifest: Manifest,
    dims: exotest_core::ProblemDims,
    validation: ValidationSummary,
    statistics: StatisticsBlock,
    reference_pvalues: PValueBlock,
    mc: Vec<McBlock>,
}

#[derive(Serialize)]
struct ValidationSummary {
    ok: bool,
    rank_y_x: usize,
    rank_fitted_x1: usize,
    t1_defined: bool,
}

fn opt(v: f64) -> Option<f64> {
    if v.is_finite() {
        Some(v)
    } else {
        None
    }
}

pub fn test_report(
    problem: &ExogeneityProblem,
    validation: &ValidationReport,
    laws: &[ErrorLaw],
    mc_draws: usize,
    alpha: f64,
    seed: u64,
    manifest: Manifest,
) -> Result<String, exotest_core::Error> {
    let bundle = fit(problem)?;
    let stats = compute_direct(problem, &bundle)?;
    let pvals = reference_pvalues(&stats, problem.dims())?;

    let mut mc = Vec::new();
    if mc_draws > 0 {
        for (i, law) in laws.iter().enumerate() {
            let cfg = MctConfig {
                n_draws: mc_draws,
                alpha_star: alpha,
                seed: derive_seed(seed, StreamDomain::McDraw, i as u64),
                law: law.clone(),
                statistics: Statistic::ALL.to_vec(),
            };
            let rep = mc_test(problem, &cfg)?;
            mc.push(McBlock {
                law: rep.law.clone(),
                n_draws: rep.n_draws,
                alpha_star: rep.alpha_star,
                achieved_alpha: rep.achieved_alpha,
                seed: rep.seed,
                entries: rep
                    .entries
                    .iter()
                    .map(|e| McEntryBlock {
                        statistic: e.statistic.name().to_string(),
                        observed: e.observed,
                        p_value: e.p_value,
                        reject: e.reject,
                        draw_min: e.draw_min,
                        draw_median: e.draw_median,
                        draw_max: e.draw_max,
                    })
                    .collect(),
            });
        }
    }

    let report = TestReport {
        report_version: REPORT_VERSION,
        manifest,
        dims: problem.dims(),
        validation: ValidationSummary {
            ok: validation.is_ok(),
            rank_y_x: validation.rank_y_x,
            rank_fitted_x1: validation.rank_fitted_x1,
            t1_defined: validation.t1_defined,
        },
        statistics: StatisticsBlock {
            t1: if stats.t1_defined { opt(stats.t1) } else { None },
            t2: stats.t2,
            t3: stats.t3,
            t4: stats.t4,
            h1: opt(stats.h1),
            h2: stats.h2,
            h3: stats.h3,
            r: stats.r,
            kappa1: stats.kappas.kappa1,
            kappa2: stats.kappas.kappa2,
            kappa3: stats.kappas.kappa3,
            kappa4: stats.kappas.kappa4,
            kappa_r: stats.kappas.kappa_r,
            t1_defined: stats.t1_defined,
            h1_scale_pd: stats.h1_scale_pd,
            degenerate: stats.degenerate,
        },
        reference_pvalues: PValueBlock {
            t1: pvals.t1,
            t2: pvals.t2,
            t3: pvals.t3,
            t4: pvals.t4,
            h1: pvals.h1,
            h2: pvals.h2,
            h3: pvals.h3,
            r: pvals.r,
            exact: Statistic::ALL
                .iter()
                .filter(|s| s.reference_is_exact())
                .map(|s| s.name().to_string())
                .collect(),
        },
        mc,
    };
    serde_json::to_string_pretty(&report)
        .map_err(|e| exotest_core::Error::InvalidInput(e.to_string()))
}
