//! Simulation machinery: the size/power study DGP, rejection-frequency
//! tables in standard and Monte Carlo mode, the exogeneity canonical form,
//! and the noncentral-F power cross-check.
//!
//! A note on the instrument-strength design. The first-stage coefficient
//! matrix is `Pi2 = [eta1*p1 : eta2*p2]` where `[p1 : p2]` is by default the
//! `k2 x G` matrix of ones. With `p1, p2` taken as identity columns instead
//! (available as [`Pi0Kind::IdentityColumns`]) the transmitted signal is too
//! weak by a factor `k2` to reproduce the published rejection tables; the
//! ones design reproduces them cell by cell.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::Serialize;

use crate::dist;
use crate::error::{Error, Result};
use crate::mct::{mc_test_with_operators, ErrorLaw, MctConfig};
use crate::model::{ExogeneityProblem, ProblemDims};
use crate::rng::{derive_seed, substream, StreamDomain};
use crate::statistics::{
    compute_from_vector, weight_operators, Statistic, StatisticSet, WeightOperatorSet,
};

/// Joint law of the disturbances `(e, V)` in the DGP. Components are drawn
/// independently; Student-t draws are used raw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgpLaw {
    Gaussian,
    StudentT { df: u32 },
}

impl DgpLaw {
    pub fn label(self) -> String {
        match self {
            DgpLaw::Gaussian => "gaussian".into(),
            DgpLaw::StudentT { df } => format!("t({df})"),
        }
    }

    /// The matching error law for the Monte Carlo test.
    pub fn error_law(self) -> ErrorLaw {
        match self {
            DgpLaw::Gaussian => ErrorLaw::GaussianIid,
            DgpLaw::StudentT { df } => ErrorLaw::StudentT { df },
        }
    }

    fn draw(self, rng: &mut ChaCha12Rng) -> f64 {
        match self {
            DgpLaw::Gaussian => StandardNormal.sample(rng),
            DgpLaw::StudentT { df } => {
                StudentT::new(df as f64).expect("df >= 1").sample(rng)
            }
        }
    }
}

/// Shape of the base first-stage matrix `[p1 : p2]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pi0Kind {
    /// `k2 x G` matrix of ones (reproduces the published tables).
    #[default]
    Ones,
    /// First `G` columns of the identity of order `k2`.
    IdentityColumns,
}

/// Configuration of the simulation DGP: `Y = X2·Pi2 + V`,
/// `u = V·(lambda·a0) + e`, `y = Y·beta0 + u`, with no included exogenous
/// regressors.
#[derive(Debug, Clone)]
pub struct DgpConfig {
    pub t: usize,
    pub k2: usize,
    pub beta0: DVector<f64>,
    pub a0: DVector<f64>,
    /// Endogeneity multiplier: `a = lambda * a0`.
    pub lambda: f64,
    /// Instrument strengths, one per endogenous regressor.
    pub eta: DVector<f64>,
    pub law: DgpLaw,
    pub seed: u64,
    pub pi0: Pi0Kind,
}

impl DgpConfig {
    pub fn g(&self) -> usize {
        self.beta0.len()
    }

    pub fn a(&self) -> DVector<f64> {
        &self.a0 * self.lambda
    }

    fn check(&self) -> Result<()> {
        let g = self.g();
        if g == 0 {
            return Err(Error::invalid("beta0 must be nonempty"));
        }
        if self.a0.len() != g || self.eta.len() != g {
            return Err(Error::invalid(
                "beta0, a0 and eta must have equal lengths",
            ));
        }
        if self.k2 < g {
            return Err(Error::invalid("need k2 >= G instruments"));
        }
        if self.t <= self.k2 + g {
            return Err(Error::invalid("sample too small for the design"));
        }
        Ok(())
    }

    fn pi2(&self) -> DMatrix<f64> {
        build_pi2(self.k2, &self.eta, self.pi0)
    }
}

/// First-stage matrix `[eta_1 p_1 : .. : eta_G p_G]`.
pub fn build_pi2(k2: usize, eta: &DVector<f64>, pi0: Pi0Kind) -> DMatrix<f64> {
    DMatrix::from_fn(k2, eta.len(), |i, j| match pi0 {
        Pi0Kind::Ones => eta[j],
        Pi0Kind::IdentityColumns => {
            if i == j {
                eta[j]
            } else {
                0.0
            }
        }
    })
}

/// Latent disturbances of one replication.
#[derive(Debug, Clone)]
pub struct LatentRecord {
    pub v: DMatrix<f64>,
    pub e: DVector<f64>,
    pub u: DVector<f64>,
}

/// One simulation experiment: the instrument matrix is drawn once and held
/// fixed across replications.
#[derive(Debug, Clone)]
pub struct Experiment {
    cfg: DgpConfig,
    x2: DMatrix<f64>,
    pi2: DMatrix<f64>,
    /// Optional user-evaluated mean of `Y` replacing the linear `X2·Pi2`
    /// form, for incomplete-model designs.
    g_values: Option<DMatrix<f64>>,
    /// Instrument columns visible to the tests; the DGP always uses all of
    /// them. Models a test run with left-out instruments.
    observed_instruments: Option<Vec<usize>>,
}

impl Experiment {
    pub fn new(cfg: DgpConfig) -> Result<Self> {
        cfg.check()?;
        let mut rng = substream(cfg.seed, StreamDomain::Design, 0);
        let x2 = DMatrix::from_fn(cfg.t, cfg.k2, |_, _| StandardNormal.sample(&mut rng));
        let pi2 = cfg.pi2();
        Ok(Experiment {
            cfg,
            x2,
            pi2,
            g_values: None,
            observed_instruments: None,
        })
    }

    /// Replaces the linear reduced-form mean by user-supplied values.
    pub fn with_g_values(mut self, g_values: DMatrix<f64>) -> Result<Self> {
        if g_values.nrows() != self.cfg.t || g_values.ncols() != self.cfg.g() {
            return Err(Error::invalid("g values must be T x G"));
        }
        self.g_values = Some(g_values);
        Ok(self)
    }

    /// Restricts the instrument columns the constructed problems expose.
    pub fn with_observed_instruments(mut self, cols: Vec<usize>) -> Result<Self> {
        if cols.is_empty() || cols.iter().any(|&c| c >= self.cfg.k2) {
            return Err(Error::invalid("instrument subset out of range"));
        }
        self.observed_instruments = Some(cols);
        Ok(self)
    }

    pub fn x2(&self) -> &DMatrix<f64> {
        &self.x2
    }

    pub fn config(&self) -> &DgpConfig {
        &self.cfg
    }

    /// The reduced-form mean `g` of `Y`.
    pub fn g_matrix(&self) -> DMatrix<f64> {
        match &self.g_values {
            Some(g) => g.clone(),
            None => &self.x2 * &self.pi2,
        }
    }

    fn observed_x2(&self) -> DMatrix<f64> {
        match &self.observed_instruments {
            None => self.x2.clone(),
            Some(cols) => {
                let mut m = DMatrix::zeros(self.cfg.t, cols.len());
                for (j, &c) in cols.iter().enumerate() {
                    m.set_column(j, &self.x2.column(c));
                }
                m
            }
        }
    }

    /// Generates replication `rep`: fresh `(e, V)`, fixed `X2`.
    pub fn replicate(&self, rep: u64) -> Result<(ExogeneityProblem, LatentRecord)> {
        let cfg = &self.cfg;
        let g = cfg.g();
        let mut rng = substream(cfg.seed, StreamDomain::Disturbance, rep);
        // Row-wise draws: (e_t, V_t1, .., V_tG) per observation.
        let mut e = DVector::zeros(cfg.t);
        let mut v = DMatrix::zeros(cfg.t, g);
        for i in 0..cfg.t {
            e[i] = cfg.law.draw(&mut rng);
            for j in 0..g {
                v[(i, j)] = cfg.law.draw(&mut rng);
            }
        }
        let u = &v * cfg.a() + &e;
        let endog = self.g_matrix() + &v;
        let y = &endog * &cfg.beta0 + &u;
        let problem = ExogeneityProblem::new(
            y,
            endog,
            DMatrix::zeros(cfg.t, 0),
            self.observed_x2(),
            false,
        )?;
        Ok((problem, LatentRecord { v, e, u }))
    }
}

/// One dataset from the DGP (replication zero of a fresh experiment).
pub fn generate_dataset(cfg: DgpConfig) -> Result<(ExogeneityProblem, LatentRecord)> {
    Experiment::new(cfg)?.replicate(0)
}

/// Rejection decision source for the simulated tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableMode {
    /// Reference critical values: exact-Gaussian F for T1, T2, R and
    /// chi-square(G) for the rest.
    Standard,
    /// Exact Monte Carlo test with `n_draws` pseudo-samples.
    MonteCarlo { n_draws: usize },
}

impl TableMode {
    pub fn label(self) -> String {
        match self {
            TableMode::Standard => "standard".into(),
            TableMode::MonteCarlo { .. } => "mc".into(),
        }
    }
}

/// Handling of the instrument matrix across replications of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum X2Scheme {
    /// One draw per cell, held fixed (the experiment design of the study
    /// being reproduced). Rejection frequencies are conditional on that
    /// draw and move by a few points across draws in partial-identification
    /// power cells.
    #[default]
    FixedPerCell,
    /// Fresh draw each replication; estimates unconditional frequencies.
    RedrawPerReplication,
}

/// A grid cell of the simulation study.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CellSpec {
    pub k2: usize,
    pub lambda: f64,
    pub eta1: f64,
    pub eta2: f64,
}

/// Shared settings of a rejection table run.
#[derive(Debug, Clone)]
pub struct TableConfig {
    pub t: usize,
    pub beta0: DVector<f64>,
    pub a0: DVector<f64>,
    pub law: DgpLaw,
    pub alpha: f64,
    pub mode: TableMode,
    pub scheme: X2Scheme,
    pub pi0: Pi0Kind,
    pub seed: u64,
}

impl TableConfig {
    /// The study's baseline: `T = 50`, `beta0 = (2, 5)`, `a0 = (0.5, 0.2)`,
    /// nominal level 5%.
    pub fn study_baseline(law: DgpLaw, mode: TableMode, seed: u64) -> Self {
        TableConfig {
            t: 50,
            beta0: DVector::from_vec(vec![2.0, 5.0]),
            a0: DVector::from_vec(vec![0.5, 0.2]),
            law,
            alpha: 0.05,
            mode,
            scheme: X2Scheme::default(),
            pi0: Pi0Kind::default(),
            seed,
        }
    }

    fn dgp_for_cell(&self, cell: &CellSpec, seed: u64) -> DgpConfig {
        DgpConfig {
            t: self.t,
            k2: cell.k2,
            beta0: self.beta0.clone(),
            a0: self.a0.clone(),
            lambda: cell.lambda,
            eta: DVector::from_vec(vec![cell.eta1, cell.eta2]),
            law: self.law,
            seed,
            pi0: self.pi0,
        }
    }
}

/// Rejection percentages of one cell, indexed like [`Statistic::ALL`].
/// Undefined statistics hold NaN.
#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub cell: CellSpec,
    pub reps: usize,
    pub rejection_pct: [f64; 8],
}

/// A full rejection table.
#[derive(Debug, Clone, Serialize)]
pub struct RejectionTable {
    pub mode: String,
    pub law: String,
    pub alpha: f64,
    pub seed: u64,
    pub rows: Vec<CellResult>,
}

impl RejectionTable {
    /// Machine-readable form: one row per `(cell, statistic)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "statistic,k2,lambda,eta1,eta2,mode,rejection_pct,reps,seed\n",
        );
        for row in &self.rows {
            for (i, stat) in Statistic::ALL.iter().enumerate() {
                let pct = row.rejection_pct[i];
                if pct.is_nan() {
                    continue;
                }
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    stat,
                    row.cell.k2,
                    row.cell.lambda,
                    row.cell.eta1,
                    row.cell.eta2,
                    self.mode,
                    pct,
                    row.reps,
                    self.seed
                ));
            }
        }
        out
    }

    /// Aligned text: statistics down the rows, cells across the columns.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "rejection frequencies (%) | mode={} law={} alpha={} seed={}\n",
            self.mode, self.law, self.alpha, self.seed
        ));
        out.push_str(&format!("{:<6}", "stat"));
        for row in &self.rows {
            out.push_str(&format!(
                "{:>18}",
                format!(
                    "k2={} l={} e=({},{})",
                    row.cell.k2, row.cell.lambda, row.cell.eta1, row.cell.eta2
                )
            ));
        }
        out.push('\n');
        for (i, stat) in Statistic::ALL.iter().enumerate() {
            out.push_str(&format!("{:<6}", stat.to_string()));
            for row in &self.rows {
                let pct = row.rejection_pct[i];
                if pct.is_nan() {
                    out.push_str(&format!("{:>18}", "-"));
                } else {
                    out.push_str(&format!("{:>18.1}", pct));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn cell(&self, cell: &CellSpec) -> Option<&CellResult> {
        self.rows.iter().find(|r| {
            r.cell.k2 == cell.k2
                && r.cell.lambda == cell.lambda
                && r.cell.eta1 == cell.eta1
                && r.cell.eta2 == cell.eta2
        })
    }

    pub fn pct(&self, cell: &CellSpec, stat: Statistic) -> Option<f64> {
        let idx = Statistic::ALL.iter().position(|&s| s == stat)?;
        self.cell(cell).map(|r| r.rejection_pct[idx])
    }
}

/// Standard-mode critical values at level `alpha` for a problem shape.
fn standard_critical_values(dims: ProblemDims, alpha: f64) -> Result<[f64; 8]> {
    let (t, g, k1, k2) = (
        dims.t as f64,
        dims.g as f64,
        dims.k1 as f64,
        dims.k2 as f64,
    );
    let p = 1.0 - alpha;
    let chi = dist::chi2_quantile(p, g)?;
    let t1 = if dims.t1_defined() {
        dist::f_quantile(p, g, k2 - g)?
    } else {
        f64::NAN
    };
    Ok([
        t1,
        dist::f_quantile(p, g, t - k1 - 2.0 * g)?,
        chi,
        chi,
        chi,
        chi,
        chi,
        dist::f_quantile(p, k2, t - k1 - k2 - g)?,
    ])
}

fn standard_rejections(s: &StatisticSet, crit: &[f64; 8]) -> [Option<bool>; 8] {
    let mut out = [None; 8];
    for (i, stat) in Statistic::ALL.iter().enumerate() {
        if !s.defined(*stat) || crit[i].is_nan() {
            continue;
        }
        let v = s.get(*stat);
        out[i] = Some(v.is_finite() && v > crit[i] || v == f64::INFINITY);
    }
    out
}

/// Simulated rejection frequencies over a grid of cells. Deterministic for
/// a given seed regardless of worker count.
pub fn rejection_table(
    cfg: &TableConfig,
    cells: &[CellSpec],
    reps: usize,
) -> Result<RejectionTable> {
    if reps == 0 {
        return Err(Error::invalid("need at least one replication"));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::invalid("alpha must lie in (0, 1)"));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (cell_idx, cell) in cells.iter().enumerate() {
        let cell_seed = derive_seed(cfg.seed, StreamDomain::Design, cell_idx as u64);
        rows.push(run_cell(cfg, cell, cell_seed, reps)?);
    }
    Ok(RejectionTable {
        mode: cfg.mode.label(),
        law: cfg.law.label(),
        alpha: cfg.alpha,
        seed: cfg.seed,
        rows,
    })
}

fn run_cell(
    cfg: &TableConfig,
    cell: &CellSpec,
    cell_seed: u64,
    reps: usize,
) -> Result<CellResult> {
    let fixed_experiment = match cfg.scheme {
        X2Scheme::FixedPerCell => {
            Some(Experiment::new(cfg.dgp_for_cell(cell, cell_seed))?)
        }
        X2Scheme::RedrawPerReplication => None,
    };

    let flags: Vec<Result<[Option<bool>; 8]>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let (problem, _) = match &fixed_experiment {
                Some(exp) => exp.replicate(rep as u64)?,
                None => {
                    let seed =
                        derive_seed(cell_seed, StreamDomain::Design, rep as u64 + 1);
                    Experiment::new(cfg.dgp_for_cell(cell, seed))?.replicate(0)?
                }
            };
            match cfg.mode {
                TableMode::Standard => {
                    let w = weight_operators(&problem)?;
                    let s = compute_from_vector(&w, problem.y())?;
                    let crit = standard_critical_values(problem.dims(), cfg.alpha)?;
                    Ok(standard_rejections(&s, &crit))
                }
                TableMode::MonteCarlo { n_draws } => {
                    let w = weight_operators(&problem)?;
                    let mc_seed =
                        derive_seed(cell_seed, StreamDomain::McDraw, rep as u64);
                    let mcfg = MctConfig {
                        n_draws,
                        alpha_star: cfg.alpha,
                        seed: mc_seed,
                        law: cfg.law.error_law(),
                        statistics: Statistic::ALL.to_vec(),
                    };
                    let report = mc_test_with_operators(&w, &problem, &mcfg)?;
                    let mut out = [None; 8];
                    for (i, stat) in Statistic::ALL.iter().enumerate() {
                        out[i] = report.entry(*stat).map(|e| e.reject);
                    }
                    Ok(out)
                }
            }
        })
        .collect();

    let mut counts = [0usize; 8];
    let mut defined = [0usize; 8];
    for f in flags {
        let f = f?;
        for i in 0..8 {
            if let Some(r) = f[i] {
                defined[i] += 1;
                if r {
                    counts[i] += 1;
                }
            }
        }
    }
    let mut pct = [f64::NAN; 8];
    for i in 0..8 {
        if defined[i] > 0 {
            pct[i] = 100.0 * counts[i] as f64 / defined[i] as f64;
        }
    }
    Ok(CellResult {
        cell: *cell,
        reps,
        rejection_pct: pct,
    })
}

/// The published table presets: law and decision mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TablePreset {
    Table1,
    Table2,
    Table3,
    Table4,
}

impl TablePreset {
    pub fn parse(s: &str) -> Option<TablePreset> {
        match s.to_ascii_lowercase().as_str() {
            "table1" => Some(TablePreset::Table1),
            "table2" => Some(TablePreset::Table2),
            "table3" => Some(TablePreset::Table3),
            "table4" => Some(TablePreset::Table4),
            _ => None,
        }
    }

    pub fn law(self) -> DgpLaw {
        match self {
            TablePreset::Table1 | TablePreset::Table3 => DgpLaw::Gaussian,
            TablePreset::Table2 | TablePreset::Table4 => DgpLaw::StudentT { df: 3 },
        }
    }

    pub fn mode(self, n_draws: usize) -> TableMode {
        match self {
            TablePreset::Table1 | TablePreset::Table2 => TableMode::Standard,
            TablePreset::Table3 | TablePreset::Table4 => {
                TableMode::MonteCarlo { n_draws }
            }
        }
    }
}

/// Twelve-cell smoke subset of the study grid: `k2 = 5`,
/// `lambda in {0, 1, 100}`, `eta in {(0,0), (.01,0), (.5,0), (.5,.5)}`.
pub fn smoke_cells() -> Vec<CellSpec> {
    let mut cells = Vec::new();
    for &lambda in &[0.0, 1.0, 100.0] {
        for &(eta1, eta2) in &[(0.0, 0.0), (0.01, 0.0), (0.5, 0.0), (0.5, 0.5)] {
            cells.push(CellSpec {
                k2: 5,
                lambda,
                eta1,
                eta2,
            });
        }
    }
    cells
}

/// The full study grid.
pub fn full_grid_cells() -> Vec<CellSpec> {
    let mut cells = Vec::new();
    for &k2 in &[5usize, 10, 20] {
        for &lambda in &[-20.0, -5.0, 0.0, 1.0, 100.0] {
            for &eta2 in &[0.0, 0.5] {
                for &eta1 in &[0.0, 0.01, 0.5] {
                    cells.push(CellSpec {
                        k2,
                        lambda,
                        eta1,
                        eta2,
                    });
                }
            }
        }
    }
    cells
}

/// Applies the exogeneity canonical transform `y* = y - Y(beta + a)`.
/// All eight statistics are invariant under it.
pub fn canonical_transform(
    p: &ExogeneityProblem,
    beta: &DVector<f64>,
    a: &DVector<f64>,
) -> Result<ExogeneityProblem> {
    let g = p.dims().g;
    if beta.len() != g || a.len() != g {
        return Err(Error::invalid("beta and a must be G-vectors"));
    }
    let shift = -(beta + a);
    crate::statistics::block_triangular_transform(
        p,
        1.0,
        &shift,
        &DMatrix::identity(g, g),
    )
}

/// Noncentrality parameters `delta(a, W) = T · mu' W mu` for the weight
/// operators with chi-square component laws.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Noncentrality {
    pub psi0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda4: f64,
    pub psi_r: f64,
    pub lambda_r: f64,
}

/// Evaluates the noncentrality parameters for a mean shift `mu_perp`
/// (projected through `M1` internally).
pub fn noncentrality_params(
    w: &WeightOperatorSet,
    mu_perp: &DVector<f64>,
) -> Result<Noncentrality> {
    let t = w.dims().t as f64;
    let qf = w.quadratic_forms(mu_perp)?;
    Ok(Noncentrality {
        psi0: t * qf.psi0,
        lambda1: t * qf.lambda1,
        lambda2: t * qf.lambda2,
        lambda4: t * qf.lambda4,
        psi_r: t * qf.psi_r,
        lambda_r: t * qf.lambda_r,
    })
}

/// Rejection probabilities of T1, T2 and R under their doubly noncentral F
/// laws, by direct simulation of the component chi-squares.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TheoreticalPower {
    pub t1: Option<f64>,
    pub t2: f64,
    pub r: f64,
}

fn doubly_noncentral_f_power(
    n1: u64,
    n2: u64,
    delta1: f64,
    delta2: f64,
    alpha: f64,
    reps: usize,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::invalid("degrees of freedom must be positive"));
    }
    let crit = dist::f_quantile(1.0 - alpha, n1 as f64, n2 as f64)?;
    let mut hits = 0usize;
    for _ in 0..reps {
        let q1 = dist::sample_noncentral_chi2(n1, delta1, rng)? / n1 as f64;
        let q2 = dist::sample_noncentral_chi2(n2, delta2, rng)? / n2 as f64;
        if q1 / q2 > crit {
            hits += 1;
        }
    }
    Ok(hits as f64 / reps as f64)
}

/// Simulates the doubly noncentral F laws of T1, T2 and R at level `alpha`
/// and returns their rejection probabilities. Cross-validates the empirical
/// rejection tables under Gaussian errors.
pub fn theoretical_power_check(
    dims: ProblemDims,
    delta: &Noncentrality,
    alpha: f64,
    reps: usize,
    seed: u64,
) -> Result<TheoreticalPower> {
    if reps == 0 {
        return Err(Error::invalid("need at least one replication"));
    }
    let g = dims.g as u64;
    let t = dims.t as u64;
    let (k1, k2) = (dims.k1 as u64, dims.k2 as u64);
    if t <= k1 + 2 * g || t <= k1 + k2 + g {
        return Err(Error::invalid("degrees of freedom must be positive"));
    }

    let t1 = if dims.t1_defined() {
        let mut rng = substream(seed, StreamDomain::PowerCheck, 0);
        Some(doubly_noncentral_f_power(
            g,
            k2 - g,
            delta.psi0,
            delta.lambda1,
            alpha,
            reps,
            &mut rng,
        )?)
    } else {
        None
    };
    let mut rng2 = substream(seed, StreamDomain::PowerCheck, 1);
    let t2 = doubly_noncentral_f_power(
        g,
        t - k1 - 2 * g,
        delta.psi0,
        delta.lambda2,
        alpha,
        reps,
        &mut rng2,
    )?;
    let mut rng3 = substream(seed, StreamDomain::PowerCheck, 2);
    let r = doubly_noncentral_f_power(
        k2,
        t - k1 - k2 - g,
        delta.psi_r,
        delta.lambda_r,
        alpha,
        reps,
        &mut rng3,
    )?;
    Ok(TheoreticalPower { t1, t2, r })
}

/// Conditional power skeleton: fixed design and reduced-form draw, a grid of
/// endogeneity vectors, and the error scale.
#[derive(Debug, Clone)]
pub struct PowerSpec {
    pub x1: DMatrix<f64>,
    pub x2: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// Values of the reduced-form mean `g`; `Y = g + V`.
    pub g_values: DMatrix<f64>,
    pub a_grid: Vec<DVector<f64>>,
    pub scale: f64,
}

/// Power skeleton drawn from the simulation DGP: one fixed standard-normal
/// draw of `X2` and `V`, the linear reduced-form mean `X2·Pi2`, and the grid
/// `a = lambda·a0`.
#[allow(clippy::too_many_arguments)]
pub fn dgp_power_spec(
    t: usize,
    k2: usize,
    eta: &DVector<f64>,
    pi0: Pi0Kind,
    a0: &DVector<f64>,
    lambdas: &[f64],
    scale: f64,
    seed: u64,
) -> Result<PowerSpec> {
    let g = a0.len();
    if eta.len() != g || g == 0 {
        return Err(Error::invalid("a0 and eta must have equal nonzero lengths"));
    }
    if k2 < g {
        return Err(Error::invalid("need k2 >= G"));
    }
    if lambdas.is_empty() {
        return Err(Error::invalid("empty lambda grid"));
    }
    let mut rng = substream(seed, StreamDomain::Design, 0);
    let x2 = DMatrix::from_fn(t, k2, |_, _| StandardNormal.sample(&mut rng));
    let mut rng_v = substream(seed, StreamDomain::Disturbance, 0);
    let v = DMatrix::from_fn(t, g, |_, _| StandardNormal.sample(&mut rng_v));
    let g_values = &x2 * build_pi2(k2, eta, pi0);
    Ok(PowerSpec {
        x1: DMatrix::zeros(t, 0),
        x2,
        v,
        g_values,
        a_grid: lambdas.iter().map(|&l| a0 * l).collect(),
        scale,
    })
}

/// One point of a power curve.
#[derive(Debug, Clone, Serialize)]
pub struct PowerPoint {
    pub a: Vec<f64>,
    pub delta: Noncentrality,
    pub power: TheoreticalPower,
}

/// Noncentralities and simulated T1/T2/R power along a grid of endogeneity
/// vectors, conditional on the supplied `(X, V)` draw.
pub fn power_curve(
    spec: &PowerSpec,
    alpha: f64,
    reps: usize,
    seed: u64,
) -> Result<Vec<PowerPoint>> {
    if !spec.scale.is_finite() || spec.scale <= 0.0 {
        return Err(Error::invalid("scale must be positive"));
    }
    let t = spec.v.nrows();
    let endog = &spec.g_values + &spec.v;
    // The outcome never enters the weight operators; a zero placeholder is
    // enough to carry the design.
    let problem = ExogeneityProblem::new(
        DVector::zeros(t),
        endog,
        spec.x1.clone(),
        spec.x2.clone(),
        false,
    )?;
    let w = weight_operators(&problem)?;
    let dims = problem.dims();

    let mut out = Vec::with_capacity(spec.a_grid.len());
    for (i, a) in spec.a_grid.iter().enumerate() {
        if a.len() != dims.g {
            return Err(Error::invalid("grid vector has wrong length"));
        }
        let a_bar = a / spec.scale;
        // mu_perp = M1 [V - Y] a_bar = -M1 g a_bar; quadratic_forms applies
        // M1 itself.
        let mu = -(&spec.g_values * &a_bar);
        let delta = noncentrality_params(&w, &mu)?;
        let power = theoretical_power_check(
            dims,
            &delta,
            alpha,
            reps,
            derive_seed(seed, StreamDomain::PowerCheck, i as u64),
        )?;
        out.push(PowerPoint {
            a: a.iter().copied().collect(),
            delta,
            power,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::fit;
    use crate::statistics::compute_direct;
    use crate::testutil::{dense_oracle, desk_problem};

    fn cfg(lambda: f64, eta: (f64, f64), seed: u64) -> DgpConfig {
        DgpConfig {
            t: 50,
            k2: 5,
            beta0: DVector::from_vec(vec![2.0, 5.0]),
            a0: DVector::from_vec(vec![0.5, 0.2]),
            lambda,
            eta: DVector::from_vec(vec![eta.0, eta.1]),
            law: DgpLaw::Gaussian,
            seed,
            pi0: Pi0Kind::Ones,
        }
    }

    #[test]
    fn lambda_zero_means_exogenous_errors() {
        let (_, latent) = generate_dataset(cfg(0.0, (0.5, 0.5), 3)).unwrap();
        assert_eq!(latent.u, latent.e);
    }

    #[test]
    fn eta_zero_means_unidentified_design() {
        let c = cfg(1.0, (0.0, 0.0), 4);
        let exp = Experiment::new(c).unwrap();
        let (p, latent) = exp.replicate(0).unwrap();
        assert_eq!(p.endog(), &latent.v);
    }

    #[test]
    fn replication_is_deterministic_and_x2_fixed() {
        let exp = Experiment::new(cfg(1.0, (0.5, 0.0), 5)).unwrap();
        let (p1, _) = exp.replicate(7).unwrap();
        let (p2, _) = exp.replicate(7).unwrap();
        assert_eq!(p1.y(), p2.y());
        let (p3, _) = exp.replicate(8).unwrap();
        assert_eq!(p1.x2(), p3.x2());
        assert_ne!(p1.y(), p3.y());
    }

    #[test]
    fn generated_data_fits_match_dense_oracle() {
        let (p, _) = generate_dataset(cfg(1.0, (0.5, 0.5), 6)).unwrap();
        let b = fit(&p).unwrap();
        let o = dense_oracle(&p);
        assert!((&b.beta_ols - &o.beta_ols).norm() < 1e-10);
        assert!((&b.beta_2sls - &o.beta_2sls).norm() < 1e-10);
        assert!((b.sigma2_tilde2 - o.sigma2_tilde2).abs() < 1e-10);
    }

    #[test]
    fn canonical_transform_is_invariant_and_identity_at_zero() {
        let p = desk_problem();
        let g = p.dims().g;
        let zero = DVector::zeros(g);
        let same = canonical_transform(&p, &zero, &zero).unwrap();
        assert_eq!(same.y(), p.y());

        let beta = DVector::from_element(g, 1.5);
        let a = DVector::from_element(g, 0.3);
        let moved = canonical_transform(&p, &beta, &a).unwrap();
        let s0 = compute_direct(&p, &fit(&p).unwrap()).unwrap();
        let s1 = compute_direct(&moved, &fit(&moved).unwrap()).unwrap();
        for st in Statistic::ALL {
            if s0.defined(st) {
                assert!(
                    (s0.get(st) - s1.get(st)).abs() / s0.get(st).abs().max(1e-12)
                        < 1e-8,
                    "{st}"
                );
            }
        }
    }

    #[test]
    fn noncentrality_zero_at_zero_shift_and_under_no_identification() {
        let p = desk_problem();
        let w = weight_operators(&p).unwrap();
        let zero = DVector::zeros(p.dims().t);
        let d = noncentrality_params(&w, &zero).unwrap();
        assert_eq!(d.psi0, 0.0);
        assert_eq!(d.psi_r, 0.0);

        // Unidentified DGP: g = 0, so the mean shift vanishes identically.
        let exp = Experiment::new(cfg(1.0, (0.0, 0.0), 9)).unwrap();
        let g_mat = exp.g_matrix();
        assert_eq!(g_mat.norm(), 0.0);
    }

    #[test]
    fn desk_noncentralities_match_dense_evaluation() {
        let p = desk_problem();
        let w = weight_operators(&p).unwrap();
        let dense = crate::testutil::dense_weight_matrices(&p);
        let t = p.dims().t as f64;
        let mu = DVector::from_fn(p.dims().t, |i, _| ((i * i) as f64 * 0.01).sin());
        // Project through M1 to satisfy the contract.
        let q1 = crate::linalg::OrthoBasis::with_default_tol(p.x1()).unwrap();
        let mu1 = q1.annihilate_vec(&mu).unwrap();
        let d = noncentrality_params(&w, &mu1).unwrap();
        let q = |m: &nalgebra::DMatrix<f64>| t * (mu1.transpose() * m * &mu1)[(0, 0)];
        assert!((d.psi0 - q(&dense.psi0)).abs() < 1e-8);
        assert!((d.lambda1 - q(&dense.lambda1)).abs() < 1e-8);
        assert!((d.lambda_r - q(&dense.lambda_r)).abs() < 1e-8);
    }

    #[test]
    fn theoretical_power_nominal_at_zero_and_monotone() {
        let dims = ProblemDims {
            t: 50,
            g: 2,
            k1: 0,
            k2: 5,
        };
        let zero = Noncentrality {
            psi0: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda4: 0.0,
            psi_r: 0.0,
            lambda_r: 0.0,
        };
        let p0 = theoretical_power_check(dims, &zero, 0.05, 40_000, 1).unwrap();
        assert!((p0.t2 - 0.05).abs() < 0.01);
        assert!((p0.r - 0.05).abs() < 0.01);

        let strong = Noncentrality {
            psi0: 80.0,
            ..zero
        };
        let p1 = theoretical_power_check(dims, &strong, 0.05, 20_000, 2).unwrap();
        assert!(p1.t2 > 0.99);
    }

    #[test]
    fn small_standard_table_runs_and_serializes() {
        let cfg = TableConfig::study_baseline(DgpLaw::Gaussian, TableMode::Standard, 11);
        let cells = [CellSpec {
            k2: 5,
            lambda: 0.0,
            eta1: 0.5,
            eta2: 0.5,
        }];
        let table = rejection_table(&cfg, &cells, 200).unwrap();
        let csv = table.to_csv();
        assert!(csv.starts_with("statistic,k2,lambda"));
        assert_eq!(csv.lines().count(), 1 + 8);
        let pct = table.pct(&cells[0], Statistic::T2).unwrap();
        assert!(pct < 20.0, "null rejection should be near 5, got {pct}");
        assert!(!table.to_text().is_empty());
    }

    #[test]
    fn left_out_instruments_static_shapes() {
        let exp = Experiment::new(cfg(1.0, (0.5, 0.0), 12))
            .unwrap()
            .with_observed_instruments(vec![0, 1, 2])
            .unwrap();
        let (p, _) = exp.replicate(0).unwrap();
        assert_eq!(p.dims().k2, 3);
    }
}
