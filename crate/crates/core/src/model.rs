//! The observed model: dependent variable, possibly endogenous regressors,
//! included exogenous regressors, and excluded instruments, together with
//! the rank-condition validation that every statistic relies on.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, numerical_rank, OrthoBasis, DEFAULT_RANK_TOL};

/// Sample and block dimensions of a problem. `k1` counts the intercept when
/// one was auto-added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProblemDims {
    pub t: usize,
    pub g: usize,
    pub k1: usize,
    pub k2: usize,
}

/// Degrees-of-freedom constants entering the statistics.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Kappas {
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub kappa4: f64,
    pub kappa_r: f64,
}

impl ProblemDims {
    pub fn kappas(&self) -> Kappas {
        let (t, g, k1, k2) = (
            self.t as f64,
            self.g as f64,
            self.k1 as f64,
            self.k2 as f64,
        );
        Kappas {
            kappa1: (k2 - g) / g,
            kappa2: (t - k1 - 2.0 * g) / g,
            kappa3: t - k1 - g,
            kappa4: t - k1 - g,
            kappa_r: (t - k1 - k2 - g) / k2,
        }
    }

    /// The first Wu statistic needs more instruments than regressors.
    pub fn t1_defined(&self) -> bool {
        self.k2 > self.g
    }
}

/// Column-role mapping for loading a problem from a table.
#[derive(Debug, Clone)]
pub struct ColumnRoles {
    pub y: String,
    pub endogenous: Vec<String>,
    pub exogenous: Vec<String>,
    pub instruments: Vec<String>,
    /// Auto-add a constant column to the included exogenous block.
    pub add_intercept: bool,
}

/// Observed data of a linear IV regression, validated at construction:
/// finite entries, consistent row counts, and the full-column-rank
/// conditions on `[Y, X]` and `[P[X]Y, X1]`.
#[derive(Debug, Clone)]
pub struct ExogeneityProblem {
    y: DVector<f64>,
    endog: DMatrix<f64>,
    x1: DMatrix<f64>,
    x2: DMatrix<f64>,
    intercept_added: bool,
}

impl ExogeneityProblem {
    /// Builds a problem from raw blocks. When `add_intercept` is set, a
    /// constant column is appended to `x1` first.
    pub fn new(
        y: DVector<f64>,
        endog: DMatrix<f64>,
        x1: DMatrix<f64>,
        x2: DMatrix<f64>,
        add_intercept: bool,
    ) -> Result<Self> {
        let t = y.len();
        if t == 0 {
            return Err(Error::invalid("empty sample"));
        }
        if endog.nrows() != t || x1.nrows() != t || x2.nrows() != t {
            return Err(Error::invalid("blocks disagree on the number of rows"));
        }
        if endog.ncols() == 0 {
            return Err(Error::invalid("need at least one endogenous regressor"));
        }
        if x2.ncols() == 0 {
            return Err(Error::invalid("need at least one excluded instrument"));
        }
        linalg::ensure_finite_vec(&y, "y").map_err(to_data_error)?;
        linalg::ensure_finite(&endog, "Y").map_err(to_data_error)?;
        linalg::ensure_finite(&x1, "X1").map_err(to_data_error)?;
        linalg::ensure_finite(&x2, "X2").map_err(to_data_error)?;

        let x1 = if add_intercept {
            let mut with = DMatrix::zeros(t, x1.ncols() + 1);
            with.column_mut(0).fill(1.0);
            with.view_mut((0, 1), (t, x1.ncols())).copy_from(&x1);
            with
        } else {
            x1
        };

        let problem = ExogeneityProblem {
            y,
            endog,
            x1,
            x2,
            intercept_added: add_intercept,
        };
        problem.check_rank_conditions(DEFAULT_RANK_TOL)?;
        Ok(problem)
    }

    fn check_rank_conditions(&self, tol: f64) -> Result<()> {
        let d = self.dims();
        let yx = self.concat_y_x();
        if numerical_rank(&yx, tol)? < d.g + d.k1 + d.k2 {
            return Err(Error::IdentificationData(
                "[Y, X] is not of full column rank (exact collinearity in the design)"
                    .into(),
            ));
        }
        let fitted = self.concat_fitted_x1(tol)?;
        if numerical_rank(&fitted, tol)? < d.g + d.k1 {
            return Err(Error::IdentificationData(
                "[P[X]Y, X1] is not of full column rank (instruments carry no \
                 information on Y beyond X1)"
                    .into(),
            ));
        }
        Ok(())
    }

    fn concat_y_x(&self) -> DMatrix<f64> {
        let d = self.dims();
        let mut m = DMatrix::zeros(d.t, d.g + d.k1 + d.k2);
        m.view_mut((0, 0), (d.t, d.g)).copy_from(&self.endog);
        m.view_mut((0, d.g), (d.t, d.k1)).copy_from(&self.x1);
        m.view_mut((0, d.g + d.k1), (d.t, d.k2)).copy_from(&self.x2);
        m
    }

    fn concat_fitted_x1(&self, tol: f64) -> Result<DMatrix<f64>> {
        let d = self.dims();
        let x = self.concat_x();
        let xb = OrthoBasis::new(&x, tol)?;
        let fitted = xb.basis() * xb.basis().tr_mul(&self.endog);
        let mut m = DMatrix::zeros(d.t, d.g + d.k1);
        m.view_mut((0, 0), (d.t, d.g)).copy_from(&fitted);
        m.view_mut((0, d.g), (d.t, d.k1)).copy_from(&self.x1);
        Ok(m)
    }

    /// `X = [X1, X2]`.
    pub fn concat_x(&self) -> DMatrix<f64> {
        let d = self.dims();
        let mut m = DMatrix::zeros(d.t, d.k1 + d.k2);
        m.view_mut((0, 0), (d.t, d.k1)).copy_from(&self.x1);
        m.view_mut((0, d.k1), (d.t, d.k2)).copy_from(&self.x2);
        m
    }

    pub fn dims(&self) -> ProblemDims {
        ProblemDims {
            t: self.y.len(),
            g: self.endog.ncols(),
            k1: self.x1.ncols(),
            k2: self.x2.ncols(),
        }
    }

    pub fn kappas(&self) -> Kappas {
        self.dims().kappas()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn endog(&self) -> &DMatrix<f64> {
        &self.endog
    }

    pub fn x1(&self) -> &DMatrix<f64> {
        &self.x1
    }

    pub fn x2(&self) -> &DMatrix<f64> {
        &self.x2
    }

    pub fn intercept_added(&self) -> bool {
        self.intercept_added
    }

    /// Writes the problem as CSV with canonical headers (`y`, `endog_j`,
    /// `exog_j`, `instr_j`). Numbers use the shortest round-trip
    /// representation, so reloading reproduces the data bit-exactly.
    pub fn to_csv<W: Write>(&self, out: W) -> Result<()> {
        let d = self.dims();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["y".to_string()];
        header.extend((0..d.g).map(|j| format!("endog_{j}")));
        header.extend((0..d.k1).map(|j| format!("exog_{j}")));
        header.extend((0..d.k2).map(|j| format!("instr_{j}")));
        w.write_record(&header)?;
        for i in 0..d.t {
            let mut rec = vec![format!("{}", self.y[i])];
            rec.extend((0..d.g).map(|j| format!("{}", self.endog[(i, j)])));
            rec.extend((0..d.k1).map(|j| format!("{}", self.x1[(i, j)])));
            rec.extend((0..d.k2).map(|j| format!("{}", self.x2[(i, j)])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Role mapping matching [`ExogeneityProblem::to_csv`] output. The
    /// stored `x1` already contains any intercept, so reloading must not add
    /// another one.
    pub fn canonical_roles(&self) -> ColumnRoles {
        let d = self.dims();
        ColumnRoles {
            y: "y".into(),
            endogenous: (0..d.g).map(|j| format!("endog_{j}")).collect(),
            exogenous: (0..d.k1).map(|j| format!("exog_{j}")).collect(),
            instruments: (0..d.k2).map(|j| format!("instr_{j}")).collect(),
            add_intercept: false,
        }
    }
}

fn to_data_error(e: Error) -> Error {
    match e {
        Error::InvalidInput(m) => Error::Data(m),
        other => other,
    }
}

/// Loads a problem from CSV text with a header row, comma delimiter, and
/// plain decimal numerics. Missing or non-numeric cells in mapped columns
/// are data errors; unknown role names are specification errors.
pub fn load_problem<R: Read>(reader: R, roles: &ColumnRoles) -> Result<ExogeneityProblem> {
    if roles.endogenous.is_empty() {
        return Err(Error::Spec("need at least one endogenous column".into()));
    }
    if roles.instruments.is_empty() {
        return Err(Error::Spec("need at least one instrument column".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Spec(format!("column '{name}' not found in header")))
    };

    let mut named: Vec<&String> = Vec::new();
    named.push(&roles.y);
    named.extend(roles.endogenous.iter());
    named.extend(roles.exogenous.iter());
    named.extend(roles.instruments.iter());
    for (i, a) in named.iter().enumerate() {
        for b in named.iter().skip(i + 1) {
            if a == b {
                return Err(Error::Spec(format!("column '{a}' mapped to two roles")));
            }
        }
    }

    let y_idx = find(&roles.y)?;
    let endog_idx: Vec<usize> = roles
        .endogenous
        .iter()
        .map(|n| find(n))
        .collect::<Result<_>>()?;
    let exog_idx: Vec<usize> = roles
        .exogenous
        .iter()
        .map(|n| find(n))
        .collect::<Result<_>>()?;
    let instr_idx: Vec<usize> = roles
        .instruments
        .iter()
        .map(|n| find(n))
        .collect::<Result<_>>()?;

    let parse = |rec: &csv::StringRecord, idx: usize, row: usize| -> Result<f64> {
        let cell = rec.get(idx).ok_or_else(|| {
            Error::Data(format!("row {row}: missing cell in column {idx}"))
        })?;
        if cell.is_empty() {
            return Err(Error::Data(format!(
                "row {row}, column '{}': empty cell",
                headers.get(idx).unwrap_or("?")
            )));
        }
        let v: f64 = cell.parse().map_err(|_| {
            Error::Data(format!(
                "row {row}, column '{}': not numeric: '{cell}'",
                headers.get(idx).unwrap_or("?")
            ))
        })?;
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "row {row}, column '{}': non-finite value",
                headers.get(idx).unwrap_or("?")
            )));
        }
        Ok(v)
    };

    let mut y = Vec::new();
    let mut endog = Vec::new();
    let mut exog = Vec::new();
    let mut instr = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        y.push(parse(&rec, y_idx, row)?);
        for &i in &endog_idx {
            endog.push(parse(&rec, i, row)?);
        }
        for &i in &exog_idx {
            exog.push(parse(&rec, i, row)?);
        }
        for &i in &instr_idx {
            instr.push(parse(&rec, i, row)?);
        }
    }
    let t = y.len();
    if t == 0 {
        return Err(Error::Data("no data rows".into()));
    }
    let endog = DMatrix::from_row_slice(t, endog_idx.len(), &endog);
    let exog = DMatrix::from_row_slice(t, exog_idx.len(), &exog);
    let instr = DMatrix::from_row_slice(t, instr_idx.len(), &instr);
    ExogeneityProblem::new(
        DVector::from_vec(y),
        endog,
        exog,
        instr,
        roles.add_intercept,
    )
}

/// A single validation finding.
#[derive(Debug, Clone, Serialize)]
pub enum ValidationFailure {
    /// A degrees-of-freedom constant is not strictly positive.
    DegenerateDims { constant: String, value: f64 },
    /// Rank of a design block fell short of its column count.
    RankDeficient { block: String, rank: usize, expected: usize },
}

/// Outcome of [`validate`]: ranks, constants, statistic availability, and
/// any failures. Deterministic and side-effect free.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub dims: ProblemDims,
    pub rank_y_x: usize,
    pub rank_fitted_x1: usize,
    pub kappas: Kappas,
    pub t1_defined: bool,
    pub failures: Vec<ValidationFailure>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Reports the rank conditions and degrees-of-freedom constants of a problem.
pub fn validate(p: &ExogeneityProblem, tol: f64) -> Result<ValidationReport> {
    let dims = p.dims();
    let kappas = dims.kappas();
    let mut failures = Vec::new();

    let rank_y_x = numerical_rank(&p.concat_y_x(), tol)?;
    if rank_y_x < dims.g + dims.k1 + dims.k2 {
        failures.push(ValidationFailure::RankDeficient {
            block: "[Y, X]".into(),
            rank: rank_y_x,
            expected: dims.g + dims.k1 + dims.k2,
        });
    }
    let rank_fitted_x1 = numerical_rank(&p.concat_fitted_x1(tol)?, tol)?;
    if rank_fitted_x1 < dims.g + dims.k1 {
        failures.push(ValidationFailure::RankDeficient {
            block: "[P[X]Y, X1]".into(),
            rank: rank_fitted_x1,
            expected: dims.g + dims.k1,
        });
    }
    for (name, value) in [
        ("kappa2", kappas.kappa2),
        ("kappa3", kappas.kappa3),
        ("kappa_r", kappas.kappa_r),
    ] {
        if value <= 0.0 {
            failures.push(ValidationFailure::DegenerateDims {
                constant: name.into(),
                value,
            });
        }
    }

    Ok(ValidationReport {
        dims,
        rank_y_x,
        rank_fitted_x1,
        kappas,
        t1_defined: dims.t1_defined(),
        failures,
    })
}
