//! Finite-sample exogeneity testing for linear IV regressions.
//!
//! Computes the Durbin-Wu-Hausman statistics (`T1`-`T4`, `H1`-`H3`) and the
//! Revankar-Hartley statistic (`R`), their reference p-values, and exact
//! Monte Carlo p-values that remain valid under weak identification and
//! non-Gaussian errors. A simulation module reproduces the size/power study
//! the method was validated on.
//!
//! Typical flow:
//!
//! ```
//! use exotest_core::{estimators, mct, model, statistics};
//!
//! let problem = exotest_core::testutil::desk_problem();
//! let report = model::validate(&problem, 1e-10).unwrap();
//! assert!(report.is_ok());
//!
//! let bundle = estimators::fit(&problem).unwrap();
//! let stats = statistics::compute_direct(&problem, &bundle).unwrap();
//! let pvals = statistics::reference_pvalues(&stats, problem.dims()).unwrap();
//! assert!(pvals.t2.unwrap() > 0.0);
//!
//! let cfg = mct::MctConfig::new(mct::ErrorLaw::GaussianIid, 42);
//! let mc = mct::mc_test(&problem, &cfg).unwrap();
//! assert_eq!(mc.achieved_alpha, 0.05);
//! ```

pub mod dist;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod linalg;
pub mod mct;
pub mod model;
pub mod rng;
pub mod statistics;
pub mod testutil;

mod design;

pub use error::{Error, Result};
pub use model::{ColumnRoles, ExogeneityProblem, ProblemDims};
pub use statistics::{Statistic, StatisticSet};
