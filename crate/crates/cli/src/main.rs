//! `exotest`: batch front end for exogeneity testing.
//!
//! Three subcommands: `test` runs the statistics and Monte Carlo p-values on
//! a user CSV, `simulate` reproduces size/power rejection tables, and
//! `power` emits noncentralities with simulated power along an endogeneity
//! grid. Exit codes: 0 success, 2 user error, 3 internal error.

mod report;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use exotest_core::error::Error as CoreError;
use exotest_core::experiments::{
    dgp_power_spec, power_curve, rejection_table, CellSpec, DgpLaw, Pi0Kind,
    TableConfig, TableMode, TablePreset, X2Scheme,
};
use exotest_core::mct::ErrorLaw;
use exotest_core::model::{load_problem, validate, ColumnRoles};

#[derive(Parser)]
#[command(
    name = "exotest",
    version,
    about = "Exact finite-sample exogeneity tests for linear IV regressions"
)]
struct Cli {
    /// Cap the worker thread count (does not affect results).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test exogeneity on a CSV dataset and write a JSON report.
    Test(TestArgs),
    /// Simulate size/power rejection tables.
    Simulate(SimulateArgs),
    /// Noncentralities and simulated power over an endogeneity grid.
    Power(PowerArgs),
}

#[derive(Args)]
struct TestArgs {
    /// Input CSV file (header row, comma delimiter).
    #[arg(long)]
    data: PathBuf,
    /// Dependent-variable column.
    #[arg(long)]
    y: String,
    /// Possibly endogenous regressor columns, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    endog: Vec<String>,
    /// Included exogenous columns, comma separated (may be omitted).
    #[arg(long, value_delimiter = ',')]
    exog: Vec<String>,
    /// Excluded instrument columns, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    instr: Vec<String>,
    /// Do not auto-add an intercept to the exogenous block.
    #[arg(long)]
    no_intercept: bool,
    /// Error law for the Monte Carlo test: `gaussian` or `t:<df>`.
    /// Repeatable; one Monte Carlo block is reported per law.
    #[arg(long = "law", default_values_t = [String::from("gaussian")])]
    laws: Vec<String>,
    /// Monte Carlo pseudo-samples per law (0 disables the MC test).
    #[arg(long, default_value_t = 199)]
    mc_draws: usize,
    /// Nominal level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Master seed for the Monte Carlo draws.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Published-table preset: table1..table4 (law and decision mode).
    #[arg(long)]
    preset: Option<String>,
    /// Cell selection: `smoke` (12 cells) or `full`.
    #[arg(long, default_value = "smoke")]
    cells: String,
    /// Explicit cell `k2=5,lambda=1,eta1=0.5,eta2=0`; repeatable and
    /// overrides --cells.
    #[arg(long = "cell")]
    cell: Vec<String>,
    /// Decision mode override: `standard` or `mc`.
    #[arg(long)]
    mode: Option<String>,
    /// Error law override: `gaussian` or `t:<df>`.
    #[arg(long)]
    law: Option<String>,
    /// Replications per cell.
    #[arg(long, default_value_t = 2000)]
    reps: usize,
    /// Monte Carlo pseudo-samples (mc mode).
    #[arg(long, default_value_t = 199)]
    mc_draws: usize,
    /// Nominal level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Instrument-matrix handling: `fixed` per cell or `redraw` per
    /// replication.
    #[arg(long, default_value = "fixed")]
    x2: String,
    /// First-stage base matrix: `ones` or `identity`.
    #[arg(long, default_value = "ones")]
    pi0: String,
    /// Sample size.
    #[arg(long, default_value_t = 50)]
    t: usize,
    /// Master seed (required: the tables are meaningless without it).
    #[arg(long)]
    seed: u64,
    /// Write `<prefix>.csv` and `<prefix>.txt` instead of stdout.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
}

#[derive(Args)]
struct PowerArgs {
    /// Sample size.
    #[arg(long, default_value_t = 50)]
    t: usize,
    /// Number of excluded instruments.
    #[arg(long, default_value_t = 5)]
    k2: usize,
    /// Instrument strengths, one per endogenous regressor.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.5])]
    eta: Vec<f64>,
    /// Structural coefficients (fixes G).
    #[arg(long, value_delimiter = ',', default_values_t = [2.0, 5.0])]
    beta0: Vec<f64>,
    /// Endogeneity direction; the grid scales it.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.2])]
    a0: Vec<f64>,
    /// Grid of multipliers: a = lambda * a0.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_values_t = [-20.0, -5.0, 0.0, 1.0, 100.0]
    )]
    lambdas: Vec<f64>,
    /// Error scale sigma; enters as a_bar = a / sigma.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Draws for the noncentral-F power simulation.
    #[arg(long, default_value_t = 100_000)]
    reps: usize,
    /// Nominal level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// First-stage base matrix: `ones` or `identity`.
    #[arg(long, default_value = "ones")]
    pi0: String,
    /// Master seed (required).
    #[arg(long)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// User-facing failures exit 2, internal ones exit 3.
enum CliError {
    User(String),
    Internal(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(format!("report serialization failed: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        // Results do not depend on the pool size; ignore double-init.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let result = match cli.command {
        Command::Test(args) => cmd_test(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Power(args) => cmd_power(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn parse_law(s: &str) -> Result<ErrorLaw, CliError> {
    if s.eq_ignore_ascii_case("gaussian") {
        return Ok(ErrorLaw::GaussianIid);
    }
    if let Some(df) = s.strip_prefix("t:").or_else(|| s.strip_prefix("T:")) {
        let df: u32 = df
            .parse()
            .map_err(|_| CliError::User(format!("bad degrees of freedom in '{s}'")))?;
        return Ok(ErrorLaw::student_t(df)?);
    }
    Err(CliError::User(format!(
        "unknown law '{s}' (expected 'gaussian' or 't:<df>')"
    )))
}

fn parse_dgp_law(s: &str) -> Result<DgpLaw, CliError> {
    match parse_law(s)? {
        ErrorLaw::GaussianIid => Ok(DgpLaw::Gaussian),
        ErrorLaw::StudentT { df } => Ok(DgpLaw::StudentT { df }),
        ErrorLaw::Custom(_) => unreachable!("parse_law never builds custom laws"),
    }
}

fn parse_pi0(s: &str) -> Result<Pi0Kind, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "ones" => Ok(Pi0Kind::Ones),
        "identity" => Ok(Pi0Kind::IdentityColumns),
        _ => Err(CliError::User(format!(
            "unknown pi0 '{s}' (expected 'ones' or 'identity')"
        ))),
    }
}

fn write_or_print(path: &Option<PathBuf>, content: &str) -> Result<(), CliError> {
    match path {
        Some(p) => {
            fs::write(p, content)?;
            Ok(())
        }
        None => {
            if content.ends_with('\n') {
                print!("{content}");
            } else {
                println!("{content}");
            }
            Ok(())
        }
    }
}

fn cmd_test(args: TestArgs) -> Result<(), CliError> {
    let bytes = fs::read(&args.data)
        .map_err(|e| CliError::User(format!("{}: {e}", args.data.display())))?;
    let digest = report::sha256_hex(&bytes);

    let roles = ColumnRoles {
        y: args.y.clone(),
        endogenous: args.endog.clone(),
        exogenous: args.exog.clone(),
        instruments: args.instr.clone(),
        add_intercept: !args.no_intercept,
    };
    let problem = load_problem(bytes.as_slice(), &roles)?;
    let validation = validate(&problem, 1e-10)?;
    if !validation.is_ok() {
        return Err(CliError::User(format!(
            "validation failed: {}",
            serde_json::to_string(&validation.failures)?
        )));
    }

    let laws = args
        .laws
        .iter()
        .map(|s| parse_law(s))
        .collect::<Result<Vec<_>, _>>()?;

    if args.mc_draws > 0 {
        let achieved = exotest_core::mct::plan_level(args.alpha, args.mc_draws)?;
        if (achieved - args.alpha).abs() > 1e-12 {
            eprintln!(
                "note: alpha = {} is not exactly achievable with {} draws; \
                 the test runs at level {achieved}",
                args.alpha, args.mc_draws
            );
        }
    }

    let json = report::test_report(
        &problem,
        &validation,
        &laws,
        args.mc_draws,
        args.alpha,
        args.seed,
        report::Manifest::new(
            "test",
            serde_json::json!({
                "data": args.data.display().to_string(),
                "y": args.y,
                "endog": args.endog,
                "exog": args.exog,
                "instr": args.instr,
                "intercept": !args.no_intercept,
                "laws": args.laws,
                "mc_draws": args.mc_draws,
                "alpha": args.alpha,
            }),
            args.seed,
            Some(digest),
        ),
    )?;
    write_or_print(&args.out, &json)
}

fn parse_cell(s: &str) -> Result<CellSpec, CliError> {
    let mut k2 = None;
    let mut lambda = None;
    let mut eta1 = None;
    let mut eta2 = None;
    for part in s.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::User(format!("bad cell component '{part}'")))?;
        let v: f64 = value
            .parse()
            .map_err(|_| CliError::User(format!("bad number in '{part}'")))?;
        match key.trim() {
            "k2" => k2 = Some(v as usize),
            "lambda" => lambda = Some(v),
            "eta1" => eta1 = Some(v),
            "eta2" => eta2 = Some(v),
            other => {
                return Err(CliError::User(format!("unknown cell key '{other}'")))
            }
        }
    }
    Ok(CellSpec {
        k2: k2.ok_or_else(|| CliError::User("cell needs k2=".into()))?,
        lambda: lambda.ok_or_else(|| CliError::User("cell needs lambda=".into()))?,
        eta1: eta1.ok_or_else(|| CliError::User("cell needs eta1=".into()))?,
        eta2: eta2.ok_or_else(|| CliError::User("cell needs eta2=".into()))?,
    })
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    if args.reps == 0 {
        return Err(CliError::User("--reps must be positive".into()));
    }
    let preset = match &args.preset {
        Some(p) => Some(TablePreset::parse(p).ok_or_else(|| {
            CliError::User(format!("unknown preset '{p}' (table1..table4)"))
        })?),
        None => None,
    };
    let law = match (&args.law, preset) {
        (Some(s), _) => parse_dgp_law(s)?,
        (None, Some(p)) => p.law(),
        (None, None) => DgpLaw::Gaussian,
    };
    let mode = match (&args.mode, preset) {
        (Some(s), _) => match s.to_ascii_lowercase().as_str() {
            "standard" => TableMode::Standard,
            "mc" => TableMode::MonteCarlo {
                n_draws: args.mc_draws,
            },
            other => {
                return Err(CliError::User(format!(
                    "unknown mode '{other}' (standard|mc)"
                )))
            }
        },
        (None, Some(p)) => p.mode(args.mc_draws),
        (None, None) => TableMode::Standard,
    };
    let scheme = match args.x2.to_ascii_lowercase().as_str() {
        "fixed" => X2Scheme::FixedPerCell,
        "redraw" => X2Scheme::RedrawPerReplication,
        other => {
            return Err(CliError::User(format!(
                "unknown x2 scheme '{other}' (fixed|redraw)"
            )))
        }
    };

    let cells: Vec<CellSpec> = if !args.cell.is_empty() {
        args.cell
            .iter()
            .map(|s| parse_cell(s))
            .collect::<Result<_, _>>()?
    } else {
        match args.cells.to_ascii_lowercase().as_str() {
            "smoke" => exotest_core::experiments::smoke_cells(),
            "full" => exotest_core::experiments::full_grid_cells(),
            other => {
                return Err(CliError::User(format!(
                    "unknown cell set '{other}' (smoke|full)"
                )))
            }
        }
    };

    let mut cfg = TableConfig::study_baseline(law, mode, args.seed);
    cfg.t = args.t;
    cfg.alpha = args.alpha;
    cfg.scheme = scheme;
    cfg.pi0 = parse_pi0(&args.pi0)?;

    let table = rejection_table(&cfg, &cells, args.reps)?;
    match &args.out_prefix {
        Some(prefix) => {
            let csv_path = prefix.with_extension("csv");
            let txt_path = prefix.with_extension("txt");
            fs::write(&csv_path, table.to_csv())?;
            fs::write(&txt_path, table.to_text())?;
            eprintln!(
                "wrote {} and {}",
                csv_path.display(),
                txt_path.display()
            );
            Ok(())
        }
        None => {
            print!("{}", table.to_csv());
            Ok(())
        }
    }
}

fn cmd_power(args: PowerArgs) -> Result<(), CliError> {
    let g = args.beta0.len();
    if args.a0.len() != g || args.eta.len() != g {
        return Err(CliError::User(
            "beta0, a0 and eta must have equal lengths".into(),
        ));
    }
    if args.lambdas.is_empty() {
        return Err(CliError::User("empty lambda grid".into()));
    }
    if args.k2 < g {
        return Err(CliError::User("need k2 >= G".into()));
    }
    if !args.scale.is_finite() || args.scale <= 0.0 {
        return Err(CliError::User("scale must be positive".into()));
    }
    if args.reps == 0 {
        return Err(CliError::User("--reps must be positive".into()));
    }

    let spec = dgp_power_spec(
        args.t,
        args.k2,
        &DVector::from_vec(args.eta.clone()),
        parse_pi0(&args.pi0)?,
        &DVector::from_vec(args.a0.clone()),
        &args.lambdas,
        args.scale,
        args.seed,
    )?;
    let points = power_curve(&spec, args.alpha, args.reps, args.seed)?;

    let mut csv = String::from(
        "lambda,a,delta_psi0,delta_lambda1,delta_lambda2,delta_lambda4,\
         delta_psi_r,delta_lambda_r,power_t1,power_t2,power_r\n",
    );
    for (lambda, pt) in args.lambdas.iter().zip(points.iter()) {
        let a_str = pt
            .a
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let t1 = pt
            .power
            .t1
            .map(|v| v.to_string())
            .unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            lambda,
            a_str,
            pt.delta.psi0,
            pt.delta.lambda1,
            pt.delta.lambda2,
            pt.delta.lambda4,
            pt.delta.psi_r,
            pt.delta.lambda_r,
            t1,
            pt.power.t2,
            pt.power.r
        ));
    }
    write_or_print(&args.out, &csv)
}
