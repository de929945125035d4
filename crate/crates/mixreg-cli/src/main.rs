//! `mixreg` — robust mixture-of-regressions fitting from the command line.
//!
//! Three subcommands:
//! - `fit`: read a CSV, fit a g-component mixture regression with the chosen
//!   estimator, attach sandwich standard errors and ICL, emit a JSON or CSV
//!   report.
//! - `simulate`: run a seeded replication plan over the benchmark scenarios
//!   and write bias/MSE tables.
//! - `export-fit`: turn a saved fit report into a plottable CSV of fitted
//!   lines plus per-observation component assignments.
//!
//! Exit codes: 0 success, 2 input error, 3 estimation failure. All commands
//! are deterministic under a fixed `--seed`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mixreg::em::fit;
use mixreg::inference::sandwich_covariance;
use mixreg::model::{EstimatorKind, EstimatorSpec, FitConfig, RegressionData};
use mixreg::sim::{
    default_outlier_count, format_table, run_plan_with_progress, summary_csv, NoiseCase,
    OutlierRecipe, PlanInitialization, ReplicationPlan, Scenario, ScenarioSpec,
};
use mixreg::{MixregError, PsiKernel, HUBER_DEFAULT_TUNING, TUKEY_DEFAULT_TUNING};
use nalgebra::{DMatrix, DVector};

#[derive(Parser)]
#[command(
    name = "mixreg",
    version,
    about = "Robust mixture regression fitting, simulation and export"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a mixture regression model to a CSV dataset.
    Fit(FitArgs),
    /// Run a replicated simulation plan and write bias/MSE tables.
    Simulate(SimulateArgs),
    /// Export fitted lines and MAP assignments from a saved fit report.
    ExportFit(ExportFitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    M,
    GmMallows,
    GmSchweppe,
}

#[derive(Clone, Copy, ValueEnum)]
enum PsiArg {
    Huber,
    Tukey,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    CsvTable,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    /// Start each replication's EM at the generating parameters.
    Truth,
    /// Regular seeded multi-start fit.
    Multistart,
}

#[derive(Clone, Copy, ValueEnum)]
enum CaseArg {
    #[value(name = "I")]
    I,
    #[value(name = "II")]
    II,
    #[value(name = "III")]
    III,
    #[value(name = "IV")]
    IV,
}

#[derive(Args)]
struct FitArgs {
    /// Input CSV (header row mandatory, '.' decimals, UTF-8).
    #[arg(long)]
    data: PathBuf,
    /// Response column name.
    #[arg(long)]
    response: String,
    /// Comma-separated predictor column names.
    #[arg(long, value_delimiter = ',', required = true)]
    predictors: Vec<String>,
    /// Number of mixture components.
    #[arg(long, default_value_t = 2)]
    components: usize,
    #[arg(long, value_enum, default_value_t = EstimatorArg::GmMallows)]
    estimator: EstimatorArg,
    #[arg(long, value_enum, default_value_t = PsiArg::Huber)]
    psi: PsiArg,
    /// Kernel tuning constant (defaults: huber 1.345, tukey 4.685).
    #[arg(long)]
    tuning: Option<f64>,
    /// Leverage-cutoff tail probability for the GM estimators.
    #[arg(long, default_value_t = 0.05)]
    gamma: f64,
    /// EM stopping tolerance on the parameter-change norm.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    /// Number of random-partition EM starts.
    #[arg(long, default_value_t = 10)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lower bound on component scales (default: 1e-4 × sd(response)).
    #[arg(long)]
    sigma_floor: Option<f64>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    #[arg(long, value_enum)]
    case: CaseArg,
    /// Observations per replication.
    #[arg(long)]
    n: usize,
    /// Number of replications.
    #[arg(long = "N", visible_alias = "replications")]
    replications: usize,
    /// `all` or a comma list of m-huber, m-tukey, gm-mallows, gm-schweppe.
    #[arg(long, default_value = "all")]
    estimators: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Leverage rows substituted in case IV (default n/40).
    #[arg(long)]
    n_outliers: Option<usize>,
    /// Predictor value of substituted leverage rows.
    #[arg(long, default_value_t = 20.0)]
    outlier_x: f64,
    /// Response value of substituted leverage rows.
    #[arg(long, default_value_t = 0.0)]
    outlier_y: f64,
    #[arg(long, default_value_t = 0.05)]
    gamma: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    /// EM starts per fit (multi-start initialization only).
    #[arg(long, default_value_t = 5)]
    starts: usize,
    /// Replication initialization strategy.
    #[arg(long, value_enum, default_value_t = InitArg::Multistart)]
    init: InitArg,
    /// Output prefix; writes PREFIX.txt and PREFIX.csv.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExportFitArgs {
    /// A JSON report produced by `mixreg fit --format json`.
    #[arg(long)]
    report: PathBuf,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// report schema

#[derive(Serialize, Deserialize)]
struct InputFingerprint {
    rows: usize,
    columns: Vec<String>,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct StandardErrors {
    /// Per component, per coefficient; same layout as `coefficients`.
    coefficients: Vec<Vec<f64>>,
    /// For the first g−1 mixing probabilities.
    mixing: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FitReport {
    seed: u64,
    estimator: String,
    psi: String,
    tuning: f64,
    gamma: f64,
    tolerance: f64,
    max_iterations: usize,
    n_starts: usize,
    data_path: String,
    response: String,
    predictors: Vec<String>,
    input: InputFingerprint,
    components: usize,
    mixing: Vec<f64>,
    coefficients: Vec<Vec<f64>>,
    scales: Vec<f64>,
    standard_errors: Option<StandardErrors>,
    complete_loglik: f64,
    gaussian_loglik: f64,
    icl: f64,
    iterations: usize,
    converged: bool,
    posteriors: Vec<Vec<f64>>,
    leverage_weights: Option<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// error-to-exit-code mapping

enum CliError {
    /// Missing files, malformed CSV, bad column references: exit 2.
    Input(String),
    /// The estimator could not produce a fit: exit 3.
    Estimation(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Estimation(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Estimation(m) => m,
        }
    }
}

fn estimation_error(e: MixregError) -> CliError {
    match e {
        MixregError::FitFailed { .. }
        | MixregError::ComponentCollapse { .. }
        | MixregError::InitializationFailed(_)
        | MixregError::DegenerateScatter(_)
        | MixregError::PlanFailed { .. } => CliError::Estimation(e.to_string()),
        other => CliError::Input(other.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(args) => cmd_fit(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::ExportFit(args) => cmd_export_fit(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

// ---------------------------------------------------------------------------
// fit

struct CsvData {
    columns: Vec<String>,
    rows: Vec<csv::StringRecord>,
    sha256: String,
}

fn read_csv(path: &Path) -> Result<CsvData, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let sha256 = hex_digest(&bytes);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes.as_slice());
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Input(format!("{}: cannot read header row: {e}", path.display())))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record
            .map_err(|e| CliError::Input(format!("{}: row {}: {e}", path.display(), idx + 2)))?;
        if record.len() != columns.len() {
            return Err(CliError::Input(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                idx + 2,
                record.len(),
                columns.len()
            )));
        }
        rows.push(record);
    }
    Ok(CsvData {
        columns,
        rows,
        sha256,
    })
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn numeric_column(csv: &CsvData, name: &str, path: &Path) -> Result<Vec<f64>, CliError> {
    let col = csv.columns.iter().position(|c| c == name).ok_or_else(|| {
        CliError::Input(format!(
            "{}: column '{name}' not found (available: {})",
            path.display(),
            csv.columns.join(", ")
        ))
    })?;
    csv.rows
        .iter()
        .enumerate()
        .map(|(idx, row)| {
            let cell = row.get(col).unwrap_or("");
            cell.trim().parse::<f64>().map_err(|_| {
                CliError::Input(format!(
                    "{}: row {}, column '{name}': '{cell}' is not numeric",
                    path.display(),
                    idx + 2
                ))
            })
        })
        .collect()
}

fn kernel_of(psi: PsiArg, tuning: Option<f64>) -> Result<(PsiKernel, String, f64), CliError> {
    let (kernel, name, c) = match psi {
        PsiArg::Huber => {
            let c = tuning.unwrap_or(HUBER_DEFAULT_TUNING);
            (PsiKernel::huber(c), "huber".to_string(), c)
        }
        PsiArg::Tukey => {
            let c = tuning.unwrap_or(TUKEY_DEFAULT_TUNING);
            (PsiKernel::tukey(c), "tukey".to_string(), c)
        }
    };
    let kernel = kernel.map_err(|e| CliError::Input(e.to_string()))?;
    Ok((kernel, name, c))
}

fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    if args.predictors.contains(&args.response) {
        return Err(CliError::Input(format!(
            "response column '{}' also listed among predictors",
            args.response
        )));
    }
    let csv = read_csv(&args.data)?;
    let y = numeric_column(&csv, &args.response, &args.data)?;
    let mut predictor_cols = Vec::with_capacity(args.predictors.len());
    for name in &args.predictors {
        predictor_cols.push(numeric_column(&csv, name, &args.data)?);
    }
    let n = y.len();
    let px = predictor_cols.len();
    let predictors = DMatrix::from_fn(n, px, |r, c| predictor_cols[c][r]);
    let data = RegressionData::from_predictors(&predictors, DVector::from_vec(y))
        .map_err(|e| CliError::Input(e.to_string()))?;

    let (kernel, psi_name, tuning) = kernel_of(args.psi, args.tuning)?;
    let (kind, estimator_name) = match args.estimator {
        EstimatorArg::M => (EstimatorKind::M, "m"),
        EstimatorArg::GmMallows => (EstimatorKind::GmMallows, "gm-mallows"),
        EstimatorArg::GmSchweppe => (EstimatorKind::GmSchweppe, "gm-schweppe"),
    };
    let spec = EstimatorSpec {
        kind,
        kernel,
        gamma: args.gamma,
    };
    let config = FitConfig {
        tolerance: args.tol,
        max_iterations: args.max_iter,
        n_starts: args.starts,
        seed: args.seed,
        sigma_floor: args.sigma_floor,
        record_trace: false,
    };
    let result = fit(&data, args.components, &spec, &config).map_err(estimation_error)?;

    let standard_errors = match sandwich_covariance(&data, &result, &spec) {
        Ok(report) => {
            let g = args.components;
            let p = data.p();
            let coefficients: Vec<Vec<f64>> = (0..g)
                .map(|i| report.standard_errors[i * p..(i + 1) * p].to_vec())
                .collect();
            let mixing = report.standard_errors[g * p..].to_vec();
            Some(StandardErrors {
                coefficients,
                mixing,
            })
        }
        Err(e) => {
            eprintln!("warning: standard errors unavailable: {e}");
            None
        }
    };

    let report = FitReport {
        seed: args.seed,
        estimator: estimator_name.to_string(),
        psi: psi_name,
        tuning,
        gamma: args.gamma,
        tolerance: args.tol,
        max_iterations: args.max_iter,
        n_starts: args.starts,
        data_path: args.data.display().to_string(),
        response: args.response.clone(),
        predictors: args.predictors.clone(),
        input: InputFingerprint {
            rows: csv.rows.len(),
            columns: csv.columns.clone(),
            sha256: csv.sha256,
        },
        components: args.components,
        mixing: result.params.mixing().to_vec(),
        coefficients: result
            .params
            .coefficients()
            .iter()
            .map(|b| b.iter().cloned().collect())
            .collect(),
        scales: result.params.scales().to_vec(),
        standard_errors,
        complete_loglik: result.complete_loglik,
        gaussian_loglik: result.gaussian_loglik,
        icl: result.icl,
        iterations: result.iterations,
        converged: result.converged,
        posteriors: (0..data.n())
            .map(|j| {
                (0..args.components)
                    .map(|i| result.posteriors[(j, i)])
                    .collect()
            })
            .collect(),
        leverage_weights: result.leverage.as_ref().map(|l| l.as_slice().to_vec()),
    };

    let text = match args.format {
        FormatArg::Json => {
            let mut s = serde_json::to_string_pretty(&report)
                .map_err(|e| CliError::Input(format!("serialization failed: {e}")))?;
            s.push('\n');
            s
        }
        FormatArg::CsvTable => report_csv_table(&report),
    };
    write_output(args.output.as_deref(), &text)
}

fn report_csv_table(report: &FitReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# mixreg fit: estimator={} psi={} tuning={} gamma={} components={} seed={}",
        report.estimator, report.psi, report.tuning, report.gamma, report.components, report.seed
    );
    out.push_str("parameter,estimate,std_error\n");
    for (i, pi) in report.mixing.iter().enumerate() {
        let se = report
            .standard_errors
            .as_ref()
            .and_then(|s| s.mixing.get(i))
            .map(|v| v.to_string())
            .unwrap_or_default();
        let _ = writeln!(out, "pi{},{},{}", i + 1, pi, se);
    }
    for (i, beta) in report.coefficients.iter().enumerate() {
        for (k, b) in beta.iter().enumerate() {
            let se = report
                .standard_errors
                .as_ref()
                .and_then(|s| s.coefficients.get(i))
                .and_then(|row| row.get(k))
                .map(|v| v.to_string())
                .unwrap_or_default();
            let _ = writeln!(out, "beta{}{},{},{}", i + 1, k, b, se);
        }
    }
    for (i, s) in report.scales.iter().enumerate() {
        let _ = writeln!(out, "sigma{},{},", i + 1, s);
    }
    let _ = writeln!(out, "complete_loglik,{},", report.complete_loglik);
    let _ = writeln!(out, "gaussian_loglik,{},", report.gaussian_loglik);
    let _ = writeln!(out, "icl,{},", report.icl);
    let _ = writeln!(out, "iterations,{},", report.iterations);
    let _ = writeln!(out, "converged,{},", report.converged);
    out
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text)
            .map_err(|e| CliError::Input(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// simulate

fn standard_estimators(gamma: f64) -> Vec<(String, EstimatorSpec)> {
    let huber = PsiKernel::huber(HUBER_DEFAULT_TUNING).expect("valid tuning");
    let tukey = PsiKernel::tukey(TUKEY_DEFAULT_TUNING).expect("valid tuning");
    vec![
        ("m-huber".to_string(), EstimatorSpec::m(huber)),
        ("m-tukey".to_string(), EstimatorSpec::m(tukey)),
        (
            "gm-mallows".to_string(),
            EstimatorSpec::mallows(huber, gamma),
        ),
        (
            "gm-schweppe".to_string(),
            EstimatorSpec::schweppe(huber, gamma),
        ),
    ]
}

fn parse_estimators(list: &str, gamma: f64) -> Result<Vec<(String, EstimatorSpec)>, CliError> {
    let all = standard_estimators(gamma);
    if list.trim() == "all" {
        return Ok(all);
    }
    let mut chosen = Vec::new();
    for name in list.split(',') {
        let name = name.trim();
        match all.iter().find(|(n, _)| n == name) {
            Some(entry) => chosen.push(entry.clone()),
            None => {
                return Err(CliError::Input(format!(
                    "unknown estimator '{name}' (expected all or a comma list of m-huber, m-tukey, gm-mallows, gm-schweppe)"
                )))
            }
        }
    }
    Ok(chosen)
}

fn configure_thread_pool() {
    if let Ok(value) = std::env::var("MIXREG_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    configure_thread_pool();
    let scenario = match args.scenario {
        ScenarioArg::One => Scenario::One,
        ScenarioArg::Two => Scenario::Two,
    };
    let case = match args.case {
        CaseArg::I => NoiseCase::I,
        CaseArg::II => NoiseCase::II,
        CaseArg::III => NoiseCase::III,
        CaseArg::IV => NoiseCase::IV,
    };
    let spec = ScenarioSpec {
        scenario,
        case,
        n: args.n,
        n_outliers: args
            .n_outliers
            .unwrap_or_else(|| default_outlier_count(args.n)),
        seed: args.seed,
        outliers: OutlierRecipe {
            leverage_value: args.outlier_x,
            response_value: args.outlier_y,
        },
    };
    let n_outliers = spec.n_outliers;
    let plan = ReplicationPlan {
        scenario: spec,
        replications: args.replications,
        estimators: parse_estimators(&args.estimators, args.gamma)?,
        fit_config: FitConfig {
            tolerance: args.tol,
            max_iterations: args.max_iter,
            n_starts: args.starts,
            seed: args.seed,
            sigma_floor: None,
            record_trace: false,
        },
        initialization: match args.init {
            InitArg::Truth => PlanInitialization::Truth,
            InitArg::Multistart => PlanInitialization::MultiStart,
        },
    };

    let done = AtomicUsize::new(0);
    let total = args.replications;
    let summary = run_plan_with_progress(&plan, |_| {
        let k = done.fetch_add(1, Ordering::Relaxed) + 1;
        eprintln!("replication {k}/{total}");
    })
    .map_err(estimation_error)?;

    let header = format!(
        "# mixreg simulate: scenario={} case={:?} n={} N={} seed={} estimators={} starts={} init={} n_outliers={} outlier_x={} outlier_y={}\n",
        match scenario {
            Scenario::One => "1",
            Scenario::Two => "2",
        },
        case,
        args.n,
        args.replications,
        args.seed,
        args.estimators,
        args.starts,
        match args.init {
            InitArg::Truth => "truth",
            InitArg::Multistart => "multistart",
        },
        n_outliers,
        args.outlier_x,
        args.outlier_y,
    );
    let table = header.clone() + &format_table(&summary);
    let csv = header + &summary_csv(&summary);

    if let Some(prefix) = &args.output {
        let txt_path = prefix.with_extension("txt");
        let csv_path = prefix.with_extension("csv");
        fs::write(&txt_path, &table)
            .map_err(|e| CliError::Input(format!("cannot write {}: {e}", txt_path.display())))?;
        fs::write(&csv_path, &csv)
            .map_err(|e| CliError::Input(format!("cannot write {}: {e}", csv_path.display())))?;
    }
    println!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------
// export-fit

fn cmd_export_fit(args: &ExportFitArgs) -> Result<(), CliError> {
    let bytes = fs::read(&args.report)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", args.report.display())))?;
    let report: FitReport = serde_json::from_slice(&bytes).map_err(|e| {
        CliError::Input(format!(
            "{}: malformed fit report: {e}",
            args.report.display()
        ))
    })?;
    let p = report
        .coefficients
        .first()
        .map(|b| b.len())
        .ok_or_else(|| CliError::Input("report carries no coefficients".into()))?;

    let mut out = String::from("record,index");
    for k in 0..p {
        let _ = write!(out, ",b{k}");
    }
    out.push_str(",map_component,max_posterior\n");
    for (i, beta) in report.coefficients.iter().enumerate() {
        let _ = write!(out, "line,{}", i + 1);
        for b in beta {
            let _ = write!(out, ",{b}");
        }
        out.push_str(",,\n");
    }
    for (j, row) in report.posteriors.iter().enumerate() {
        let (map, max) = row
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        let _ = write!(out, "obs,{}", j + 1);
        for _ in 0..p {
            out.push(',');
        }
        let _ = writeln!(out, ",{},{}", map + 1, max);
    }
    write_output(args.output.as_deref(), &out)
}
