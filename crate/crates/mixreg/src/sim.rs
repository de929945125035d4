//! Seeded Monte Carlo harness: benchmark scenario generators, label
//! alignment, replicated fitting and bias/MSE aggregation.
//!
//! Scenario one draws a single standard-normal predictor and mixes the lines
//! `±4x` with equal probability; scenario two draws two predictors and mixes
//! `±(x₁ + x₂)` with mixing probability 0.25 on the first component. Error
//! regimes: standard normal, Student t, a 5% variance-25 contaminated
//! normal, and standard normal with high-leverage rows substituted in. Each
//! replication reads its own counter-based RNG substreams, so generated data
//! never depends on which estimators run against it.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit, fit_from_initial};
use crate::error::{MixregError, Result};
use crate::model::{EstimatorSpec, FitConfig, MixtureParams, RegressionData};
use crate::seeding;

/// Benchmark design family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// One predictor, lines `±4x`, equal mixing.
    One,
    /// Two predictors, planes `±(x₁ + x₂)`, mixing 0.25/0.75.
    Two,
}

/// Error-term regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseCase {
    /// Standard normal errors.
    I,
    /// Student t errors (4 df for scenario one, 3 for scenario two).
    II,
    /// Contaminated normal `0.95·N(0,1) + 0.05·N(0,25)`.
    III,
    /// Standard normal errors plus substituted leverage rows.
    IV,
}

/// How case-IV leverage rows are constructed: every predictor coordinate is
/// set to `leverage_value` and the response to `response_value`. There is no
/// single canonical recipe for leverage contamination, so both knobs are
/// configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierRecipe {
    pub leverage_value: f64,
    pub response_value: f64,
}

impl Default for OutlierRecipe {
    fn default() -> Self {
        Self {
            leverage_value: 20.0,
            response_value: 0.0,
        }
    }
}

/// One simulation design point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub case: NoiseCase,
    pub n: usize,
    /// Number of substituted leverage rows (case IV only).
    pub n_outliers: usize,
    pub seed: u64,
    pub outliers: OutlierRecipe,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, case: NoiseCase, n: usize, seed: u64) -> Self {
        Self {
            scenario,
            case,
            n,
            n_outliers: default_outlier_count(n),
            seed,
            outliers: OutlierRecipe::default(),
        }
    }
}

/// Default leverage-row count: 5 per 200 observations.
pub fn default_outlier_count(n: usize) -> usize {
    (n / 40).max(1)
}

/// True generating parameters of a scenario.
pub fn true_params(scenario: Scenario) -> MixtureParams {
    match scenario {
        Scenario::One => MixtureParams::new(
            vec![0.5, 0.5],
            vec![
                DVector::from_row_slice(&[0.0, 4.0]),
                DVector::from_row_slice(&[0.0, -4.0]),
            ],
            vec![1.0, 1.0],
        )
        .unwrap(),
        Scenario::Two => MixtureParams::new(
            vec![0.25, 0.75],
            vec![
                DVector::from_row_slice(&[0.0, 1.0, 1.0]),
                DVector::from_row_slice(&[0.0, -1.0, -1.0]),
            ],
            vec![1.0, 1.0],
        )
        .unwrap(),
    }
}

const STREAM_PREDICTORS: u64 = 0;
const STREAM_LABELS: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAMS_PER_REPLICATION: u64 = 4;

fn substream(seed: u64, replication: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication as u64 * STREAMS_PER_REPLICATION + purpose);
    rng
}

/// Generate one replication: data plus true component labels. Deterministic
/// and bit-identical given `(spec.seed, replication_index)`.
pub fn generate(spec: &ScenarioSpec, replication_index: usize) -> (RegressionData, Vec<usize>) {
    let truth = true_params(spec.scenario);
    let p_x = truth.n_coefficients() - 1;
    let n = spec.n;

    let mut rng_x = substream(spec.seed, replication_index, STREAM_PREDICTORS);
    let mut predictors = DMatrix::zeros(n, p_x);
    for j in 0..n {
        for k in 0..p_x {
            predictors[(j, k)] = rng_x.sample(rand_distr::StandardNormal);
        }
    }

    let mut rng_z = substream(spec.seed, replication_index, STREAM_LABELS);
    let pi1 = truth.mixing()[0];
    let labels: Vec<usize> = (0..n)
        .map(|_| if rng_z.gen::<f64>() < pi1 { 0 } else { 1 })
        .collect();

    let mut rng_e = substream(spec.seed, replication_index, STREAM_NOISE);
    let student_df = match spec.scenario {
        Scenario::One => 4.0,
        Scenario::Two => 3.0,
    };
    let noise: Vec<f64> = (0..n)
        .map(|_| match spec.case {
            NoiseCase::I | NoiseCase::IV => rng_e.sample(rand_distr::StandardNormal),
            NoiseCase::II => rng_e.sample(rand_distr::StudentT::new(student_df).unwrap()),
            NoiseCase::III => {
                let contaminated = rng_e.gen::<f64>() < 0.05;
                let draw: f64 = rng_e.sample(rand_distr::StandardNormal);
                if contaminated {
                    5.0 * draw
                } else {
                    draw
                }
            }
        })
        .collect();

    let mut response = DVector::zeros(n);
    for j in 0..n {
        let beta = &truth.coefficients()[labels[j]];
        let mut v = beta[0];
        for k in 0..p_x {
            v += beta[k + 1] * predictors[(j, k)];
        }
        response[j] = v + noise[j];
    }

    if spec.case == NoiseCase::IV {
        let m = spec.n_outliers.min(n);
        for j in (n - m)..n {
            for k in 0..p_x {
                predictors[(j, k)] = spec.outliers.leverage_value;
            }
            response[j] = spec.outliers.response_value;
        }
    }

    let data = RegressionData::from_predictors(&predictors, response)
        .expect("generated data is well-formed");
    (data, labels)
}

/// Resolve label switching: permute the estimated components to minimize the
/// summed squared coefficient distance to the truth. Ties pick the first
/// permutation in lexicographic order.
pub fn align_labels(estimated: &MixtureParams, truth: &MixtureParams) -> MixtureParams {
    use itertools::Itertools;
    let g = truth.n_components();
    assert_eq!(estimated.n_components(), g, "component counts must match");
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..g).permutations(g) {
        let cost: f64 = (0..g)
            .map(|i| (&estimated.coefficients()[perm[i]] - &truth.coefficients()[i]).norm_squared())
            .sum();
        if best.as_ref().map_or(true, |(c, _)| cost < *c) {
            best = Some((cost, perm));
        }
    }
    estimated.permuted(&best.expect("g >= 1").1)
}

/// How each replication's EM is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanInitialization {
    /// Single EM run started at the generating parameters. Replications then
    /// compare the estimating equations themselves instead of multi-start
    /// luck; random multi-start cannot reach the small-component optimum on
    /// the two-predictor design once leverage rows stabilize the pooled
    /// solution.
    Truth,
    /// The regular multi-start fit used for real data.
    MultiStart,
}

/// Replicated fitting plan: design point, estimators (with display names)
/// and the shared fit configuration.
#[derive(Debug, Clone)]
pub struct ReplicationPlan {
    pub scenario: ScenarioSpec,
    pub replications: usize,
    pub estimators: Vec<(String, EstimatorSpec)>,
    pub fit_config: FitConfig,
    pub initialization: PlanInitialization,
}

/// One aggregated cell of the bias/MSE table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CellStat {
    pub mse: f64,
    pub bias: f64,
}

/// Tracked parameter: display name plus its true value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterInfo {
    pub name: String,
    pub true_value: f64,
}

/// Aggregated simulation output: `cells[e][p]` is the (MSE, bias) of
/// parameter `p` under estimator `e`, failures excluded and counted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub parameters: Vec<ParameterInfo>,
    pub estimators: Vec<String>,
    pub cells: Vec<Vec<CellStat>>,
    pub n_failed: Vec<usize>,
    pub replications: usize,
}

impl ReplicationSummary {
    pub fn cell(&self, estimator: &str, parameter: &str) -> Option<CellStat> {
        let e = self.estimators.iter().position(|n| n == estimator)?;
        let p = self.parameters.iter().position(|p| p.name == parameter)?;
        Some(self.cells[e][p])
    }
}

/// Tracked parameters in report order: intercepts, then each
/// successive coefficient, component-major inside each block, then the free
/// mixing probabilities.
pub fn parameter_infos(truth: &MixtureParams) -> Vec<ParameterInfo> {
    let g = truth.n_components();
    let p = truth.n_coefficients();
    let mut out = Vec::new();
    for k in 0..p {
        for i in 0..g {
            out.push(ParameterInfo {
                name: format!("beta{}{}", i + 1, k),
                true_value: truth.coefficients()[i][k],
            });
        }
    }
    for i in 0..(g - 1) {
        out.push(ParameterInfo {
            name: format!("pi{}", i + 1),
            true_value: truth.mixing()[i],
        });
    }
    out
}

fn extract(aligned: &MixtureParams) -> Vec<f64> {
    let g = aligned.n_components();
    let p = aligned.n_coefficients();
    let mut out = Vec::new();
    for k in 0..p {
        for i in 0..g {
            out.push(aligned.coefficients()[i][k]);
        }
    }
    for i in 0..(g - 1) {
        out.push(aligned.mixing()[i]);
    }
    out
}

/// Aggregate per-replication estimate vectors into bias/MSE cells; `None`
/// entries are failed fits, excluded from the averages.
pub(crate) fn aggregate(
    outcomes: &[Vec<Option<Vec<f64>>>],
    parameters: &[ParameterInfo],
    estimators: &[String],
) -> Result<ReplicationSummary> {
    let n_est = estimators.len();
    let mut cells = vec![
        vec![
            CellStat {
                mse: 0.0,
                bias: 0.0
            };
            parameters.len()
        ];
        n_est
    ];
    let mut n_failed = vec![0usize; n_est];
    for (e, name) in estimators.iter().enumerate() {
        let successes: Vec<&Vec<f64>> = outcomes
            .iter()
            .filter_map(|per_rep| per_rep[e].as_ref())
            .collect();
        n_failed[e] = outcomes.len() - successes.len();
        if successes.is_empty() {
            return Err(MixregError::PlanFailed {
                estimator: name.clone(),
                reason: format!("all {} replications failed", outcomes.len()),
            });
        }
        let m = successes.len() as f64;
        for (p, info) in parameters.iter().enumerate() {
            let mut mean = 0.0;
            let mut mse = 0.0;
            for est in &successes {
                mean += est[p];
                mse += (est[p] - info.true_value) * (est[p] - info.true_value);
            }
            cells[e][p] = CellStat {
                mse: mse / m,
                bias: mean / m - info.true_value,
            };
        }
    }
    Ok(ReplicationSummary {
        parameters: parameters.to_vec(),
        estimators: estimators.to_vec(),
        cells,
        n_failed,
        replications: outcomes.len(),
    })
}

/// Run the plan: generate each replication once, fit every estimator on it,
/// align labels against the truth, and aggregate bias/MSE. Replications run
/// concurrently; aggregation order is fixed by replication index, so the
/// summary is deterministic regardless of thread count.
pub fn run_plan(plan: &ReplicationPlan) -> Result<ReplicationSummary> {
    run_plan_with_progress(plan, |_| {})
}

/// [`run_plan`] with a callback invoked after each completed replication
/// (from worker threads; counts arrive out of order).
pub fn run_plan_with_progress(
    plan: &ReplicationPlan,
    progress: impl Fn(usize) + Sync,
) -> Result<ReplicationSummary> {
    if plan.replications == 0 || plan.estimators.is_empty() {
        return Err(MixregError::InvalidParameter(
            "plan needs at least one replication and one estimator".into(),
        ));
    }
    let truth = true_params(plan.scenario.scenario);
    let g = truth.n_components();
    let parameters = parameter_infos(&truth);
    let estimator_names: Vec<String> = plan.estimators.iter().map(|(n, _)| n.clone()).collect();

    let outcomes: Vec<Vec<Option<Vec<f64>>>> = (0..plan.replications)
        .into_par_iter()
        .map(|r| {
            let (data, _labels) = generate(&plan.scenario, r);
            let row: Vec<Option<Vec<f64>>> = plan
                .estimators
                .iter()
                .enumerate()
                .map(|(e, (_, spec))| {
                    let mut config = plan.fit_config.clone();
                    config.seed = seeding::derive_fit_seed(plan.fit_config.seed, r, e);
                    let result = match plan.initialization {
                        PlanInitialization::Truth => {
                            fit_from_initial(&data, truth.clone(), spec, &config)
                        }
                        PlanInitialization::MultiStart => fit(&data, g, spec, &config),
                    };
                    result
                        .ok()
                        .map(|res| extract(&align_labels(&res.params, &truth)))
                })
                .collect();
            progress(r);
            row
        })
        .collect();

    aggregate(&outcomes, &parameters, &estimator_names)
}

/// Human-readable table: one row per parameter, one column per estimator,
/// cells formatted as `MSE (bias)` with four decimals.
pub fn format_table(summary: &ReplicationSummary) -> String {
    let mut label_width = "Parameter".len();
    let row_labels: Vec<String> = summary
        .parameters
        .iter()
        .map(|p| format!("{}: {}", p.name, p.true_value))
        .collect();
    for l in &row_labels {
        label_width = label_width.max(l.len());
    }
    let col_width = summary
        .estimators
        .iter()
        .map(|e| e.len())
        .max()
        .unwrap_or(0)
        .max("0.0000 (-0.0000)".len());

    let mut out = String::new();
    out.push_str(&format!("{:<label_width$}", "Parameter"));
    for e in &summary.estimators {
        out.push_str(&format!("  {e:>col_width$}"));
    }
    out.push('\n');
    for (p, label) in row_labels.iter().enumerate() {
        out.push_str(&format!("{label:<label_width$}"));
        for e in 0..summary.estimators.len() {
            let cell = summary.cells[e][p];
            let text = format!("{:.4} ({:.4})", cell.mse, cell.bias);
            out.push_str(&format!("  {text:>col_width$}"));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:<label_width$}", "failed fits"));
    for e in 0..summary.estimators.len() {
        out.push_str(&format!(
            "  {:>col_width$}",
            format!("{}/{}", summary.n_failed[e], summary.replications)
        ));
    }
    out.push('\n');
    out
}

/// Machine-readable CSV of the summary, full precision.
pub fn summary_csv(summary: &ReplicationSummary) -> String {
    let mut out = String::from("estimator,parameter,true_value,mse,bias,n_failed,replications\n");
    for (e, name) in summary.estimators.iter().enumerate() {
        for (p, info) in summary.parameters.iter().enumerate() {
            let cell = summary.cells[e][p];
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                name,
                info.name,
                info.true_value,
                cell.mse,
                cell.bias,
                summary.n_failed[e],
                summary.replications
            ));
        }
    }
    out
}
