//! The EM-type fitting loop.
//!
//! Each iteration computes Gaussian posteriors for the current parameters,
//! robustifies them with the kernel's residual weight (and, for Schweppe,
//! the leverage rescaling), then updates mixing probabilities, coefficients
//! (a leverage- and posterior-weighted least-squares solve) and scales (a
//! multiplicative M-scale fixed-point step). Leverage weights depend only on
//! the design matrix and are computed once up front.
//!
//! [`fit`] drives several random-partition starts and keeps the one scoring
//! highest under the estimator's own robustified criterion; everything is
//! deterministic given the seed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MixregError, Result};
use crate::model::{EstimatorKind, EstimatorSpec, FitConfig, FitResult, MixtureParams, RegressionData};
use crate::scatter::{fast_mcd, leverage_weights, LeverageWeights};
use crate::seeding;

const LN_SQRT_TWO_PI: f64 = 0.9189385332046727;
/// A component whose posterior mass drops below `EMPTY_COMPONENT_EPS * n`
/// has collapsed.
const EMPTY_COMPONENT_EPS: f64 = 1e-8;
/// Condition-number bound on the weighted design; squares to the 1e12 bound
/// on the weighted Gram matrix.
const MAX_DESIGN_CONDITION: f64 = 1e6;
const INIT_ATTEMPTS: usize = 200;

/// Number of free parameters `(g-1) + g·p + g` entering the ICL penalty.
pub fn free_parameter_count(g: usize, p: usize) -> usize {
    (g - 1) + g * p + g
}

/// Integrated complete likelihood: `-2·ℓ_c + d·log n`. Lower is better.
pub fn icl(complete_loglik: f64, d: usize, n: f64) -> f64 {
    -2.0 * complete_loglik + d as f64 * n.ln()
}

fn log_densities(data: &RegressionData, params: &MixtureParams) -> DMatrix<f64> {
    let n = data.n();
    let g = params.n_components();
    let mut logs = DMatrix::zeros(n, g);
    for i in 0..g {
        let fitted = data.design() * &params.coefficients()[i];
        let s = params.scales()[i];
        let base = params.mixing()[i].ln() - LN_SQRT_TWO_PI - s.ln();
        for j in 0..n {
            let t = (data.response()[j] - fitted[j]) / s;
            logs[(j, i)] = base - 0.5 * t * t;
        }
    }
    logs
}

/// E-step posteriors: one row per observation, rows sum to one. Computed
/// with a per-row max-log shift so extreme standardized residuals cannot
/// underflow the whole row.
pub fn e_step(data: &RegressionData, params: &MixtureParams) -> DMatrix<f64> {
    let mut post = log_densities(data, params);
    let g = params.n_components();
    for j in 0..data.n() {
        let mut max = f64::NEG_INFINITY;
        for i in 0..g {
            max = max.max(post[(j, i)]);
        }
        let mut sum = 0.0;
        for i in 0..g {
            let e = (post[(j, i)] - max).exp();
            post[(j, i)] = e;
            sum += e;
        }
        for i in 0..g {
            post[(j, i)] /= sum;
        }
    }
    post
}

/// Posterior for a single observation; same arithmetic as [`e_step`].
pub fn posterior_row(x_j: &DVector<f64>, y_j: f64, params: &MixtureParams) -> Vec<f64> {
    let g = params.n_components();
    let mut logs = vec![0.0; g];
    for i in 0..g {
        let s = params.scales()[i];
        let t = (y_j - x_j.dot(&params.coefficients()[i])) / s;
        logs[i] = params.mixing()[i].ln() - LN_SQRT_TWO_PI - s.ln() - 0.5 * t * t;
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logs.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logs.iter_mut() {
        *l /= sum;
    }
    logs
}

/// Observed-data Gaussian mixture log-likelihood (the ML objective).
pub fn gaussian_loglik(data: &RegressionData, params: &MixtureParams) -> f64 {
    let logs = log_densities(data, params);
    let g = params.n_components();
    let mut total = 0.0;
    for j in 0..data.n() {
        let mut max = f64::NEG_INFINITY;
        for i in 0..g {
            max = max.max(logs[(j, i)]);
        }
        let mut sum = 0.0;
        for i in 0..g {
            sum += (logs[(j, i)] - max).exp();
        }
        total += max + sum.ln();
    }
    total
}

/// Complete-data log-likelihood in its Gaussian form, evaluated with the
/// soft posteriors in place of the latent indicators.
pub fn complete_loglik(
    data: &RegressionData,
    params: &MixtureParams,
    posteriors: &DMatrix<f64>,
) -> f64 {
    let g = params.n_components();
    let mut total = 0.0;
    for i in 0..g {
        let fitted = data.design() * &params.coefficients()[i];
        let s = params.scales()[i];
        let base = params.mixing()[i].ln() - LN_SQRT_TWO_PI - s.ln();
        for j in 0..data.n() {
            let z = posteriors[(j, i)];
            if z > 0.0 {
                let t = (data.response()[j] - fitted[j]) / s;
                total += z * (base - 0.5 * t * t);
            }
        }
    }
    total
}

/// Robustified complete-data criterion: the quadratic residual term of the
/// Gaussian form is replaced by the estimator's own loss
/// (`ρ(t)` for M, `w·ρ(t)` for Mallows, `w²·ρ(t/w)` for Schweppe). Reduces
/// to [`complete_loglik`] when the loss is quadratic and weights are one.
///
/// Multi-start selection ranks candidate fits by this score: ranking by the
/// plain Gaussian likelihood would hand leverage points the very influence
/// the GM estimating equations remove, because a contaminated solution
/// always Gaussian-dominates a clean one under gross leverage outliers.
pub fn robustified_criterion(
    data: &RegressionData,
    params: &MixtureParams,
    spec: &EstimatorSpec,
    leverage: &[f64],
    posteriors: &DMatrix<f64>,
) -> f64 {
    let g = params.n_components();
    let mut total = 0.0;
    for i in 0..g {
        let fitted = data.design() * &params.coefficients()[i];
        let s = params.scales()[i];
        let base = params.mixing()[i].ln() - LN_SQRT_TWO_PI - s.ln();
        for j in 0..data.n() {
            let z = posteriors[(j, i)];
            if z > 0.0 {
                let t = (data.response()[j] - fitted[j]) / s;
                let loss = match spec.kind {
                    EstimatorKind::M => spec.kernel.rho(t),
                    EstimatorKind::GmMallows => leverage[j] * spec.kernel.rho(t),
                    EstimatorKind::GmSchweppe => {
                        let w = leverage[j];
                        w * w * spec.kernel.rho(t / w)
                    }
                };
                total += z * (base - loss);
            }
        }
    }
    total
}

/// Robustified posteriors `ẑ*`: posteriors multiplied by the kernel residual
/// weight. For Mallows (and plain M) the weight is `psi(t)/t`; for Schweppe
/// the residual is first rescaled by the leverage weight, giving
/// `psi(t/w)/t`, capped at its zero-residual limit `1/w`.
pub fn robustified_posteriors(
    posteriors: &DMatrix<f64>,
    data: &RegressionData,
    params: &MixtureParams,
    spec: &EstimatorSpec,
    leverage: &[f64],
) -> DMatrix<f64> {
    let g = params.n_components();
    let mut zstar = posteriors.clone();
    for i in 0..g {
        let fitted = data.design() * &params.coefficients()[i];
        let s = params.scales()[i];
        for j in 0..data.n() {
            let t = (data.response()[j] - fitted[j]) / s;
            let wstar = match spec.kind {
                EstimatorKind::M | EstimatorKind::GmMallows => spec.kernel.residual_weight(t),
                EstimatorKind::GmSchweppe => {
                    let w = leverage[j];
                    if t == 0.0 {
                        1.0 / w
                    } else {
                        (spec.kernel.psi(t / w) / t).min(1.0 / w)
                    }
                }
            };
            zstar[(j, i)] *= wstar;
        }
    }
    zstar
}

/// Mixing-probability update: column means of the posteriors.
pub fn update_mixing(posteriors: &DMatrix<f64>) -> Vec<f64> {
    let n = posteriors.nrows() as f64;
    (0..posteriors.ncols())
        .map(|i| posteriors.column(i).sum() / n)
        .collect()
}

/// Coefficient update for component `i`: the weighted least-squares solve
/// with weights `ẑ*_ij · w(x_j)`, via SVD of the square-root-weighted design.
pub fn update_coefficients(
    data: &RegressionData,
    zstar: &DMatrix<f64>,
    leverage: &[f64],
    component: usize,
) -> Result<DVector<f64>> {
    let n = data.n();
    let p = data.p();
    let mut wx = DMatrix::zeros(n, p);
    let mut wy = DVector::zeros(n);
    for j in 0..n {
        let u = (zstar[(j, component)] * leverage[j]).max(0.0).sqrt();
        for k in 0..p {
            wx[(j, k)] = u * data.design()[(j, k)];
        }
        wy[j] = u * data.response()[j];
    }
    let svd = wx.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) || smax / smin >= MAX_DESIGN_CONDITION {
        return Err(MixregError::ComponentCollapse {
            component,
            reason: format!(
                "weighted Gram matrix ill-conditioned (design condition {:.3e})",
                smax / smin
            ),
        });
    }
    svd.solve(&wy, 0.0)
        .map(|m| m.column(0).into_owned())
        .map_err(|e| MixregError::ComponentCollapse {
            component,
            reason: format!("least-squares solve failed: {e}"),
        })
}

/// M-scale update for component `i`: the multiplicative fixed-point step on
/// the squared scale, evaluated at the pre-update parameters and floored at
/// `sigma_floor²`. Returns the new squared scale.
///
/// The update solves the stationarity condition of the robustified
/// complete-data criterion in σ. For plain M that is
/// `Σ ẑ·χ(t) = a·Σ ẑ`; for the GM estimators the leverage weight enters the
/// criterion and therefore the condition: Mallows weighs each χ term by
/// `w(x_j)`, Schweppe by `w²(x_j)` with the residual rescaled to `t/w`. At
/// unit weights all three coincide.
pub fn update_scale(
    data: &RegressionData,
    posteriors: &DMatrix<f64>,
    params: &MixtureParams,
    spec: &EstimatorSpec,
    component: usize,
    scale_constant: f64,
    sigma_floor: f64,
    leverage: &[f64],
) -> Result<f64> {
    let n = data.n();
    let mass = posteriors.column(component).sum();
    if mass <= EMPTY_COMPONENT_EPS * n as f64 {
        return Err(MixregError::ComponentCollapse {
            component,
            reason: format!("posterior mass {mass:.3e} below threshold"),
        });
    }
    let fitted = data.design() * &params.coefficients()[component];
    let s = params.scales()[component];
    let kernel = &spec.kernel;
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for j in 0..n {
        let t = (data.response()[j] - fitted[j]) / s;
        let z = posteriors[(j, component)];
        let (chi, weight) = match spec.kind {
            EstimatorKind::M => (kernel.chi(t), 1.0),
            EstimatorKind::GmMallows => (kernel.chi(t), leverage[j]),
            EstimatorKind::GmSchweppe => {
                let w = leverage[j];
                (kernel.chi(t / w), w * w)
            }
        };
        numerator += z * weight * chi;
        denominator += z * weight;
    }
    if denominator <= EMPTY_COMPONENT_EPS * n as f64 {
        return Err(MixregError::ComponentCollapse {
            component,
            reason: format!("weighted posterior mass {denominator:.3e} below threshold"),
        });
    }
    let value = s * s * numerator / (scale_constant * denominator);
    Ok(value.max(sigma_floor * sigma_floor))
}

/// Outcome of a single EM start.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub params: MixtureParams,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<MixtureParams>,
}

/// Run the EM iteration from explicit initial parameters until the Euclidean
/// parameter change drops below the tolerance or the iteration cap is hit.
pub fn em_run(
    data: &RegressionData,
    initial: MixtureParams,
    spec: &EstimatorSpec,
    config: &FitConfig,
    leverage: &[f64],
    scale_constant: f64,
    sigma_floor: f64,
) -> Result<EmRun> {
    let g = initial.n_components();
    let n = data.n();
    let mut params = initial;
    let mut trace = Vec::new();
    if config.record_trace {
        trace.push(params.clone());
    }
    for iteration in 1..=config.max_iterations {
        let post = e_step(data, &params);
        for i in 0..g {
            let mass = post.column(i).sum();
            if mass <= EMPTY_COMPONENT_EPS * n as f64 {
                return Err(MixregError::ComponentCollapse {
                    component: i,
                    reason: format!("posterior mass {mass:.3e} below threshold"),
                });
            }
        }
        let zstar = robustified_posteriors(&post, data, &params, spec, leverage);
        let mixing = update_mixing(&post);
        let mut coefficients = Vec::with_capacity(g);
        for i in 0..g {
            coefficients.push(update_coefficients(data, &zstar, leverage, i)?);
        }
        let mut scales = Vec::with_capacity(g);
        for i in 0..g {
            let s2 = update_scale(data, &post, &params, spec, i, scale_constant, sigma_floor, leverage)?;
            scales.push(s2.sqrt());
        }
        let next = MixtureParams::new(mixing, coefficients, scales)?;
        let delta = next.delta_norm(&params);
        params = next;
        if config.record_trace {
            trace.push(params.clone());
        }
        if delta < config.tolerance {
            return Ok(EmRun {
                params,
                iterations: iteration,
                converged: true,
                trace,
            });
        }
    }
    Ok(EmRun {
        params,
        iterations: config.max_iterations,
        converged: false,
        trace,
    })
}

fn plain_least_squares(design: &DMatrix<f64>, response: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) || smax / smin >= MAX_DESIGN_CONDITION {
        return None;
    }
    svd.solve(response, 0.0).ok().map(|m| m.column(0).into_owned())
}

/// Random-partition initialization: a uniform hard assignment into `g`
/// groups, per-group least squares for the coefficients, group residual
/// standard deviations (floored) for the scales and group proportions for
/// the mixing.
///
/// The group solves are weighted least squares with weight `w(x_j)²`. Plain
/// least squares would let a handful of gross leverage rows pin every
/// group's initial plane onto themselves, starting each GM run inside the
/// basin the estimator is supposed to avoid; the square is what bounds a
/// row's contribution to the initial Gram matrix, since position influence
/// enters the estimating equations as `w·x`. For plain M the weights are one
/// and this is ordinary least squares.
fn draw_initial(
    data: &RegressionData,
    g: usize,
    sigma_floor: f64,
    leverage: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<MixtureParams> {
    let n = data.n();
    let p = data.p();
    'attempt: for _ in 0..INIT_ATTEMPTS {
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..g)).collect();
        let mut counts = vec![0usize; g];
        for &l in &labels {
            counts[l] += 1;
        }
        if counts.iter().any(|&c| c < p + 1) {
            continue;
        }
        let mut mixing = Vec::with_capacity(g);
        let mut coefficients = Vec::with_capacity(g);
        let mut scales = Vec::with_capacity(g);
        for i in 0..g {
            let rows: Vec<usize> = (0..n).filter(|&j| labels[j] == i).collect();
            let design = DMatrix::from_fn(rows.len(), p, |r, c| {
                leverage[rows[r]] * data.design()[(rows[r], c)]
            });
            let response =
                DVector::from_fn(rows.len(), |r, _| leverage[rows[r]] * data.response()[rows[r]]);
            let beta = match plain_least_squares(&design, &response) {
                Some(b) => b,
                None => continue 'attempt,
            };
            let resid = &response - &design * &beta;
            let weight_sum: f64 = rows.iter().map(|&j| leverage[j] * leverage[j]).sum();
            let dof_scale = (rows.len() as f64 - p as f64).max(1.0) / rows.len() as f64;
            let sd = (resid.norm_squared() / (weight_sum * dof_scale)).sqrt();
            mixing.push(counts[i] as f64 / n as f64);
            coefficients.push(beta);
            scales.push(if sd.is_finite() { sd.max(sigma_floor) } else { sigma_floor });
        }
        return MixtureParams::new(mixing, coefficients, scales);
    }
    Err(MixregError::InitializationFailed(format!(
        "no admissible random partition into {g} groups after {INIT_ATTEMPTS} attempts"
    )))
}

/// Fit a g-component mixture regression, computing leverage weights from the
/// predictors when the estimator requires them.
pub fn fit(
    data: &RegressionData,
    g: usize,
    spec: &EstimatorSpec,
    config: &FitConfig,
) -> Result<FitResult> {
    fit_with_leverage(data, g, spec, config, None)
}

fn prepare_leverage(
    data: &RegressionData,
    spec: &EstimatorSpec,
    config: &FitConfig,
    leverage_override: Option<LeverageWeights>,
) -> Result<Option<LeverageWeights>> {
    match spec.kind {
        EstimatorKind::M => Ok(None),
        _ => match leverage_override {
            Some(lv) => {
                if lv.len() != data.n() {
                    return Err(MixregError::InvalidDimensions(format!(
                        "leverage override has {} weights for {} observations",
                        lv.len(),
                        data.n()
                    )));
                }
                Ok(Some(lv))
            }
            None => {
                let predictors = data.predictor_matrix()?;
                let est = fast_mcd(&predictors, seeding::derive(config.seed, seeding::MCD_SALT))?;
                Ok(Some(leverage_weights(&predictors, &est, spec.gamma)?))
            }
        },
    }
}

fn assemble_result(
    data: &RegressionData,
    run: EmRun,
    leverage: Option<LeverageWeights>,
) -> FitResult {
    let g = run.params.n_components();
    let gaussian_ll = gaussian_loglik(data, &run.params);
    let posteriors = e_step(data, &run.params);
    let lc = complete_loglik(data, &run.params, &posteriors);
    let d = free_parameter_count(g, data.p());
    FitResult {
        complete_loglik: lc,
        gaussian_loglik: gaussian_ll,
        icl: icl(lc, d, data.n() as f64),
        iterations: run.iterations,
        converged: run.converged,
        posteriors,
        params: run.params,
        leverage,
        trace: run.trace,
    }
}

/// [`fit`] with an explicit leverage-weight override, used to study the GM
/// estimators at fixed weights. Plain M ignores the override: its weights
/// are identically one by definition.
pub fn fit_with_leverage(
    data: &RegressionData,
    g: usize,
    spec: &EstimatorSpec,
    config: &FitConfig,
    leverage_override: Option<LeverageWeights>,
) -> Result<FitResult> {
    config.validate()?;
    if g == 0 {
        return Err(MixregError::InvalidParameter("g must be at least 1".into()));
    }
    let n = data.n();
    let p = data.p();
    if n < g * (p + 1) {
        return Err(MixregError::InvalidDimensions(format!(
            "need at least g·(p+1) = {} observations for {g} components, got {n}",
            g * (p + 1)
        )));
    }
    let sigma_floor = config
        .sigma_floor
        .unwrap_or(1e-4 * data.response_std())
        .max(1e-12);
    let leverage = prepare_leverage(data, spec, config, leverage_override)?;
    let ones = vec![1.0; n];
    let weights: &[f64] = leverage.as_ref().map(|l| l.as_slice()).unwrap_or(&ones);
    let scale_constant = spec.kernel.scale_constant(n, p)?;

    let mut best: Option<(f64, EmRun)> = None;
    let mut causes = Vec::new();
    for start in 0..config.n_starts {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(seeding::START_STREAM_BASE + start as u64);
        let outcome = draw_initial(data, g, sigma_floor, weights, &mut rng).and_then(|initial| {
            em_run(data, initial, spec, config, weights, scale_constant, sigma_floor)
        });
        match outcome {
            Ok(run) => {
                let post = e_step(data, &run.params);
                let score = robustified_criterion(data, &run.params, spec, weights, &post);
                if best.as_ref().map_or(true, |(b, _)| score > *b) {
                    best = Some((score, run));
                }
            }
            Err(e) => causes.push(format!("start {start}: {e}")),
        }
    }
    let (_, run) = best.ok_or(MixregError::FitFailed { causes })?;
    Ok(assemble_result(data, run, leverage))
}

/// Run a single EM pass from explicit initial parameters (a warm start).
/// Used by the simulation harness to initialize every estimator at the
/// generating truth so that replications compare the estimators themselves
/// rather than multi-start luck.
pub fn fit_from_initial(
    data: &RegressionData,
    initial: MixtureParams,
    spec: &EstimatorSpec,
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    if initial.n_coefficients() != data.p() {
        return Err(MixregError::InvalidDimensions(format!(
            "initial parameters have {} coefficients for a {}-column design",
            initial.n_coefficients(),
            data.p()
        )));
    }
    let sigma_floor = config
        .sigma_floor
        .unwrap_or(1e-4 * data.response_std())
        .max(1e-12);
    let leverage = prepare_leverage(data, spec, config, None)?;
    let ones = vec![1.0; data.n()];
    let weights: &[f64] = leverage.as_ref().map(|l| l.as_slice()).unwrap_or(&ones);
    let scale_constant = spec.kernel.scale_constant(data.n(), data.p())?;
    let run = em_run(data, initial, spec, config, weights, scale_constant, sigma_floor)?;
    Ok(assemble_result(data, run, leverage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{KernelFamily, PsiKernel, HUBER_DEFAULT_TUNING};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand_distr::StandardNormal;

    fn huber_spec(kind: EstimatorKind) -> EstimatorSpec {
        EstimatorSpec {
            kind,
            kernel: PsiKernel::huber(HUBER_DEFAULT_TUNING).unwrap(),
            gamma: 0.05,
        }
    }

    fn line_data(n: usize, beta: &[f64], noise: f64, seed: u64) -> RegressionData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, beta.len() - 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DVector::from_row_slice(beta);
        let mut y = DVector::zeros(n);
        for j in 0..n {
            let mut v = b[0];
            for k in 1..beta.len() {
                v += b[k] * x[(j, k - 1)];
            }
            y[j] = v + noise * rng.sample::<f64, _>(StandardNormal);
        }
        RegressionData::from_predictors(&x, y).unwrap()
    }

    fn two_line_params() -> MixtureParams {
        MixtureParams::new(
            vec![0.5, 0.5],
            vec![
                DVector::from_row_slice(&[0.0, 4.0]),
                DVector::from_row_slice(&[0.0, -4.0]),
            ],
            vec![1.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn e_step_single_component_is_one() {
        let data = line_data(20, &[1.0, 2.0], 0.1, 1);
        let params = MixtureParams::new(
            vec![1.0],
            vec![DVector::from_row_slice(&[1.0, 2.0])],
            vec![0.5],
        )
        .unwrap();
        let post = e_step(&data, &params);
        assert!(post.iter().all(|&z| z == 1.0));
    }

    #[test]
    fn e_step_identical_components_split_evenly() {
        let data = line_data(15, &[0.0, 1.0], 0.5, 2);
        let params = MixtureParams::new(
            vec![0.5, 0.5],
            vec![
                DVector::from_row_slice(&[0.0, 1.0]),
                DVector::from_row_slice(&[0.0, 1.0]),
            ],
            vec![1.0, 1.0],
        )
        .unwrap();
        let post = e_step(&data, &params);
        assert!(post.iter().all(|&z| (z - 0.5).abs() < 1e-15));
    }

    #[test]
    fn e_step_separated_point() {
        // point (x=1, y=4) under lines ±4x: posterior 1/(1 + e^{-32})
        let design = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, -1.0, 1.0, 0.5]);
        let y = DVector::from_row_slice(&[4.0, 4.0, 0.0]);
        let data = RegressionData::new(design, y).unwrap();
        let post = e_step(&data, &two_line_params());
        let expected = 1.0 / (1.0 + (-32.0f64).exp());
        assert_abs_diff_eq!(post[(0, 0)], expected, epsilon = 1e-15);
    }

    #[test]
    fn e_step_rows_normalized_under_random_params() {
        let data = line_data(50, &[0.5, -1.5], 1.0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let w: f64 = rng.gen_range(0.01..0.99);
            let params = MixtureParams::new(
                vec![w, 1.0 - w],
                vec![
                    DVector::from_fn(2, |_, _| rng.gen_range(-5.0..5.0)),
                    DVector::from_fn(2, |_, _| rng.gen_range(-5.0..5.0)),
                ],
                vec![rng.gen_range(0.01..3.0), rng.gen_range(0.01..3.0)],
            )
            .unwrap();
            let post = e_step(&data, &params);
            for j in 0..data.n() {
                let s: f64 = (0..2).map(|i| post[(j, i)]).sum();
                assert!((s - 1.0).abs() <= 1e-10);
                assert!((0..2).all(|i| (0.0..=1.0).contains(&post[(j, i)])));
            }
        }
    }

    #[test]
    fn e_step_survives_extreme_residuals() {
        // |standardized residual| = 300 must not underflow the row
        let design = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DVector::from_row_slice(&[300.0, 0.0, 0.0]);
        let data = RegressionData::new(design, y).unwrap();
        let params = MixtureParams::new(
            vec![0.5, 0.5],
            vec![
                DVector::from_row_slice(&[0.0, 0.0]),
                DVector::from_row_slice(&[300.0, 0.0]),
            ],
            vec![1.0, 1.0],
        )
        .unwrap();
        let post = e_step(&data, &params);
        for j in 0..3 {
            let s: f64 = post[(j, 0)] + post[(j, 1)];
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(post.row(j).iter().all(|z| z.is_finite()));
        }
    }

    #[test]
    fn posterior_row_matches_e_step() {
        let data = line_data(10, &[0.3, 2.0], 0.7, 11);
        let params = two_line_params();
        let post = e_step(&data, &params);
        for j in 0..data.n() {
            let row = posterior_row(&data.row(j), data.response()[j], &params);
            for i in 0..2 {
                assert_eq!(row[i], post[(j, i)]);
            }
        }
    }

    #[test]
    fn robustified_identity_in_linear_region() {
        let data = line_data(30, &[0.0, 4.0], 0.2, 4);
        // params matching the generating line: standardized residuals < c
        let params = MixtureParams::new(
            vec![1.0],
            vec![DVector::from_row_slice(&[0.0, 4.0])],
            vec![1.0],
        )
        .unwrap();
        let post = e_step(&data, &params);
        let spec = huber_spec(EstimatorKind::GmMallows);
        let zstar = robustified_posteriors(&post, &data, &params, &spec, &vec![1.0; 30]);
        assert_eq!(zstar, post);
    }

    #[test]
    fn robustified_downweights_large_residual() {
        // one observation with t = 2 under Huber: 0.8 · 0.6725 = 0.538
        let design = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, -1.0]);
        let y = DVector::from_row_slice(&[2.0, 0.0, 0.0]);
        let data = RegressionData::new(design, y).unwrap();
        let params = MixtureParams::new(
            vec![0.5, 0.5],
            vec![
                DVector::from_row_slice(&[0.0, 0.0]),
                DVector::from_row_slice(&[0.0, 0.0]),
            ],
            vec![1.0, 1.0],
        )
        .unwrap();
        let mut post = e_step(&data, &params);
        post[(0, 0)] = 0.8;
        let spec = huber_spec(EstimatorKind::GmMallows);
        let zstar = robustified_posteriors(&post, &data, &params, &spec, &[1.0, 1.0, 1.0]);
        assert_abs_diff_eq!(zstar[(0, 0)], 0.8 * 0.6725, epsilon = 1e-15);
    }

    #[test]
    fn schweppe_equals_mallows_at_unit_weights() {
        let data = line_data(40, &[1.0, -2.0], 1.5, 5);
        let params = two_line_params();
        let post = e_step(&data, &params);
        let ones = vec![1.0; 40];
        let mallows = robustified_posteriors(&post, &data, &params, &huber_spec(EstimatorKind::GmMallows), &ones);
        let schweppe = robustified_posteriors(&post, &data, &params, &huber_spec(EstimatorKind::GmSchweppe), &ones);
        assert_eq!(mallows, schweppe);
    }

    #[test]
    fn mixing_update_is_column_mean() {
        let post = DMatrix::from_row_slice(3, 2, &[0.2, 0.8, 0.4, 0.6, 0.6, 0.4]);
        let pi = update_mixing(&post);
        assert_abs_diff_eq!(pi[0], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(pi[1], 0.6, epsilon = 1e-15);
        let hard = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(update_mixing(&hard), vec![0.5, 0.5]);
    }

    #[test]
    fn coefficients_interpolate_exact_line() {
        let design = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        let data = RegressionData::new(design, y).unwrap();
        let zstar = DMatrix::from_element(3, 1, 1.0);
        let beta = update_coefficients(&data, &zstar, &[1.0; 3], 0).unwrap();
        assert_abs_diff_eq!(beta[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(beta[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn coefficients_match_normal_equations_oracle() {
        let data = line_data(25, &[0.7, -1.2], 0.8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let zstar = DMatrix::from_fn(25, 1, |_, _| rng.gen_range(0.05..1.0));
        let lev: Vec<f64> = (0..25).map(|_| rng.gen_range(0.2..1.0)).collect();
        let beta = update_coefficients(&data, &zstar, &lev, 0).unwrap();

        // brute-force normal equations with an explicit inverse
        let mut gram = DMatrix::zeros(2, 2);
        let mut rhs = DVector::zeros(2);
        for j in 0..25 {
            let u = zstar[(j, 0)] * lev[j];
            let x = data.row(j);
            gram += u * &x * x.transpose();
            rhs += u * &x * data.response()[j];
        }
        let oracle = gram.try_inverse().unwrap() * rhs;
        assert_relative_eq!(beta[0], oracle[0], max_relative = 1e-8);
        assert_relative_eq!(beta[1], oracle[1], max_relative = 1e-8);
    }

    #[test]
    fn coefficients_detect_collapse() {
        let design = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.0, 2.0, 1.0, 3.0, 1.0, 4.0]);
        let y = DVector::from_row_slice(&[1.0, 2.0, 3.0, 4.0]);
        let data = RegressionData::new(design, y).unwrap();
        // all weight on a single observation: rank-deficient weighted design
        let zstar = DMatrix::from_fn(4, 1, |r, _| if r == 0 { 1.0 } else { 0.0 });
        assert!(matches!(
            update_coefficients(&data, &zstar, &[1.0; 4], 0),
            Err(MixregError::ComponentCollapse { component: 0, .. })
        ));
    }

    #[test]
    fn scale_update_fixed_point() {
        // residuals with chi(t) = a exactly leave the scale unchanged
        let kernel = PsiKernel::huber(HUBER_DEFAULT_TUNING).unwrap();
        let n = 12;
        let a = kernel.scale_constant(n, 2).unwrap();
        let t_star = (2.0 * a).sqrt();
        assert!(t_star < kernel.tuning());
        let sigma = 1.7;
        let design = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { r as f64 });
        let beta = DVector::from_row_slice(&[0.5, 2.0]);
        let y = DVector::from_fn(n, |j, _| {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            design.row(j).transpose().dot(&beta) + sigma * t_star * sign
        });
        let data = RegressionData::new(design, y).unwrap();
        let params = MixtureParams::new(vec![1.0], vec![beta], vec![sigma]).unwrap();
        let post = DMatrix::from_element(n, 1, 1.0);
        let s2 = update_scale(&data, &post, &params, &EstimatorSpec::m(kernel), 0, a, 1e-8, &vec![1.0; n]).unwrap();
        assert_relative_eq!(s2, sigma * sigma, max_relative = 1e-12);
    }

    #[test]
    fn scale_update_clamps_at_floor() {
        let kernel = PsiKernel::huber(HUBER_DEFAULT_TUNING).unwrap();
        let design = DMatrix::from_fn(6, 2, |r, c| if c == 0 { 1.0 } else { r as f64 });
        let beta = DVector::from_row_slice(&[1.0, 3.0]);
        let y = DVector::from_fn(6, |j, _| design.row(j).transpose().dot(&beta));
        let data = RegressionData::new(design, y).unwrap();
        let params = MixtureParams::new(vec![1.0], vec![beta], vec![1.0]).unwrap();
        let post = DMatrix::from_element(6, 1, 1.0);
        let a = kernel.scale_constant(6, 2).unwrap();
        let floor = 1e-3;
        let s2 = update_scale(&data, &post, &params, &EstimatorSpec::m(kernel), 0, a, floor, &[1.0; 6]).unwrap();
        assert_eq!(s2, floor * floor);
    }

    #[test]
    fn scale_update_rejects_empty_component() {
        let data = line_data(10, &[0.0, 1.0], 0.5, 9);
        let params = MixtureParams::new(
            vec![0.5, 0.5],
            vec![
                DVector::from_row_slice(&[0.0, 1.0]),
                DVector::from_row_slice(&[0.0, 1.0]),
            ],
            vec![1.0, 1.0],
        )
        .unwrap();
        let kernel = params_kernel();
        let a = kernel.scale_constant(10, 2).unwrap();
        let post = DMatrix::from_fn(10, 2, |_, c| if c == 0 { 1.0 } else { 0.0 });
        assert!(matches!(
            update_scale(&data, &post, &params, &EstimatorSpec::m(kernel), 1, a, 1e-8, &[1.0; 10]),
            Err(MixregError::ComponentCollapse { component: 1, .. })
        ));
    }

    fn params_kernel() -> PsiKernel {
        PsiKernel::new(KernelFamily::Huber, HUBER_DEFAULT_TUNING).unwrap()
    }

    #[test]
    fn scale_update_monte_carlo_consistency() {
        // iterating the update with unit posteriors recovers the residual
        // scale of N(0, 4) noise within 2%
        let kernel = params_kernel();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let design = DMatrix::from_fn(n, 2, |_, c| {
            if c == 0 {
                1.0
            } else {
                rng.sample::<f64, _>(StandardNormal)
            }
        });
        let beta = DVector::from_row_slice(&[1.0, -2.0]);
        let y = DVector::from_fn(n, |j, _| {
            design.row(j).transpose().dot(&beta) + 2.0 * rng.sample::<f64, _>(StandardNormal)
        });
        let data = RegressionData::new(design, y).unwrap();
        let post = DMatrix::from_element(n, 1, 1.0);
        let a = kernel.scale_constant(n, 2).unwrap();
        let ones = vec![1.0; n];
        let mut sigma = 1.0f64;
        for _ in 0..200 {
            let params =
                MixtureParams::new(vec![1.0], vec![beta.clone()], vec![sigma]).unwrap();
            let next = update_scale(&data, &post, &params, &EstimatorSpec::m(kernel), 0, a, 1e-8, &ones)
                .unwrap()
                .sqrt();
            if (next - sigma).abs() < 1e-10 {
                sigma = next;
                break;
            }
            sigma = next;
        }
        assert_relative_eq!(sigma, 2.0, max_relative = 0.02);
    }

    #[test]
    fn scale_update_multiplier_is_unbiased_at_truth() {
        // at the true scale with unit posteriors and standard-normal
        // residuals the expected multiplier is one (3-sigma Monte Carlo band)
        let kernel = params_kernel();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let design = DMatrix::from_fn(n, 2, |_, c| {
            if c == 0 {
                1.0
            } else {
                rng.sample::<f64, _>(StandardNormal)
            }
        });
        let beta = DVector::from_row_slice(&[0.3, 1.2]);
        let mut chi_sd_acc = 0.0;
        let y = DVector::from_fn(n, |j, _| {
            let e: f64 = rng.sample(StandardNormal);
            chi_sd_acc += kernel.chi(e) * kernel.chi(e);
            design.row(j).transpose().dot(&beta) + e
        });
        let data = RegressionData::new(design, y).unwrap();
        let post = DMatrix::from_element(n, 1, 1.0);
        let a = kernel.scale_constant(n, 2).unwrap();
        let params = MixtureParams::new(vec![1.0], vec![beta], vec![1.0]).unwrap();
        let s2 = update_scale(&data, &post, &params, &EstimatorSpec::m(kernel), 0, a, 1e-8, &vec![1.0; n])
            .unwrap();
        let multiplier = s2 / 1.0;
        let e_chi = kernel.expected_chi_normal();
        let chi_sd = (chi_sd_acc / n as f64 - e_chi * e_chi).sqrt();
        let band = 3.0 * chi_sd / (a * (n as f64).sqrt());
        assert!(
            (multiplier - 1.0).abs() <= band,
            "multiplier {multiplier} outside 1 +/- {band}"
        );
    }

    #[test]
    fn fit_single_component_wide_huber_matches_ols() {
        let data = line_data(60, &[2.0, 3.0], 0.05, 12);
        let spec = EstimatorSpec::m(PsiKernel::huber(1e6).unwrap());
        let config = FitConfig {
            n_starts: 3,
            seed: 9,
            ..FitConfig::default()
        };
        let result = fit(&data, 1, &spec, &config).unwrap();
        let ols = plain_least_squares(data.design(), data.response()).unwrap();
        assert_relative_eq!(result.params.coefficients()[0][0], ols[0], max_relative = 1e-6);
        assert_relative_eq!(result.params.coefficients()[0][1], ols[1], max_relative = 1e-6);
        assert!(result.converged);
        assert!(result.leverage.is_none());
    }

    #[test]
    fn fit_two_components_recovers_crossing_lines() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 200;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |j, _| {
            let slope = if rng.gen::<f64>() < 0.5 { 4.0 } else { -4.0 };
            slope * x[(j, 0)] + rng.sample::<f64, _>(StandardNormal)
        });
        let data = RegressionData::from_predictors(&x, y).unwrap();
        let spec = huber_spec(EstimatorKind::M);
        let config = FitConfig {
            n_starts: 5,
            seed: 3,
            ..FitConfig::default()
        };
        let result = fit(&data, 2, &spec, &config).unwrap();
        let mut slopes: Vec<f64> = result
            .params
            .coefficients()
            .iter()
            .map(|b| b[1])
            .collect();
        slopes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_abs_diff_eq!(slopes[0], -4.0, epsilon = 0.4);
        assert_abs_diff_eq!(slopes[1], 4.0, epsilon = 0.4);
    }

    #[test]
    fn fit_is_deterministic() {
        let data = line_data(80, &[0.0, 4.0], 1.0, 33);
        let spec = huber_spec(EstimatorKind::GmMallows);
        let config = FitConfig {
            n_starts: 4,
            seed: 17,
            ..FitConfig::default()
        };
        let a = fit(&data, 2, &spec, &config).unwrap();
        let b = fit(&data, 2, &spec, &config).unwrap();
        assert_eq!(a.params.flatten(), b.params.flatten());
        assert_eq!(a.posteriors, b.posteriors);
        assert_eq!(a.gaussian_loglik, b.gaussian_loglik);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn leverage_depends_only_on_design() {
        let data = line_data(50, &[1.0, 2.0], 1.0, 14);
        let spec = huber_spec(EstimatorKind::GmMallows);
        let config = FitConfig {
            n_starts: 2,
            seed: 5,
            ..FitConfig::default()
        };
        let r1 = fit(&data, 1, &spec, &config).unwrap();
        // change the response, keep the design
        let shifted = RegressionData::new(data.design().clone(), data.response() * 3.0 + DVector::from_element(50, 1.0)).unwrap();
        let r2 = fit(&shifted, 1, &spec, &config).unwrap();
        assert_eq!(
            r1.leverage.as_ref().unwrap().as_slice(),
            r2.leverage.as_ref().unwrap().as_slice()
        );
    }

    #[test]
    fn mallows_with_unit_override_matches_m_trajectories() {
        let data = line_data(60, &[0.5, -3.0], 1.0, 15);
        let config = FitConfig {
            n_starts: 2,
            seed: 23,
            record_trace: true,
            ..FitConfig::default()
        };
        let m = fit(&data, 2, &huber_spec(EstimatorKind::M), &config).unwrap();
        let gm = fit_with_leverage(
            &data,
            2,
            &huber_spec(EstimatorKind::GmMallows),
            &config,
            Some(LeverageWeights::unit(60)),
        )
        .unwrap();
        assert_eq!(m.trace.len(), gm.trace.len());
        for (a, b) in m.trace.iter().zip(gm.trace.iter()) {
            assert_eq!(a.flatten(), b.flatten());
        }
    }

    #[test]
    fn em_run_is_label_equivariant() {
        let data = line_data(70, &[0.0, 2.5], 1.0, 44);
        let spec = huber_spec(EstimatorKind::M);
        let config = FitConfig::default();
        let init = MixtureParams::new(
            vec![0.4, 0.6],
            vec![
                DVector::from_row_slice(&[0.2, 3.0]),
                DVector::from_row_slice(&[-0.1, 1.0]),
            ],
            vec![1.0, 1.4],
        )
        .unwrap();
        let a = kernel_a(&data);
        let straight = em_run(&data, init.clone(), &spec, &config, &vec![1.0; 70], a, 1e-8).unwrap();
        let swapped = em_run(&data, init.permuted(&[1, 0]), &spec, &config, &vec![1.0; 70], a, 1e-8).unwrap();
        assert_eq!(straight.params.permuted(&[1, 0]).flatten(), swapped.params.flatten());
        assert_eq!(straight.iterations, swapped.iterations);
    }

    fn kernel_a(data: &RegressionData) -> f64 {
        params_kernel().scale_constant(data.n(), data.p()).unwrap()
    }

    #[test]
    fn complete_loglik_reduces_to_gaussian_for_single_component() {
        let data = line_data(25, &[1.0, 1.0], 0.3, 16);
        let beta = DVector::from_row_slice(&[1.0, 1.0]);
        let params = MixtureParams::new(vec![1.0], vec![beta.clone()], vec![0.3]).unwrap();
        let post = DMatrix::from_element(25, 1, 1.0);
        let lc = complete_loglik(&data, &params, &post);
        let mut direct = 0.0;
        for j in 0..25 {
            let r = data.response()[j] - data.row(j).dot(&beta);
            direct += -LN_SQRT_TWO_PI - 0.3f64.ln() - r * r / (2.0 * 0.09);
        }
        assert_relative_eq!(lc, direct, max_relative = 1e-12);
    }

    #[test]
    fn complete_loglik_scale_doubling_identity() {
        let data = line_data(30, &[0.0, 2.0], 0.6, 18);
        let params = two_line_params();
        let post = e_step(&data, &params);
        let lc1 = complete_loglik(&data, &params, &post);
        let doubled = MixtureParams::new(
            params.mixing().to_vec(),
            params.coefficients().to_vec(),
            params.scales().iter().map(|s| 2.0 * s).collect(),
        )
        .unwrap();
        let lc2 = complete_loglik(&data, &doubled, &post);
        // halving 1/sigma: -n log 2 on the normalizer, residual terms shrink 4x
        let mut residual_sum = 0.0;
        for i in 0..2 {
            let fitted = data.design() * &params.coefficients()[i];
            for j in 0..30 {
                let t = (data.response()[j] - fitted[j]) / params.scales()[i];
                residual_sum += post[(j, i)] * 0.5 * t * t;
            }
        }
        let expected = lc1 - 30.0 * 2.0f64.ln() + 0.75 * residual_sum;
        assert_relative_eq!(lc2, expected, max_relative = 1e-10);
    }

    #[test]
    fn icl_arithmetic() {
        assert_abs_diff_eq!(icl(499.66117, 7, 88.0), -967.98099, epsilon = 1e-3);
        assert_abs_diff_eq!(icl(772.99552, 7, 88.0), -1514.64969, epsilon = 1e-3);
        assert_abs_diff_eq!(icl(0.0, 1, std::f64::consts::E), 1.0, epsilon = 1e-15);
        assert_eq!(free_parameter_count(2, 2), 7);
    }

    #[test]
    fn fit_from_initial_warm_start_matches_em_fixed_point() {
        let data = line_data(80, &[0.0, 4.0], 1.0, 51);
        let spec = huber_spec(EstimatorKind::GmMallows);
        let config = FitConfig {
            seed: 2,
            ..FitConfig::default()
        };
        let initial = MixtureParams::new(
            vec![0.5, 0.5],
            vec![
                DVector::from_row_slice(&[0.0, 3.0]),
                DVector::from_row_slice(&[0.0, -3.0]),
            ],
            vec![1.2, 1.2],
        )
        .unwrap();
        let warm = fit_from_initial(&data, initial.clone(), &spec, &config).unwrap();
        assert!(warm.converged);
        assert!(warm.leverage.is_some());
        // restarting at the fixed point stays there
        let again = fit_from_initial(&data, warm.params.clone(), &spec, &config).unwrap();
        assert_eq!(again.iterations, 1);
        assert!(warm.params.delta_norm(&again.params) < 1e-5);
        // dimension mismatch is rejected
        let skinny = MixtureParams::new(
            vec![1.0],
            vec![DVector::from_row_slice(&[0.0])],
            vec![1.0],
        )
        .unwrap();
        assert!(matches!(
            fit_from_initial(&data, skinny, &spec, &config),
            Err(MixregError::InvalidDimensions(_))
        ));
    }

    #[test]
    fn fit_rejects_undersized_problems() {
        let data = line_data(5, &[0.0, 1.0], 0.1, 19);
        let spec = huber_spec(EstimatorKind::M);
        assert!(matches!(
            fit(&data, 2, &spec, &FitConfig::default()),
            Err(MixregError::InvalidDimensions(_))
        ));
    }
}
