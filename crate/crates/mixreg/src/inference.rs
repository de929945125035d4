//! Sandwich asymptotic covariance `V = M⁻¹QM⁻¹` and standard errors for the
//! coefficients and mixing probabilities, with the scales held fixed at
//! their fitted values.
//!
//! The per-observation estimating function stacks one `ẑ_ij·x_j·η_i` block
//! per component followed by the `ẑ_ij − π_i` mixing block for the first
//! `g−1` components; the parameter vector for differentiation uses the same
//! reduced coordinates (the last mixing probability is determined). `M` is
//! the averaged Jacobian obtained by central finite differences, `Q` the
//! averaged outer product.

use nalgebra::{DMatrix, DVector};

use crate::em::posterior_row;
use crate::error::{MixregError, Result};
use crate::model::{EstimatorKind, EstimatorSpec, FitResult, MixtureParams, RegressionData};

const MAX_JACOBIAN_CONDITION: f64 = 1e12;

/// Sandwich covariance pieces and the resulting standard errors.
///
/// Coordinate layout: `p` coefficients of component 1, ..., `p` coefficients
/// of component g, then the first `g−1` mixing probabilities.
#[derive(Debug, Clone)]
pub struct CovarianceReport {
    pub m_hat: DMatrix<f64>,
    pub q_hat: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// `sqrt(diag(V)/n)` in the layout above.
    pub standard_errors: Vec<f64>,
}

/// Number of estimating-equation coordinates: `g·p + (g−1)`.
pub fn estimating_dimension(g: usize, p: usize) -> usize {
    g * p + g - 1
}

fn eta(spec: &EstimatorSpec, t: f64, leverage_weight: f64) -> f64 {
    match spec.kind {
        EstimatorKind::M => spec.kernel.psi(t),
        EstimatorKind::GmMallows => leverage_weight * spec.kernel.psi(t),
        EstimatorKind::GmSchweppe => leverage_weight * spec.kernel.psi(t / leverage_weight),
    }
}

/// The estimating function `H(t_j, Θ)` at one observation `t_j = (x_j', y_j)`.
pub fn estimating_function(
    x_j: &DVector<f64>,
    y_j: f64,
    params: &MixtureParams,
    spec: &EstimatorSpec,
    leverage_weight_j: f64,
) -> DVector<f64> {
    let g = params.n_components();
    let p = params.n_coefficients();
    let z = posterior_row(x_j, y_j, params);
    let mut h = DVector::zeros(estimating_dimension(g, p));
    for i in 0..g {
        let t = (y_j - x_j.dot(&params.coefficients()[i])) / params.scales()[i];
        let e = eta(spec, t, leverage_weight_j);
        for k in 0..p {
            h[i * p + k] = z[i] * x_j[k] * e;
        }
    }
    for i in 0..(g - 1) {
        h[g * p + i] = z[i] - params.mixing()[i];
    }
    h
}

/// Average of the estimating function over the sample; zero (up to the EM
/// tolerance) at a converged fit.
pub fn mean_estimating_function(
    data: &RegressionData,
    params: &MixtureParams,
    spec: &EstimatorSpec,
    leverage: &[f64],
) -> DVector<f64> {
    let g = params.n_components();
    let p = params.n_coefficients();
    let mut sum = DVector::zeros(estimating_dimension(g, p));
    for j in 0..data.n() {
        sum += estimating_function(&data.row(j), data.response()[j], params, spec, leverage[j]);
    }
    sum / data.n() as f64
}

/// Reduced parameter coordinates `(β_1, ..., β_g, π_1, ..., π_{g−1})`.
fn theta_of(params: &MixtureParams) -> Vec<f64> {
    let g = params.n_components();
    let p = params.n_coefficients();
    let mut theta = Vec::with_capacity(estimating_dimension(g, p));
    for b in params.coefficients() {
        theta.extend(b.iter());
    }
    theta.extend_from_slice(&params.mixing()[..g - 1]);
    theta
}

/// Rebuild full parameters from reduced coordinates; the scales stay at the
/// fitted values and the last mixing probability absorbs the remainder.
fn params_of(theta: &[f64], fitted: &MixtureParams) -> MixtureParams {
    let g = fitted.n_components();
    let p = fitted.n_coefficients();
    let coefficients: Vec<DVector<f64>> = (0..g)
        .map(|i| DVector::from_row_slice(&theta[i * p..(i + 1) * p]))
        .collect();
    let mut mixing: Vec<f64> = theta[g * p..].to_vec();
    let last = 1.0 - mixing.iter().sum::<f64>();
    mixing.push(last);
    MixtureParams::new(mixing, coefficients, fitted.scales().to_vec())
        .expect("perturbed coordinates stay admissible")
}

/// Sandwich covariance at a converged fit: `M̂` by central finite differences
/// (step `1e-6·max(1,|θ_k|)`), `Q̂` as the averaged outer product, then
/// `V = M̂⁻¹Q̂M̂⁻¹` and `se = sqrt(diag(V)/n)`.
pub fn sandwich_covariance(
    data: &RegressionData,
    fit: &FitResult,
    spec: &EstimatorSpec,
) -> Result<CovarianceReport> {
    let params = &fit.params;
    let g = params.n_components();
    let p = params.n_coefficients();
    let d = estimating_dimension(g, p);
    let n = data.n();
    if n <= d {
        return Err(MixregError::InvalidDimensions(format!(
            "sandwich covariance needs n > {d} free coordinates, got n = {n}"
        )));
    }
    let ones = vec![1.0; n];
    let leverage: &[f64] = fit
        .leverage
        .as_ref()
        .map(|l| l.as_slice())
        .unwrap_or(&ones);
    if leverage.len() != n {
        return Err(MixregError::InvalidDimensions(
            "leverage weights do not match the sample size".into(),
        ));
    }

    let mut q_hat = DMatrix::zeros(d, d);
    for j in 0..n {
        let h = estimating_function(&data.row(j), data.response()[j], params, spec, leverage[j]);
        q_hat.syger(1.0 / n as f64, &h, &h, 1.0);
    }
    for r in 0..d {
        for c in (r + 1)..d {
            q_hat[(r, c)] = q_hat[(c, r)];
        }
    }

    let theta = theta_of(params);
    let mut m_hat = DMatrix::zeros(d, d);
    for k in 0..d {
        let mut step = 1e-6 * theta[k].abs().max(1.0);
        if k >= g * p {
            // keep every mixing probability strictly inside (0, 1)
            let pi_i = theta[k];
            let pi_last = 1.0 - theta[g * p..].iter().sum::<f64>();
            step = step.min(0.5 * pi_i).min(0.5 * pi_last);
            if !(step > 0.0) {
                return Err(MixregError::NonIdentifiable(format!(
                    "mixing probability {pi_i} too close to the boundary for differentiation"
                )));
            }
        }
        let mut plus = theta.clone();
        plus[k] += step;
        let mut minus = theta.clone();
        minus[k] -= step;
        let h_plus = mean_estimating_function(data, &params_of(&plus, params), spec, leverage);
        let h_minus = mean_estimating_function(data, &params_of(&minus, params), spec, leverage);
        let column = (h_plus - h_minus) / (2.0 * step);
        m_hat.set_column(k, &column);
    }

    let svd = m_hat.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) || smax / smin >= MAX_JACOBIAN_CONDITION {
        return Err(MixregError::NonIdentifiable(format!(
            "averaged Jacobian condition number {:.3e} exceeds 1e12",
            smax / smin
        )));
    }
    let m_inv = m_hat
        .clone()
        .try_inverse()
        .ok_or_else(|| MixregError::NonIdentifiable("averaged Jacobian is singular".into()))?;
    let v = &m_inv * &q_hat * &m_inv;
    let mut standard_errors = Vec::with_capacity(d);
    for k in 0..d {
        let var = v[(k, k)] / n as f64;
        if !(var >= 0.0) || !var.is_finite() {
            return Err(MixregError::NonIdentifiable(format!(
                "variance diagonal entry {k} is {var}; sandwich not positive at the fit"
            )));
        }
        standard_errors.push(var.sqrt());
    }
    Ok(CovarianceReport {
        m_hat,
        q_hat,
        v,
        standard_errors,
    })
}
