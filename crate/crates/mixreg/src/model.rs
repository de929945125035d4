//! Data containers and configuration for mixture regression fits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MixregError, Result};
use crate::kernel::PsiKernel;
use crate::scatter::{LeverageWeights, PredictorMatrix};

/// Design matrix (first column all ones) and response vector.
#[derive(Debug, Clone)]
pub struct RegressionData {
    design: DMatrix<f64>,
    response: DVector<f64>,
}

impl RegressionData {
    pub fn new(design: DMatrix<f64>, response: DVector<f64>) -> Result<Self> {
        let (n, p) = design.shape();
        if n == 0 || p == 0 || response.len() != n {
            return Err(MixregError::InvalidDimensions(format!(
                "design is {n} x {p}, response has {} entries",
                response.len()
            )));
        }
        if n <= p {
            return Err(MixregError::InvalidDimensions(format!(
                "need more observations than design columns, got n = {n}, p = {p}"
            )));
        }
        if design.iter().any(|v| !v.is_finite()) || response.iter().any(|v| !v.is_finite()) {
            return Err(MixregError::InvalidData("non-finite entries".into()));
        }
        if design.column(0).iter().any(|&v| v != 1.0) {
            return Err(MixregError::InvalidData(
                "first design column must be the intercept (all ones)".into(),
            ));
        }
        Ok(Self { design, response })
    }

    /// Builds the design by prepending an intercept column to `predictors`.
    pub fn from_predictors(predictors: &DMatrix<f64>, response: DVector<f64>) -> Result<Self> {
        let (n, px) = predictors.shape();
        let design = DMatrix::from_fn(n, px + 1, |r, c| {
            if c == 0 {
                1.0
            } else {
                predictors[(r, c - 1)]
            }
        });
        Self::new(design, response)
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    /// Number of design columns, intercept included.
    pub fn p(&self) -> usize {
        self.design.ncols()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.response
    }

    pub fn row(&self, j: usize) -> DVector<f64> {
        self.design.row(j).transpose()
    }

    /// The non-constant predictor block (design without the intercept).
    pub fn predictor_matrix(&self) -> Result<PredictorMatrix> {
        let (n, p) = self.design.shape();
        let values = DMatrix::from_fn(n, p - 1, |r, c| self.design[(r, c + 1)]);
        PredictorMatrix::new(values)
    }

    /// Sample standard deviation of the response.
    pub fn response_std(&self) -> f64 {
        let n = self.n() as f64;
        let mean = self.response.sum() / n;
        let ss: f64 = self.response.iter().map(|y| (y - mean) * (y - mean)).sum();
        (ss / (n - 1.0).max(1.0)).sqrt()
    }
}

/// The full parameter vector of a g-component mixture regression:
/// mixing probabilities, per-component coefficients, per-component scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    mixing: Vec<f64>,
    coefficients: Vec<DVector<f64>>,
    scales: Vec<f64>,
}

impl MixtureParams {
    pub fn new(
        mixing: Vec<f64>,
        coefficients: Vec<DVector<f64>>,
        scales: Vec<f64>,
    ) -> Result<Self> {
        let g = mixing.len();
        if g == 0 || coefficients.len() != g || scales.len() != g {
            return Err(MixregError::InvalidDimensions(format!(
                "inconsistent component counts: {} mixing, {} coefficient vectors, {} scales",
                g,
                coefficients.len(),
                scales.len()
            )));
        }
        let total: f64 = mixing.iter().sum();
        if (total - 1.0).abs() > 1e-12 || mixing.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(MixregError::InvalidParameter(format!(
                "mixing probabilities must lie in [0,1] and sum to 1, got sum {total}"
            )));
        }
        if scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(MixregError::InvalidParameter(
                "scales must be positive and finite".into(),
            ));
        }
        let p = coefficients[0].len();
        if coefficients.iter().any(|b| b.len() != p) {
            return Err(MixregError::InvalidDimensions(
                "coefficient vectors differ in length".into(),
            ));
        }
        Ok(Self {
            mixing,
            coefficients,
            scales,
        })
    }

    pub fn n_components(&self) -> usize {
        self.mixing.len()
    }

    pub fn n_coefficients(&self) -> usize {
        self.coefficients[0].len()
    }

    pub fn mixing(&self) -> &[f64] {
        &self.mixing
    }

    pub fn coefficients(&self) -> &[DVector<f64>] {
        &self.coefficients
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Concatenated parameter vector `(π, β_1, ..., β_g, σ)` used for the
    /// convergence norm and for bit-exact trajectory comparisons.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(
            self.n_components() * (2 + self.n_coefficients()),
        );
        out.extend_from_slice(&self.mixing);
        for b in &self.coefficients {
            out.extend(b.iter());
        }
        out.extend_from_slice(&self.scales);
        out
    }

    /// Euclidean distance between flattened parameter vectors.
    pub fn delta_norm(&self, other: &Self) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Components reordered so that new component `i` is old `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n_components());
        Self {
            mixing: perm.iter().map(|&k| self.mixing[k]).collect(),
            coefficients: perm.iter().map(|&k| self.coefficients[k].clone()).collect(),
            scales: perm.iter().map(|&k| self.scales[k]).collect(),
        }
    }
}

/// Which estimating equations drive the M-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    /// Plain M-estimation: leverage weights identically one.
    M,
    /// Mallows-type GM: the loss is multiplied by `w(x)`.
    GmMallows,
    /// Schweppe-type GM: the standardized residual is rescaled by `w(x)`.
    GmSchweppe,
}

/// Estimator selection: kind, robust kernel and leverage-cutoff probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub kernel: PsiKernel,
    /// Tail probability of the chi-squared leverage cutoff (ignored for
    /// [`EstimatorKind::M`]).
    pub gamma: f64,
}

impl EstimatorSpec {
    pub fn m(kernel: PsiKernel) -> Self {
        Self {
            kind: EstimatorKind::M,
            kernel,
            gamma: 0.05,
        }
    }

    pub fn mallows(kernel: PsiKernel, gamma: f64) -> Self {
        Self {
            kind: EstimatorKind::GmMallows,
            kernel,
            gamma,
        }
    }

    pub fn schweppe(kernel: PsiKernel, gamma: f64) -> Self {
        Self {
            kind: EstimatorKind::GmSchweppe,
            kernel,
            gamma,
        }
    }
}

/// EM driver configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    /// Stopping rule: Euclidean norm of the parameter change.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Number of random-partition initializations.
    pub n_starts: usize,
    pub seed: u64,
    /// Lower bound on component scales; `None` derives
    /// `1e-4 × sd(response)`.
    pub sigma_floor: Option<f64>,
    /// Record the parameter vector after every EM iteration.
    pub record_trace: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 1000,
            n_starts: 10,
            seed: 0,
            sigma_floor: None,
            record_trace: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(MixregError::InvalidParameter(
                "tolerance must be positive".into(),
            ));
        }
        if self.max_iterations == 0 || self.n_starts == 0 {
            return Err(MixregError::InvalidParameter(
                "max_iterations and n_starts must be at least 1".into(),
            ));
        }
        if let Some(f) = self.sigma_floor {
            if !(f > 0.0) {
                return Err(MixregError::InvalidParameter(
                    "sigma_floor must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Converged fit: parameters, posteriors and diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: MixtureParams,
    /// Posterior component probabilities, one row per observation.
    pub posteriors: DMatrix<f64>,
    /// Complete-data log-likelihood at the fit (Gaussian form, soft
    /// posteriors).
    pub complete_loglik: f64,
    /// Observed-data Gaussian mixture log-likelihood at the fit.
    pub gaussian_loglik: f64,
    pub icl: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Leverage weights used by the GM estimators; absent for plain M.
    pub leverage: Option<LeverageWeights>,
    /// Per-iteration parameter snapshots of the winning start, populated when
    /// [`FitConfig::record_trace`] is set.
    pub trace: Vec<MixtureParams>,
}
