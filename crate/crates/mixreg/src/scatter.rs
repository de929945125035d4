//! Robust location/scatter of the predictors and the leverage weights
//! derived from it.
//!
//! The minimum covariance determinant (MCD) estimate is the h-subset of
//! observations whose covariance has minimal determinant, with
//! `h = ⌊(n + p + 1)/2⌋`. It is computed by the FAST-MCD procedure: random
//! elemental starts, two concentration steps each, full concentration on the
//! best candidates, and a median-based consistency rescale so that clean
//! normal data gets distances on the chi-squared scale. In one dimension the
//! minimal-variance contiguous half-sample over sorted data is exact, so the
//! random search is skipped.
//!
//! Squared robust Mahalanobis distances feed a leverage weight
//! `w(x) = min(1, (b/d(x))^{1/2})` with `b` a chi-squared quantile, which the
//! GM estimators use to downweight leverage points.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF};

use crate::error::{MixregError, Result};

const RANDOM_STARTS: usize = 500;
const QUICK_CONCENTRATION_STEPS: usize = 2;
const TOP_CANDIDATES: usize = 10;
const MAX_CONCENTRATION_ITERATIONS: usize = 200;

/// The non-constant predictor coordinates: the design matrix without its
/// intercept column.
#[derive(Debug, Clone)]
pub struct PredictorMatrix {
    values: DMatrix<f64>,
}

impl PredictorMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let (n, p) = values.shape();
        if p == 0 || n < p + 1 {
            return Err(MixregError::InvalidDimensions(format!(
                "predictor matrix needs n >= p + 1 rows, got {n} x {p}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MixregError::InvalidData(
                "predictor matrix contains non-finite entries".into(),
            ));
        }
        for k in 0..p {
            let col = values.column(k);
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                return Err(MixregError::InvalidData(format!(
                    "predictor column {k} is constant"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// Number of non-constant predictor coordinates.
    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    fn row(&self, j: usize) -> DVector<f64> {
        self.values.row(j).transpose()
    }

    /// Subset size of the MCD criterion: `⌊(n + p + 1)/2⌋`.
    pub fn mcd_subset_size(&self) -> usize {
        (self.n() + self.dim() + 1) / 2
    }
}

/// Robust location and scatter produced by [`fast_mcd`].
#[derive(Debug, Clone)]
pub struct McdEstimate {
    /// Robust location `m(X)`.
    pub location: DVector<f64>,
    /// Consistency-rescaled scatter `C(X)`; symmetric positive definite.
    pub scatter: DMatrix<f64>,
    /// Sorted indices of the optimal h-subset.
    pub support: Vec<usize>,
    /// Determinant of the reported (rescaled) scatter.
    pub determinant: f64,
}

/// Leverage weights `w(x_j) = min(1, (b/d_j)^{1/2})` for each observation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeverageWeights {
    weights: Vec<f64>,
    /// Cutoff `b`: the `(1−γ)` chi-squared quantile with `p` degrees of
    /// freedom, `p` the number of non-constant predictors.
    pub cutoff: f64,
    pub gamma: f64,
}

impl LeverageWeights {
    /// Unit weights: what a GM fit sees when every design point is clean.
    /// Useful for pinning the weights when comparing against plain M.
    pub fn unit(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
            cutoff: f64::INFINITY,
            gamma: 0.05,
        }
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Chi-squared quantile, Newton-refined to machine precision (the library
/// inverse is only accurate to about 1e-5 in x).
pub(crate) fn chi_squared_quantile(dof: f64, prob: f64) -> f64 {
    let dist = ChiSquared::new(dof).expect("positive dof");
    let mut x = dist.inverse_cdf(prob);
    for _ in 0..12 {
        let density = dist.pdf(x);
        if !(density > 0.0) {
            break;
        }
        let step = (dist.cdf(x) - prob) / density;
        x -= step;
        if step.abs() <= 1e-15 * x.abs() {
            break;
        }
    }
    x
}

struct Candidate {
    support: Vec<usize>,
    location: DVector<f64>,
    scatter: DMatrix<f64>,
    determinant: f64,
}

/// `(det, support)` ordering: smaller determinant wins, exact ties broken by
/// lexicographically smallest support for determinism.
fn better(det: f64, support: &[usize], best: Option<&Candidate>) -> bool {
    match best {
        None => true,
        Some(b) => det < b.determinant || (det == b.determinant && support < b.support.as_slice()),
    }
}

fn subset_moments(x: &PredictorMatrix, subset: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    let p = x.dim();
    let m = subset.len();
    let mut mean = DVector::zeros(p);
    for &j in subset {
        mean += x.row(j);
    }
    mean /= m as f64;
    let mut cov = DMatrix::zeros(p, p);
    for &j in subset {
        let d = x.row(j) - &mean;
        cov.syger(1.0, &d, &d, 1.0);
    }
    cov /= (m - 1).max(1) as f64;
    // syger fills the lower triangle; mirror it
    for r in 0..p {
        for c in (r + 1)..p {
            cov[(r, c)] = cov[(c, r)];
        }
    }
    (mean, cov)
}

fn spd_determinant(scatter: &DMatrix<f64>) -> Option<f64> {
    scatter
        .clone()
        .cholesky()
        .map(|ch| ch.l_dirty().diagonal().iter().map(|d| d * d).product())
}

fn squared_distances(
    x: &PredictorMatrix,
    location: &DVector<f64>,
    scatter: &DMatrix<f64>,
) -> Option<Vec<f64>> {
    let chol = scatter.clone().cholesky()?;
    let mut out = Vec::with_capacity(x.n());
    for j in 0..x.n() {
        let d = x.row(j) - location;
        let solved = chol.solve(&d);
        out.push(d.dot(&solved));
    }
    Some(out)
}

/// One concentration step: take the h observations closest to the current
/// estimate and recompute moments. Returns `None` on a singular scatter.
fn concentration_step(
    x: &PredictorMatrix,
    location: &DVector<f64>,
    scatter: &DMatrix<f64>,
    h: usize,
) -> Option<Candidate> {
    let dists = squared_distances(x, location, scatter)?;
    let mut order: Vec<usize> = (0..x.n()).collect();
    order.sort_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap().then(a.cmp(&b)));
    let mut support: Vec<usize> = order[..h].to_vec();
    support.sort_unstable();
    let (loc, cov) = subset_moments(x, &support);
    let det = spd_determinant(&cov)?;
    Some(Candidate {
        support,
        location: loc,
        scatter: cov,
        determinant: det,
    })
}

/// Concentrate until the support repeats (the C-step fixed point).
fn concentrate_fully(x: &PredictorMatrix, mut cand: Candidate, h: usize) -> Option<Candidate> {
    for _ in 0..MAX_CONCENTRATION_ITERATIONS {
        let next = concentration_step(x, &cand.location, &cand.scatter, h)?;
        if next.support == cand.support {
            return Some(next);
        }
        cand = next;
    }
    Some(cand)
}

/// Exact 1-d MCD: the minimal-variance contiguous half-sample of the sorted
/// data.
fn univariate_mcd(x: &PredictorMatrix, h: usize) -> Result<Candidate> {
    let n = x.n();
    let vals: Vec<f64> = (0..n).map(|j| x.values()[(j, 0)]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap().then(a.cmp(&b)));

    let mut best: Option<Candidate> = None;
    for start in 0..=(n - h) {
        let window = &order[start..start + h];
        let mean: f64 = window.iter().map(|&j| vals[j]).sum::<f64>() / h as f64;
        let var: f64 = window
            .iter()
            .map(|&j| (vals[j] - mean) * (vals[j] - mean))
            .sum::<f64>()
            / (h - 1) as f64;
        let mut support = window.to_vec();
        support.sort_unstable();
        if better(var, &support, best.as_ref()) {
            best = Some(Candidate {
                support,
                location: DVector::from_element(1, mean),
                scatter: DMatrix::from_element(1, 1, var),
                determinant: var,
            });
        }
    }
    let cand = best.expect("at least one window");
    if cand.determinant <= 0.0 {
        return Err(MixregError::DegenerateScatter(
            "minimal half-sample has zero variance".into(),
        ));
    }
    Ok(cand)
}

/// Draw `k` distinct indices in `0..n`, deterministic given the RNG state.
fn draw_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let j = rng.gen_range(0..n);
        if !picked.contains(&j) {
            picked.push(j);
        }
    }
    picked
}

/// FAST-MCD robust location and scatter of the predictors.
///
/// Deterministic given `seed`. The reported scatter carries the
/// `median(d²)/χ²_{0.5,p}` consistency correction so distances of clean
/// normal data are on the chi-squared scale.
pub fn fast_mcd(x: &PredictorMatrix, seed: u64) -> Result<McdEstimate> {
    let n = x.n();
    let p = x.dim();
    if n < 2 * (p + 1) {
        return Err(MixregError::InvalidDimensions(format!(
            "FAST-MCD needs n >= 2(p+1), got n = {n}, p = {p}"
        )));
    }
    let h = x.mcd_subset_size();

    let best = if p == 1 {
        univariate_mcd(x, h)?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut candidates: Vec<Candidate> = Vec::with_capacity(RANDOM_STARTS);
        for _ in 0..RANDOM_STARTS {
            let mut elemental = draw_distinct(&mut rng, n, p + 1);
            elemental.sort_unstable();
            let (mut loc, mut cov) = subset_moments(x, &elemental);
            // grow a singular elemental set until its covariance is invertible
            while spd_determinant(&cov).is_none() && elemental.len() < n {
                let mut j = rng.gen_range(0..n);
                while elemental.contains(&j) {
                    j = rng.gen_range(0..n);
                }
                elemental.push(j);
                elemental.sort_unstable();
                let (l, c) = subset_moments(x, &elemental);
                loc = l;
                cov = c;
            }
            let mut cand = Candidate {
                support: elemental,
                location: loc,
                scatter: cov,
                determinant: f64::INFINITY,
            };
            let mut ok = true;
            for _ in 0..QUICK_CONCENTRATION_STEPS {
                match concentration_step(x, &cand.location, &cand.scatter, h) {
                    Some(next) => cand = next,
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                candidates.push(cand);
            }
        }
        if candidates.is_empty() {
            return Err(MixregError::DegenerateScatter(
                "no elemental start produced an invertible scatter".into(),
            ));
        }
        candidates.sort_by(|a, b| {
            a.determinant
                .partial_cmp(&b.determinant)
                .unwrap()
                .then_with(|| a.support.cmp(&b.support))
        });
        candidates.dedup_by(|a, b| a.support == b.support);
        let mut best: Option<Candidate> = None;
        for cand in candidates.into_iter().take(TOP_CANDIDATES) {
            if let Some(full) = concentrate_fully(x, cand, h) {
                if better(full.determinant, &full.support, best.as_ref()) {
                    best = Some(full);
                }
            }
        }
        best.ok_or_else(|| {
            MixregError::DegenerateScatter("concentration produced singular scatter only".into())
        })?
    };

    // consistency rescale: median(d^2) / chi2_{0.5, p}
    let dists = squared_distances(x, &best.location, &best.scatter).ok_or_else(|| {
        MixregError::DegenerateScatter("optimal subset scatter is singular".into())
    })?;
    let mut sorted = dists.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 0 {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    } else {
        sorted[n / 2]
    };
    let chi_median = chi_squared_quantile(p as f64, 0.5);
    let factor = median / chi_median;
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(MixregError::DegenerateScatter(format!(
            "consistency factor not positive: {factor}"
        )));
    }
    let scatter = &best.scatter * factor;
    let determinant = spd_determinant(&scatter).ok_or_else(|| {
        MixregError::DegenerateScatter("rescaled scatter is singular".into())
    })?;
    Ok(McdEstimate {
        location: best.location,
        scatter,
        support: best.support,
        determinant,
    })
}

/// Squared robust Mahalanobis distances
/// `d_j = (x_j − m)' C⁻¹ (x_j − m)` (the squared form is kept throughout).
pub fn mahalanobis_distances(x: &PredictorMatrix, est: &McdEstimate) -> Result<Vec<f64>> {
    squared_distances(x, &est.location, &est.scatter)
        .ok_or_else(|| MixregError::DegenerateScatter("scatter is not positive definite".into()))
}

/// Leverage weights `w(x_j) = min(1, (b/d_j)^{1/2})` with
/// `b = χ²_{1−γ}` on `p` degrees of freedom.
pub fn leverage_weights(
    x: &PredictorMatrix,
    est: &McdEstimate,
    gamma: f64,
) -> Result<LeverageWeights> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(MixregError::InvalidParameter(format!(
            "gamma must lie in (0, 1), got {gamma}"
        )));
    }
    let cutoff = chi_squared_quantile(x.dim() as f64, 1.0 - gamma);
    let dists = mahalanobis_distances(x, est)?;
    let weights = dists
        .iter()
        .map(|&d| if d <= cutoff { 1.0 } else { (cutoff / d).sqrt() })
        .collect();
    Ok(LeverageWeights {
        weights,
        cutoff,
        gamma,
    })
}
