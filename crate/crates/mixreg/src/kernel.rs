//! Robust criterion functions for the Huber and Tukey-bisquare families.
//!
//! A [`PsiKernel`] bundles the loss `rho`, its derivative `psi`, the residual
//! weight `W*(t) = psi(t)/t` used to robustify posteriors, and the scale
//! function `chi(t) = psi(t)·t − rho(t)` that drives the M-scale update. The
//! constant returned by [`PsiKernel::scale_constant`] calibrates that update
//! to be Fisher-consistent at the normal model.
//!
//! All operations are pure functions of an immutable kernel value.

use serde::{Deserialize, Serialize};

use crate::error::{MixregError, Result};

/// Huber tuning constant giving 95% efficiency at the normal model.
pub const HUBER_DEFAULT_TUNING: f64 = 1.345;
/// Tukey bisquare tuning constant giving 95% efficiency at the normal model.
pub const TUKEY_DEFAULT_TUNING: f64 = 4.685;

/// Criterion family of a [`PsiKernel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    /// Quadratic inside `[-c, c]`, linear outside; `psi` is bounded by `c`.
    Huber,
    /// Redescending bisquare; `psi` vanishes outside `[-c, c]`.
    TukeyBisquare,
}

/// A robust criterion with its tuning constant, applied to standardized
/// residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiKernel {
    family: KernelFamily,
    c: f64,
}

impl PsiKernel {
    pub fn new(family: KernelFamily, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(MixregError::InvalidParameter(format!(
                "tuning constant must be positive and finite, got {c}"
            )));
        }
        Ok(Self { family, c })
    }

    /// Huber kernel with tuning constant `c`.
    pub fn huber(c: f64) -> Result<Self> {
        Self::new(KernelFamily::Huber, c)
    }

    /// Tukey bisquare kernel with tuning constant `c`.
    pub fn tukey(c: f64) -> Result<Self> {
        Self::new(KernelFamily::TukeyBisquare, c)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn tuning(&self) -> f64 {
        self.c
    }

    /// Loss `rho(t)`: even, nonnegative, `rho(0) = 0`, nondecreasing in `|t|`.
    ///
    /// Panics on non-finite `t` (domain error).
    pub fn rho(&self, t: f64) -> f64 {
        assert!(t.is_finite(), "rho: non-finite argument {t}");
        let c = self.c;
        let a = t.abs();
        match self.family {
            KernelFamily::Huber => {
                if a <= c {
                    0.5 * t * t
                } else {
                    c * a - 0.5 * c * c
                }
            }
            KernelFamily::TukeyBisquare => {
                // bisquare antiderivative normalized so rho' = psi exactly
                if a <= c {
                    let u = 1.0 - (t / c) * (t / c);
                    c * c / 6.0 * (1.0 - u * u * u)
                } else {
                    c * c / 6.0
                }
            }
        }
    }

    /// Influence function `psi(t) = rho'(t)`: odd and bounded.
    ///
    /// Panics on non-finite `t` (domain error).
    pub fn psi(&self, t: f64) -> f64 {
        assert!(t.is_finite(), "psi: non-finite argument {t}");
        let c = self.c;
        match self.family {
            KernelFamily::Huber => t.clamp(-c, c),
            KernelFamily::TukeyBisquare => {
                if t.abs() <= c {
                    let u = 1.0 - (t / c) * (t / c);
                    t * u * u
                } else {
                    0.0
                }
            }
        }
    }

    /// Residual weight `W*(t) = psi(t)/t`, with the analytic limit
    /// `W*(0) = psi'(0) = 1` for both families. Lies in `[0, 1]`.
    pub fn residual_weight(&self, t: f64) -> f64 {
        assert!(t.is_finite(), "residual_weight: non-finite argument {t}");
        if t == 0.0 {
            1.0
        } else {
            self.psi(t) / t
        }
    }

    /// Scale function `chi(t) = psi(t)·t − rho(t)`; even and bounded.
    ///
    /// For Huber the closed form `min(t², c²)/2` is used so the identity
    /// holds exactly. For Tukey, chi is negative beyond the tuning constant
    /// (the saturated loss dominates), which the M-scale update tolerates
    /// because the expectation at the model stays positive.
    pub fn chi(&self, t: f64) -> f64 {
        assert!(t.is_finite(), "chi: non-finite argument {t}");
        match self.family {
            KernelFamily::Huber => (t * t).min(self.c * self.c) / 2.0,
            KernelFamily::TukeyBisquare => self.psi(t) * t - self.rho(t),
        }
    }

    /// `E_Φ[chi(T)]` for standard-normal `T`, by deterministic adaptive
    /// quadrature on `[-12, 12]` (the tail mass beyond is < 1e-30).
    pub fn expected_chi_normal(&self) -> f64 {
        let density = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let integrand = |t: f64| self.chi(t) * density(t);
        // chi is even; integrate the half-line and split at the kink t = c.
        let hi = 12.0;
        let split = self.c.min(hi);
        let mut total = adaptive_simpson(&integrand, 0.0, split, 1e-13);
        if split < hi {
            total += adaptive_simpson(&integrand, split, hi, 1e-13);
        }
        2.0 * total
    }

    /// Consistency constant `a = ((n−p)/n)·E_Φ[chi(T)]` for the M-scale
    /// update with `n` observations and `p` design columns.
    pub fn scale_constant(&self, n: usize, p: usize) -> Result<f64> {
        if p < 1 || n <= p {
            return Err(MixregError::InvalidDimensions(format!(
                "scale constant requires n > p >= 1, got n = {n}, p = {p}"
            )));
        }
        Ok((n - p) as f64 / n as f64 * self.expected_chi_normal())
    }
}

/// Recursive adaptive Simpson quadrature with error estimate refinement.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth >= 50 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth + 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth + 1)
        }
    }
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let fb = f(b);
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 0)
}
