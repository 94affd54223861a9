//! Learnable kernel distributions and the frozen-noise projection kernels
//! drawn from them.
//!
//! A kernel's coefficients are uniform draws from a learned interval
//! `[a, b]`. The interval is parameterized as a midpoint `m` and a
//! log-halfwidth `rho`, giving `a = m - exp(rho)` and `b = m + exp(rho)`;
//! the ordering `a < b` then holds unconditionally and the optimizer stays
//! unconstrained. The uniform samples `u_t` in `[0, 1)` are drawn once at
//! construction and frozen, so `k_t = a + (b - a) * u_t` is a deterministic,
//! differentiable function of `(m, rho)`.

use crate::error::{Error, Result};
use crate::rng::{unit_f64, Rng};

/// Parameters of one kernel's uniform coefficient distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelDistribution {
    pub midpoint: f64,
    pub log_halfwidth: f64,
}

impl KernelDistribution {
    pub fn new(midpoint: f64, log_halfwidth: f64) -> Self {
        KernelDistribution {
            midpoint,
            log_halfwidth,
        }
    }
}

/// Lower and upper bounds `(a, b)` of the distribution's interval.
///
/// Fails if either parameter is non-finite, or if `exp(rho)` underflows to
/// zero or overflows to infinity (the interval would be degenerate).
pub fn derive_bounds(dist: &KernelDistribution) -> Result<(f64, f64)> {
    if !dist.midpoint.is_finite() || !dist.log_halfwidth.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "distribution parameters must be finite, got midpoint={} log_halfwidth={}",
            dist.midpoint, dist.log_halfwidth
        )));
    }
    let halfwidth = dist.log_halfwidth.exp();
    if halfwidth == 0.0 || !halfwidth.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "halfwidth exp({}) out of range",
            dist.log_halfwidth
        )));
    }
    let a = dist.midpoint - halfwidth;
    let b = dist.midpoint + halfwidth;
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "bounds ({a}, {b}) out of range"
        )));
    }
    Ok((a, b))
}

/// Side length of the square tap layout, failing on non-square supports.
pub fn kernel_side(support: usize) -> Result<usize> {
    if support == 0 {
        return Err(Error::Config("kernel support must be positive".to_string()));
    }
    let side = (support as f64).sqrt().round() as usize;
    if side * side != support {
        return Err(Error::Config(format!(
            "kernel support {support} is not a perfect square"
        )));
    }
    Ok(side)
}

/// One projection's frozen sampling noise and the coefficients derived from
/// its owning distribution. The `support` taps are laid out as a
/// `side x side` square, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionKernel {
    support: usize,
    side: usize,
    pub(crate) noise: Vec<f64>,
    pub(crate) coefficients: Vec<f64>,
}

impl ProjectionKernel {
    /// Samples fresh noise from `rng` and derives coefficients for `dist`.
    pub fn sample(dist: &KernelDistribution, support: usize, rng: &mut Rng) -> Result<Self> {
        let side = kernel_side(support)?;
        let noise: Vec<f64> = (0..support).map(|_| unit_f64(rng)).collect();
        let mut kernel = ProjectionKernel {
            support,
            side,
            noise,
            coefficients: vec![0.0; support],
        };
        kernel.refresh(dist)?;
        Ok(kernel)
    }

    /// Builds a kernel from injected noise values (each in `[0, 1)`).
    pub fn with_noise(dist: &KernelDistribution, support: usize, noise: Vec<f64>) -> Result<Self> {
        let side = kernel_side(support)?;
        if noise.len() != support {
            return Err(Error::Shape(format!(
                "expected {support} noise values, got {}",
                noise.len()
            )));
        }
        if noise.iter().any(|u| !(0.0..1.0).contains(u)) {
            return Err(Error::InvalidParameter(
                "noise values must lie in [0, 1)".to_string(),
            ));
        }
        let mut kernel = ProjectionKernel {
            support,
            side,
            noise,
            coefficients: vec![0.0; support],
        };
        kernel.refresh(dist)?;
        Ok(kernel)
    }

    /// Recomputes coefficients from the current distribution and the frozen
    /// noise. Called after every optimizer update of `dist`.
    pub fn refresh(&mut self, dist: &KernelDistribution) -> Result<()> {
        let (a, b) = derive_bounds(dist)?;
        let span = b - a;
        for (k, &u) in self.coefficients.iter_mut().zip(&self.noise) {
            *k = a + span * u;
        }
        Ok(())
    }

    pub fn support(&self) -> usize {
        self.support
    }

    /// Side length of the square tap layout.
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }
}
