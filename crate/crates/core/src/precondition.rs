//! Noise-level dependent input/output scalings wrapping a raw network into a
//! denoiser.
//!
//! For sequence length `L`, mean-reversion ratio `k` and noise level `σ`:
//!
//! ```text
//! c_in   = 1 / sqrt(σ_data² + k²σ_mu² + σ² + 2kσ_cov)
//! c_skip = (σ_data² + kσ_cov) / (σ_data² + k²σ_mu² + σ²/L + 2kσ_cov)
//! c_out  = sqrt((k²σ_mu²σ_data² + σ²σ_data²/L − k²σ_cov²) / (σ_data² + k²σ_mu² + σ²/L + 2kσ_cov))
//! c_noise = ln(σ) / 4
//! D = mean_l(c_skip·x̃ˡ) + c_out·F({c_in·x̃ˡ}; c_noise; cond)
//! ```
//!
//! Setting `σ_mu = σ_cov = 0` recovers the usual generative preconditioning.

use serde::{Deserialize, Serialize};

use crate::denoiser::RawNetwork;
use crate::error::{Error, Result};
use crate::schedule::{Schedule, SigmaGrid};
use crate::tensor::ImageBatch;

/// Dataset statistics and sequence length driving the scalings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreconditionParams {
    /// Standard deviation of target images.
    pub sigma_data: f64,
    /// Standard deviation of corrupted images.
    pub sigma_mu: f64,
    /// Covariance between target and corrupted images.
    pub sigma_cov: f64,
    /// Number of time points denoised jointly.
    pub seq_len: usize,
}

impl Default for PreconditionParams {
    fn default() -> Self {
        PreconditionParams {
            sigma_data: 1.0,
            sigma_mu: 1.0,
            sigma_cov: 0.9,
            seq_len: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
    pub c_noise: f64,
}

impl PreconditionParams {
    pub fn new(sigma_data: f64, sigma_mu: f64, sigma_cov: f64, seq_len: usize) -> Result<Self> {
        let p = PreconditionParams {
            sigma_data,
            sigma_mu,
            sigma_cov,
            seq_len,
        };
        p.validate()?;
        Ok(p)
    }

    /// Same statistics with no mean-reversion terms.
    pub fn generative(sigma_data: f64, seq_len: usize) -> Result<Self> {
        Self::new(sigma_data, 0.0, 0.0, seq_len)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data.is_finite() && self.sigma_data > 0.0) {
            return Err(Error::config(
                "precondition.sigma_data",
                format!("must be > 0, got {}", self.sigma_data),
            ));
        }
        if !(self.sigma_mu.is_finite() && self.sigma_mu >= 0.0) {
            return Err(Error::config(
                "precondition.sigma_mu",
                format!("must be >= 0, got {}", self.sigma_mu),
            ));
        }
        let bound = self.sigma_data * self.sigma_mu;
        // A relative slack admits statistics measured exactly at the bound.
        if !self.sigma_cov.is_finite() || self.sigma_cov.abs() > bound * (1.0 + 1e-12) {
            return Err(Error::config(
                "precondition.sigma_cov",
                format!(
                    "|{}| exceeds sigma_data * sigma_mu = {bound} (Cauchy-Schwarz)",
                    self.sigma_cov
                ),
            ));
        }
        if self.seq_len == 0 {
            return Err(Error::config("precondition.seq_len", "must be >= 1"));
        }
        Ok(())
    }

    /// Rejects configurations whose `c_out²` is not strictly positive anywhere
    /// on the sampler grid or at any noise level the trainer may draw.
    pub fn validate_on_grid(&self, sched: &Schedule, grid: &SigmaGrid) -> Result<()> {
        self.validate()?;
        for &sigma in grid.values() {
            let k = sched.k(sigma)?;
            let sq = self.c_out_squared(k, sigma);
            if !(sq.is_finite() && sq > 0.0) {
                return Err(Error::config(
                    "precondition.sigma_cov",
                    format!("c_out² = {sq} is not positive at σ = {sigma}"),
                ));
            }
        }
        Ok(())
    }

    fn denominators(&self, k: f64, sigma: f64) -> (f64, f64) {
        let base = self.sigma_data.powi(2) + k * k * self.sigma_mu.powi(2) + 2.0 * k * self.sigma_cov;
        let var_in = base + sigma * sigma;
        let var_skip = base + sigma * sigma / self.seq_len as f64;
        (var_in, var_skip)
    }

    pub fn c_out_squared(&self, k: f64, sigma: f64) -> f64 {
        let l = self.seq_len as f64;
        let sd2 = self.sigma_data.powi(2);
        let (_, denom) = self.denominators(k, sigma);
        let num = k * k * self.sigma_mu.powi(2) * sd2 + sigma * sigma / l * sd2
            - k * k * self.sigma_cov.powi(2);
        num / denom
    }

    /// Coefficients for an explicit `(k, σ)` pair.
    pub fn coefficients_at(&self, k: f64, sigma: f64) -> Result<Coefficients> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Domain(format!("noise level must be > 0, got {sigma}")));
        }
        let (var_in, var_skip) = self.denominators(k, sigma);
        let c_out_sq = self.c_out_squared(k, sigma);
        if !(c_out_sq > 0.0) {
            return Err(Error::Domain(format!(
                "degenerate preconditioning: c_out² = {c_out_sq} at σ = {sigma}, k = {k}"
            )));
        }
        Ok(Coefficients {
            c_in: 1.0 / var_in.sqrt(),
            c_skip: (self.sigma_data.powi(2) + k * self.sigma_cov) / var_skip,
            c_out: c_out_sq.sqrt(),
            c_noise: sigma.ln() / 4.0,
        })
    }

    pub fn coefficients(&self, sched: &Schedule, t: f64) -> Result<Coefficients> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("coefficients need t > 0, got {t}")));
        }
        self.coefficients_at(sched.k(t)?, sched.sigma(t)?)
    }

    /// Loss weight `λ(σ) = 1 / c_out(σ)²`.
    pub fn loss_weight(&self, sched: &Schedule, t: f64) -> Result<f64> {
        let c = self.coefficients(sched, t)?;
        Ok(1.0 / (c.c_out * c.c_out))
    }
}

/// `mean_l(c_skip·x̃ˡ) + c_out·F`, the output side of the wrapper.
pub fn compose(x_tilde: &ImageBatch, coef: &Coefficients, raw: &ImageBatch) -> Result<ImageBatch> {
    if raw.len_time() != 1 {
        return Err(Error::Shape(format!(
            "raw network must emit one time point, got {}",
            raw.len_time()
        )));
    }
    x_tilde.ensure_slice_compatible(raw, "raw network output")?;
    let mut out = x_tilde.mean_over_time();
    out.as_array_mut()
        .zip_mut_with(raw.as_array(), |d, &f| *d = coef.c_skip * *d + coef.c_out * f);
    Ok(out)
}

/// Wraps a raw network into a denoiser estimate of the clean image.
pub fn denoise<N: RawNetwork + ?Sized>(
    raw_net: &N,
    params: &PreconditionParams,
    sched: &Schedule,
    x_tilde: &ImageBatch,
    t: f64,
    cond: Option<&ImageBatch>,
) -> Result<ImageBatch> {
    if x_tilde.len_time() != params.seq_len {
        return Err(Error::Shape(format!(
            "denoiser expects {} time points, got {}",
            params.seq_len,
            x_tilde.len_time()
        )));
    }
    let coef = params.coefficients(sched, t)?;
    let scaled = x_tilde.map(|v| coef.c_in * v);
    let raw = raw_net.forward(&scaled, coef.c_noise, cond)?;
    compose(x_tilde, &coef, &raw)
}
