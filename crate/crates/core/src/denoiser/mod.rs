//! Raw networks, the analytic Gaussian oracle, and the denoiser interface
//! consumed by the sampler.

pub mod layers;
pub mod params;
pub mod tfsa;
pub mod unet;

pub use params::{NamedTensor, Parameters};
pub use tfsa::{Tfsa, TfsaConfig};
pub use unet::{ConvNet, NetCache, NetworkConfig, NetworkKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precondition::{self, PreconditionParams};
use crate::schedule::Schedule;
use crate::tensor::ImageBatch;

/// The trainable function `F` inside the preconditioning wrapper.
///
/// `inputs` holds the already scaled `c_in·x̃ˡ` for every time point; the
/// output is a single time point with the shape of one input slice.
pub trait RawNetwork {
    fn forward(&self, inputs: &ImageBatch, c_noise: f64, cond: Option<&ImageBatch>) -> Result<ImageBatch>;
}

/// Estimates the clean target from a noisy sequence at time `t`.
pub trait Denoiser {
    fn denoise(
        &self,
        x_tilde: &ImageBatch,
        mu: &ImageBatch,
        cond: Option<&ImageBatch>,
        t: f64,
    ) -> Result<ImageBatch>;
}

/// Emits zeros shaped like one input slice. Useful to isolate the skip path.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNetwork;

impl RawNetwork for ZeroNetwork {
    fn forward(&self, inputs: &ImageBatch, _c_noise: f64, _cond: Option<&ImageBatch>) -> Result<ImageBatch> {
        let (c, h, w) = inputs.slice_dim();
        Ok(ImageBatch::zeros(1, c, h, w))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianOracleParams {
    /// Prior mean of the clean image.
    pub m: f64,
    /// Prior standard deviation of the clean image.
    pub sigma_data: f64,
}

impl GaussianOracleParams {
    pub fn new(m: f64, sigma_data: f64) -> Result<Self> {
        if !(sigma_data.is_finite() && sigma_data > 0.0) {
            return Err(Error::config("oracle.sigma_data", format!("must be > 0, got {sigma_data}")));
        }
        if !m.is_finite() {
            return Err(Error::config("oracle.m", "must be finite"));
        }
        Ok(GaussianOracleParams { m, sigma_data })
    }
}

/// Posterior mean `E[x0 | x̃]` for `x0 ~ N(m, σ_data²)` per pixel and known
/// `μ`:
///
/// ```text
/// D* = m + σ_data² / (σ_data² + σ²/L) · (mean_l(x̃ˡ − k·μˡ) − m)
/// ```
pub fn oracle_denoise(
    p: &GaussianOracleParams,
    x_tilde: &ImageBatch,
    mu: &ImageBatch,
    sched: &Schedule,
    t: f64,
) -> Result<ImageBatch> {
    x_tilde.ensure_same_shape(mu, "corrupted sequence")?;
    let k = sched.k(t)?;
    let sigma = sched.sigma(t)?;
    let l = x_tilde.len_time() as f64;
    let var = p.sigma_data * p.sigma_data;
    let gain = var / (var + sigma * sigma / l);
    let mut residual = x_tilde.clone();
    residual
        .as_array_mut()
        .zip_mut_with(mu.as_array(), |x, &m| *x -= k * m);
    Ok(residual.mean_over_time().map(|y| p.m + gain * (y - p.m)))
}

/// The analytic optimum of the denoising objective for Gaussian targets.
#[derive(Debug, Clone, Copy)]
pub struct GaussianOracle {
    pub params: GaussianOracleParams,
    pub schedule: Schedule,
}

impl Denoiser for GaussianOracle {
    fn denoise(&self, x_tilde: &ImageBatch, mu: &ImageBatch, _cond: Option<&ImageBatch>, t: f64) -> Result<ImageBatch> {
        oracle_denoise(&self.params, x_tilde, mu, &self.schedule, t)
    }
}

/// A raw network wrapped by the preconditioning scalings.
pub struct PreconditionedDenoiser<'a, N: RawNetwork + ?Sized> {
    pub net: &'a N,
    pub params: PreconditionParams,
    pub schedule: Schedule,
}

impl<N: RawNetwork + ?Sized> Denoiser for PreconditionedDenoiser<'_, N> {
    fn denoise(&self, x_tilde: &ImageBatch, _mu: &ImageBatch, cond: Option<&ImageBatch>, t: f64) -> Result<ImageBatch> {
        precondition::denoise(self.net, &self.params, &self.schedule, x_tilde, t, cond)
    }
}
