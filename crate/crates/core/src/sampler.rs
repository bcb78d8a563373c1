//! Euler sampling of the backward ODE with optional churn, followed by a
//! mean over time points.

use rand::Rng;

use crate::denoiser::Denoiser;
use crate::diffusion::{ode_rhs, DiffusionState};
use crate::error::{Error, Result};
use crate::schedule::{Schedule, SigmaGrid, DEFAULT_RHO};
use crate::tensor::ImageBatch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Number of Euler steps; the grid has `n_steps + 1` points.
    pub n_steps: usize,
    pub s_churn: f64,
    pub s_tmin: f64,
    pub s_tmax: f64,
    pub s_noise: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_steps: 5,
            s_churn: 1.0,
            s_tmin: 0.0,
            s_tmax: 100.0,
            s_noise: 1.0,
            sigma_min: 0.001,
            sigma_max: 100.0,
            rho: DEFAULT_RHO,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::config("sampler.n_steps", "must be >= 1"));
        }
        if !(self.s_churn.is_finite() && self.s_churn >= 0.0) {
            return Err(Error::config("sampler.s_churn", format!("must be >= 0, got {}", self.s_churn)));
        }
        if !(self.s_noise.is_finite() && self.s_noise > 0.0) {
            return Err(Error::config("sampler.s_noise", format!("must be > 0, got {}", self.s_noise)));
        }
        if !(self.s_tmin >= 0.0 && self.s_tmin <= self.s_tmax) {
            return Err(Error::config(
                "sampler.s_tmin",
                format!("need 0 <= s_tmin <= s_tmax, got {} and {}", self.s_tmin, self.s_tmax),
            ));
        }
        self.grid().map(|_| ())
    }

    /// Descending step times `t_0 = σ_max … t_N = σ_min`.
    pub fn grid(&self) -> Result<SigmaGrid> {
        SigmaGrid::new(self.sigma_min, self.sigma_max, self.n_steps + 1, self.rho)
    }

    /// `S_churn / N` inside `[S_tmin, S_tmax]`, zero elsewhere. No upper cap.
    pub fn gamma(&self, t: f64) -> f64 {
        if self.s_churn > 0.0 && self.s_tmin <= t && t <= self.s_tmax {
            self.s_churn / self.n_steps as f64
        } else {
            0.0
        }
    }
}

/// `x₀ˡ = k(σ_max)·μˡ + σ_max·εˡ` with independent noise per time point.
pub fn init_states<R: Rng + ?Sized>(
    mu: &ImageBatch,
    sched: &Schedule,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<ImageBatch> {
    let [l, c, h, w] = mu.shape();
    let noise = ImageBatch::standard_normal(l, c, h, w, rng);
    init_states_with_noise(mu, sched, cfg.sigma_max, &noise)
}

pub fn init_states_with_noise(mu: &ImageBatch, sched: &Schedule, t_max: f64, noise: &ImageBatch) -> Result<ImageBatch> {
    mu.ensure_same_shape(noise, "initial noise")?;
    let k = sched.k(t_max)?;
    let sigma = sched.sigma(t_max)?;
    let mut x = noise.clone();
    x.as_array_mut()
        .zip_mut_with(mu.as_array(), |e, &m| *e = k * m + sigma * *e);
    Ok(x)
}

/// Lifts `x` from `t` to `t̂ = (1 + γ)t` with caller-supplied noise:
/// `x̂ = x + (k(t̂) − k(t))·μ + sqrt(σ(t̂)² − σ(t)²)·S_noise·ε`.
pub fn churn_with_noise(
    x: &ImageBatch,
    mu: &ImageBatch,
    sched: &Schedule,
    t: f64,
    gamma: f64,
    s_noise: f64,
    noise: &ImageBatch,
) -> Result<(ImageBatch, f64)> {
    x.ensure_same_shape(mu, "churn mean")?;
    x.ensure_same_shape(noise, "churn noise")?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Domain(format!("churn factor must be >= 0, got {gamma}")));
    }
    if gamma == 0.0 {
        return Ok((x.clone(), t));
    }
    let t_hat = (1.0 + gamma) * t;
    let dk = sched.k(t_hat)? - sched.k(t)?;
    let (s_hat, s) = (sched.sigma(t_hat)?, sched.sigma(t)?);
    let radicand = s_hat * s_hat - s * s;
    if !(radicand >= 0.0 && radicand.is_finite()) {
        return Err(Error::Domain(format!("churn variance {radicand} at t = {t}, t_hat = {t_hat}")));
    }
    let amp = radicand.sqrt() * s_noise;
    let mut out = x.clone();
    ndarray::Zip::from(out.as_array_mut())
        .and(mu.as_array())
        .and(noise.as_array())
        .for_each(|o, &m, &e| *o += dk * m + amp * e);
    Ok((out, t_hat))
}

/// [`churn_with_noise`] with fresh standard-normal noise. Draws nothing when
/// `gamma = 0`.
pub fn churn<R: Rng + ?Sized>(
    x: &ImageBatch,
    mu: &ImageBatch,
    sched: &Schedule,
    t: f64,
    gamma: f64,
    s_noise: f64,
    rng: &mut R,
) -> Result<(ImageBatch, f64)> {
    if gamma == 0.0 {
        return Ok((x.clone(), t));
    }
    let [l, c, h, w] = x.shape();
    let noise = ImageBatch::standard_normal(l, c, h, w, rng);
    churn_with_noise(x, mu, sched, t, gamma, s_noise, &noise)
}

/// One row of the optional per-step trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    pub t_hat: f64,
    /// Mean absolute value of the state after the step.
    pub mean_abs: f64,
}

/// Restores one image from the corrupted sequence `mu`.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    mu: &ImageBatch,
    cond: Option<&ImageBatch>,
    sched: &Schedule,
    cfg: &SamplerConfig,
    rng: &mut R,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<ImageBatch> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let times = grid.values();
    let mut x = init_states(mu, sched, cfg, rng)?;
    for i in 0..cfg.n_steps {
        let (t, t_next) = (times[i], times[i + 1]);
        let (x_hat, t_hat) = churn(&x, mu, sched, t, cfg.gamma(t), cfg.s_noise, rng)?;
        let d = denoiser.denoise(&x_hat, mu, cond, t_hat)?;
        let state = DiffusionState::new(x_hat, mu.clone(), t_hat)?;
        let rhs = ode_rhs(&state, &d, sched)?;
        let h = t_next - t_hat;
        x = state.x_tilde;
        x.as_array_mut().zip_mut_with(rhs.as_array(), |xv, &r| *xv += h * r);
        if !x.is_finite() {
            return Err(Error::Numeric {
                step: i,
                context: format!("sampler state diverged between t_hat = {t_hat} and t = {t_next}"),
            });
        }
        if let Some(rows) = trace.as_deref_mut() {
            rows.push(TraceRow {
                step: i,
                t,
                t_hat,
                mean_abs: x.mean_abs(),
            });
        }
    }
    Ok(x.mean_over_time())
}
