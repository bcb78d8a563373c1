//! Forward perturbation, a forward-SDE integrator, and the backward ODE.
//!
//! All quantities live in x̃-space (`x̃ = x / s`) except
//! [`simulate_forward_sde`], which integrates the SDE in x-space.

use ndarray::{Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::Schedule;
use crate::tensor::ImageBatch;

/// A noisy sequence together with the corrupted observations it reverts to.
#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub x_tilde: ImageBatch,
    pub mu: ImageBatch,
    pub t: f64,
}

impl DiffusionState {
    pub fn new(x_tilde: ImageBatch, mu: ImageBatch, t: f64) -> Result<Self> {
        x_tilde.ensure_same_shape(&mu, "diffusion state")?;
        if t.is_nan() || t < 0.0 {
            return Err(Error::Domain(format!("diffusion time must be >= 0, got {t}")));
        }
        Ok(DiffusionState { x_tilde, mu, t })
    }
}

fn ensure_single(batch: &ImageBatch, what: &str) -> Result<()> {
    if batch.len_time() != 1 {
        return Err(Error::Shape(format!(
            "{what} must hold a single time point, got {}",
            batch.len_time()
        )));
    }
    Ok(())
}

/// `x̃ˡ = x0 + k(t)·μˡ + σ(t)·εˡ` with caller-supplied noise.
pub fn perturb_with_noise(
    x0: &ImageBatch,
    mu: &ImageBatch,
    sched: &Schedule,
    t: f64,
    noise: &ImageBatch,
) -> Result<ImageBatch> {
    ensure_single(x0, "clean target")?;
    x0.ensure_slice_compatible(mu, "corrupted sequence")?;
    mu.ensure_same_shape(noise, "perturbation noise")?;
    let k = sched.k(t)?;
    let sigma = sched.sigma(t)?;
    let clean = x0.time_slice(0);
    let mut out = mu.clone();
    for (mut slot, eps) in out
        .as_array_mut()
        .axis_iter_mut(Axis(0))
        .zip(noise.as_array().axis_iter(Axis(0)))
    {
        Zip::from(&mut slot)
            .and(&clean)
            .and(&eps)
            .for_each(|m, &x, &e| *m = x + k * *m + sigma * e);
    }
    Ok(out)
}

/// Perturbs every time point with its own standard-normal draw.
pub fn perturb<R: Rng + ?Sized>(
    x0: &ImageBatch,
    mu: &ImageBatch,
    sched: &Schedule,
    t: f64,
    rng: &mut R,
) -> Result<ImageBatch> {
    let [l, c, h, w] = mu.shape();
    let noise = ImageBatch::standard_normal(l, c, h, w, rng);
    perturb_with_noise(x0, mu, sched, t, &noise)
}

/// Whether [`simulate_forward_sde`] includes the Brownian term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffusionTerm {
    On,
    Off,
}

/// Euler–Maruyama integration of `dx = f(t)(x − μ)dt + g(t)dω` from 0 to
/// `t_end` in x-space. Each element is an independent path.
///
/// This is a reference integrator for checking the closed-form kernel; it is
/// not used for training or sampling.
pub fn simulate_forward_sde<R: Rng + ?Sized>(
    x0: &ImageBatch,
    mu: &ImageBatch,
    sched: &Schedule,
    t_end: f64,
    steps: usize,
    term: DiffusionTerm,
    rng: &mut R,
) -> Result<ImageBatch> {
    if steps == 0 {
        return Err(Error::config("steps", "need at least one integration step"));
    }
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(Error::Domain(format!("t_end must be > 0, got {t_end}")));
    }
    x0.ensure_same_shape(mu, "SDE mean")?;
    let dt = t_end / steps as f64;
    let sqrt_dt = dt.sqrt();
    let mut x = x0.clone();
    for step in 0..steps {
        let t = step as f64 * dt;
        let (f, g) = sched.drift_diffusion(t)?;
        let g = match term {
            DiffusionTerm::On => g,
            DiffusionTerm::Off => 0.0,
        };
        Zip::from(x.as_array_mut())
            .and(mu.as_array())
            .for_each(|xv, &m| {
                let dw = if g != 0.0 {
                    sqrt_dt * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                *xv += f * (*xv - m) * dt + g * dw;
            });
        if !x.is_finite() {
            return Err(Error::Numeric {
                step,
                context: format!("forward SDE state at t = {t}"),
            });
        }
    }
    Ok(x)
}

fn broadcast_single<'a>(
    target: &ImageBatch,
    single: &'a ImageBatch,
    what: &str,
) -> Result<ndarray::ArrayView3<'a, f64>> {
    ensure_single(single, what)?;
    target.ensure_slice_compatible(single, what)?;
    Ok(single.time_slice(0))
}

/// Right-hand side of the backward ODE for every time point:
/// `dx̃ˡ/dt = −(ṡ/s²)·μˡ − (σ̇/σ)·(D + k·μˡ − x̃ˡ)`.
pub fn ode_rhs(state: &DiffusionState, denoised: &ImageBatch, sched: &Schedule) -> Result<ImageBatch> {
    let t = state.t;
    let sigma = sched.sigma(t)?;
    if sigma <= 0.0 {
        return Err(Error::Domain(format!("backward ODE is singular at t = {t}")));
    }
    let d = broadcast_single(&state.x_tilde, denoised, "denoised estimate")?;
    let mean_coef = sched.mean_drift(t)?;
    let k = sched.k(t)?;
    let ratio = sched.sigma_dot(t)? / sigma;
    let mut out = state.mu.clone();
    for (mut slot, xt) in out
        .as_array_mut()
        .axis_iter_mut(Axis(0))
        .zip(state.x_tilde.as_array().axis_iter(Axis(0)))
    {
        Zip::from(&mut slot)
            .and(&xt)
            .and(&d)
            .for_each(|m, &x, &dv| *m = mean_coef * *m - ratio * (dv + k * *m - x));
    }
    Ok(out)
}

/// Score of the x̃ marginal recovered from a denoiser output:
/// `(D + k·μ − x̃) / σ²`.
pub fn score_from_denoiser(
    x_tilde: &ImageBatch,
    denoised: &ImageBatch,
    mu: &ImageBatch,
    sched: &Schedule,
    t: f64,
) -> Result<ImageBatch> {
    let sigma = sched.sigma(t)?;
    if sigma <= 0.0 {
        return Err(Error::Domain(format!("score is undefined at t = {t}")));
    }
    x_tilde.ensure_same_shape(mu, "corrupted sequence")?;
    let d = broadcast_single(x_tilde, denoised, "denoised estimate")?;
    let k = sched.k(t)?;
    let inv_var = 1.0 / (sigma * sigma);
    let mut out = mu.clone();
    for (mut slot, xt) in out
        .as_array_mut()
        .axis_iter_mut(Axis(0))
        .zip(x_tilde.as_array().axis_iter(Axis(0)))
    {
        Zip::from(&mut slot)
            .and(&xt)
            .and(&d)
            .for_each(|m, &x, &dv| *m = (dv + k * *m - x) * inv_var);
    }
    Ok(out)
}
