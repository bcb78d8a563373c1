//! Denoiser training: log-normal noise levels, independent perturbation of
//! every time point around a single target, the weighted squared error, and
//! a momentum-free adaptive optimizer.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::denoiser::{params, ConvNet, Denoiser, Parameters};
use crate::diffusion::perturb;
use crate::error::{Error, Result};
use crate::precondition::{compose, PreconditionParams};
use crate::rng::{self, domain};
use crate::schedule::Schedule;
use crate::tensor::ImageBatch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Mean of `ln σ`.
    pub p_mean: f64,
    /// Standard deviation of `ln σ`.
    pub p_std: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub seed: u64,
    pub precondition: PreconditionParams,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            p_mean: -1.2,
            p_std: 1.2,
            batch_size: 8,
            epochs: 10,
            learning_rate: 1e-4,
            grad_clip: 1.0,
            seed: 0,
            precondition: PreconditionParams::default(),
            schedule: Schedule::MeanReverting { alpha: 1.0 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_std.is_finite() && self.p_std > 0.0) {
            return Err(Error::config("trainer.p_std", format!("must be > 0, got {}", self.p_std)));
        }
        if !self.p_mean.is_finite() {
            return Err(Error::config("trainer.p_mean", "must be finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("trainer.batch_size", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(
                "trainer.learning_rate",
                format!("must be > 0, got {}", self.learning_rate),
            ));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(Error::config("trainer.grad_clip", format!("must be > 0, got {}", self.grad_clip)));
        }
        self.precondition.validate()
    }

    /// Draws `σ` with `ln σ ~ N(p_mean, p_std²)`.
    pub fn sample_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Normal::new(self.p_mean, self.p_std)
            .expect("validated std")
            .sample(rng)
            .exp()
    }
}

/// One training sequence: the clean target, its `L` corrupted observations
/// and optional per-slice conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub x0: ImageBatch,
    pub mu: ImageBatch,
    pub cond: Option<ImageBatch>,
}

impl TrainingExample {
    pub fn new(x0: ImageBatch, mu: ImageBatch, cond: Option<ImageBatch>) -> Result<Self> {
        if x0.len_time() != 1 {
            return Err(Error::Shape("training target must be a single image".into()));
        }
        x0.ensure_slice_compatible(&mu, "corrupted sequence")?;
        if let Some(c) = &cond {
            if c.len_time() != mu.len_time() || c.height() != mu.height() || c.width() != mu.width() {
                return Err(Error::Shape(format!(
                    "conditioning shape {:?} does not match sequence {:?}",
                    c.shape(),
                    mu.shape()
                )));
            }
        }
        Ok(TrainingExample { x0, mu, cond })
    }
}

/// `λ · mean((D − x0)²)`.
pub fn weighted_loss(denoised: &ImageBatch, x0: &ImageBatch, lambda: f64) -> Result<f64> {
    denoised.ensure_same_shape(x0, "training target")?;
    let n = x0.numel() as f64;
    let sse: f64 = denoised
        .as_array()
        .iter()
        .zip(x0.as_array().iter())
        .map(|(d, x)| (d - x) * (d - x))
        .sum();
    Ok(lambda * sse / n)
}

/// The training loss of an arbitrary denoiser on one example at noise level
/// `sigma`, without any update. Used to check loss floors.
pub fn denoiser_loss<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    example: &TrainingExample,
    cfg: &TrainConfig,
    sigma: f64,
    rng: &mut R,
) -> Result<f64> {
    let t = sigma;
    let x_tilde = perturb(&example.x0, &example.mu, &cfg.schedule, t, rng)?;
    let d = denoiser.denoise(&x_tilde, &example.mu, example.cond.as_ref(), t)?;
    weighted_loss(&d, &example.x0, cfg.precondition.loss_weight(&cfg.schedule, t)?)
}

/// Momentum-free adaptive steps: a running mean of squared gradients with
/// bias correction scales each coordinate, after global-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub steps: u64,
    /// Second-moment estimates in parameter order.
    pub second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new<P: Parameters + ?Sized>(params: &P) -> Self {
        let mut second_moment = Vec::new();
        params.visit("", &mut |_, _, v| second_moment.push(vec![0.0; v.len()]));
        Optimizer {
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            second_moment,
        }
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    /// Parameters and state are rounded to `f32` afterwards.
    pub fn update<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P, lr: f64, clip: f64) -> f64 {
        let mut flat = Vec::new();
        grads.visit("", &mut |_, _, v| flat.push(v.to_vec()));
        assert_eq!(flat.len(), self.second_moment.len(), "gradient layout");
        let norm = flat.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if norm > clip { clip / norm } else { 1.0 };
        self.steps += 1;
        let correction = 1.0 - self.beta2.powi(self.steps.min(i32::MAX as u64) as i32);
        let (beta2, eps) = (self.beta2, self.eps);
        let mut idx = 0;
        let state = &mut self.second_moment;
        params.visit_mut("", &mut |_, _, values| {
            let g = &flat[idx];
            let v = &mut state[idx];
            for ((p, &gi), vi) in values.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                let gi = gi * scale;
                *vi = (beta2 * *vi + (1.0 - beta2) * gi * gi) as f32 as f64;
                let v_hat = *vi / correction;
                *p = (*p - lr * gi / (v_hat.sqrt() + eps)) as f32 as f64;
            }
            idx += 1;
        });
        norm
    }
}

/// Forward, loss, backward and update over one mini-batch. Returns the mean
/// weighted loss.
pub fn train_step<R: Rng + ?Sized>(
    net: &mut ConvNet,
    optimizer: &mut Optimizer,
    batch: &[&TrainingExample],
    cfg: &TrainConfig,
    step: u64,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Shape("empty training batch".into()));
    }
    let mut grad = net.zeros_like();
    let mut total = 0.0;
    let b = batch.len() as f64;
    for (i, ex) in batch.iter().enumerate() {
        if ex.mu.len_time() != cfg.precondition.seq_len {
            return Err(Error::Shape(format!(
                "sequence length {} does not match precondition.seq_len = {}",
                ex.mu.len_time(),
                cfg.precondition.seq_len
            )));
        }
        let t = cfg.sample_sigma(rng);
        let x_tilde = perturb(&ex.x0, &ex.mu, &cfg.schedule, t, rng)?;
        let coef = cfg.precondition.coefficients(&cfg.schedule, t)?;
        let lambda = 1.0 / (coef.c_out * coef.c_out);
        let scaled = x_tilde.map(|v| coef.c_in * v);
        let (raw, cache) = net.forward_train(&scaled, coef.c_noise, ex.cond.as_ref())?;
        let d = compose(&x_tilde, &coef, &raw)?;
        let loss = weighted_loss(&d, &ex.x0, lambda)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                step: step as usize,
                context: format!("training loss {loss} at sigma = {t}, batch index {i}"),
            });
        }
        total += loss;
        // d(λ·mean(D − x0)²)/dF = 2λ·c_out·(D − x0)/n, averaged over the batch.
        let n = ex.x0.numel() as f64;
        let factor = 2.0 * lambda * coef.c_out / (n * b);
        let mut d_out = d;
        d_out
            .as_array_mut()
            .zip_mut_with(ex.x0.as_array(), |dv, &x| *dv = factor * (*dv - x));
        net.backward(&cache, &d_out, &mut grad);
    }
    let norm = optimizer.update(net, &grad, cfg.learning_rate, cfg.grad_clip);
    if !norm.is_finite() {
        return Err(Error::Numeric {
            step: step as usize,
            context: "gradient norm is not finite".into(),
        });
    }
    Ok(total / b)
}

/// Network, optimizer and progress counters: everything a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub net: ConvNet,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    /// Best validation PSNR seen so far.
    pub best_val_psnr: f64,
}

impl Trainer {
    pub fn new(net: ConvNet) -> Self {
        let optimizer = Optimizer::new(&net);
        Trainer {
            net,
            optimizer,
            epoch: 0,
            step: 0,
            best_val_psnr: f64::NEG_INFINITY,
        }
    }

    /// Runs one epoch of shuffled mini-batches and returns the mean loss.
    pub fn run_epoch(&mut self, data: &[TrainingExample], cfg: &TrainConfig) -> Result<f64> {
        self.run_steps(data, cfg, usize::MAX)
    }

    /// Like [`Trainer::run_epoch`] but stops after `max_steps` batches; the
    /// epoch counter only advances when the epoch completes.
    pub fn run_steps(&mut self, data: &[TrainingExample], cfg: &TrainConfig, max_steps: usize) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Shape("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[domain::SHUFFLE, self.epoch as u64]));
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size).take(max_steps) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &data[i]).collect();
            let mut r = rng::stream(cfg.seed, &[domain::TRAIN_SAMPLE, self.step]);
            let loss = train_step(&mut self.net, &mut self.optimizer, &batch, cfg, self.step, &mut r)?;
            self.step += 1;
            losses.push(loss);
        }
        if losses.len() == order.len().div_ceil(cfg.batch_size) {
            self.epoch += 1;
        }
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Named tensors of the optimizer state, for checkpoints.
    pub fn optimizer_tensors(&self) -> Vec<params::NamedTensor> {
        let mut out = Vec::new();
        let mut idx = 0;
        self.net.visit("", &mut |name, shape, _| {
            out.push(params::NamedTensor {
                name: format!("optimizer.v{name}"),
                shape: shape.to_vec(),
                values: self.optimizer.second_moment[idx].clone(),
            });
            idx += 1;
        });
        out
    }

    /// Restores optimizer state written by [`Trainer::optimizer_tensors`].
    pub fn load_optimizer_tensors(&mut self, tensors: &[params::NamedTensor], steps: u64) -> Result<()> {
        let mut state = Vec::new();
        let mut problem = None;
        self.net.visit("", &mut |name, shape, _| {
            let key = format!("optimizer.v{name}");
            match tensors.iter().find(|t| t.name == key) {
                Some(t) if t.shape == shape => state.push(t.values.clone()),
                _ => {
                    problem.get_or_insert(key);
                }
            }
        });
        if let Some(key) = problem {
            return Err(Error::Format(format!("optimizer tensor {key} missing or misshapen")));
        }
        self.optimizer.second_moment = state;
        self.optimizer.steps = steps;
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_psnr: f64,
}

/// Validation and persistence callbacks used by [`fit`].
pub trait FitHooks {
    fn validate(&mut self, net: &ConvNet) -> Result<f64>;
    /// Called after every epoch; `improved` marks a new best validation PSNR.
    fn on_epoch_end(&mut self, trainer: &Trainer, record: &EpochRecord, improved: bool) -> Result<()>;
}

/// Trains until `cfg.epochs` epochs have completed, resuming from
/// `trainer.epoch`.
pub fn fit(
    trainer: &mut Trainer,
    data: &[TrainingExample],
    cfg: &TrainConfig,
    hooks: &mut dyn FitHooks,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let mut records = Vec::new();
    while trainer.epoch < cfg.epochs {
        let train_loss = trainer.run_epoch(data, cfg)?;
        let val_psnr = hooks.validate(&trainer.net)?;
        let improved = val_psnr > trainer.best_val_psnr;
        if improved {
            trainer.best_val_psnr = val_psnr;
        }
        let record = EpochRecord {
            epoch: trainer.epoch,
            train_loss,
            val_psnr,
        };
        hooks.on_epoch_end(trainer, &record, improved)?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{GaussianOracle, GaussianOracleParams, NetworkConfig, NetworkKind};
    use approx::assert_relative_eq;

    fn tiny_net(seed: u64, l: usize) -> ConvNet {
        let cfg = NetworkConfig {
            kind: if l == 1 { NetworkKind::Mono } else { NetworkKind::Multi },
            image_channels: 1,
            cond_channels: 1,
            width: 4,
            heads: 2,
            key_dim: 2,
        };
        ConvNet::new(cfg, &mut rng::stream(seed, &[domain::INIT])).unwrap()
    }

    fn toy_data(n: usize, l: usize) -> Vec<TrainingExample> {
        let mut r = rng::stream(5, &[domain::DATA]);
        (0..n)
            .map(|_| {
                let x0 = ImageBatch::standard_normal(1, 1, 8, 8, &mut r).map(|v| 0.5 * v);
                let mut mu = ImageBatch::zeros(l, 1, 8, 8);
                for li in 0..l {
                    let noise = ImageBatch::standard_normal(1, 1, 8, 8, &mut r);
                    let mut slot = mu.time_slice_mut(li);
                    slot.assign(&x0.time_slice(0));
                    slot.zip_mut_with(&noise.time_slice(0), |m, &e| *m += 0.3 * e);
                }
                TrainingExample::new(x0, mu.clone(), Some(mu)).unwrap()
            })
            .collect()
    }

    fn cfg(l: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            learning_rate: 2e-3,
            seed: 17,
            precondition: PreconditionParams::new(0.5, 0.55, 0.25, l).unwrap(),
            schedule: Schedule::mean_reverting(1.0).unwrap(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sigma_distribution_moments() {
        let c = TrainConfig::default();
        let mut r = rng::stream(1, &[]);
        let logs: Vec<f64> = (0..100_000).map(|_| c.sample_sigma(&mut r).ln()).collect();
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let std = (logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - c.p_mean).abs() < 0.01 * c.p_mean.abs());
        assert!((std - c.p_std).abs() < 0.01 * c.p_std);
    }

    #[test]
    fn oracle_loss_floor_is_one_for_the_generative_reduction() {
        let sd = 0.6;
        let c = TrainConfig {
            precondition: PreconditionParams::generative(sd, 1).unwrap(),
            schedule: Schedule::Generative,
            ..TrainConfig::default()
        };
        let oracle = GaussianOracle {
            params: GaussianOracleParams::new(0.1, sd).unwrap(),
            schedule: Schedule::Generative,
        };
        let mut r = rng::stream(2, &[]);
        for sigma in [0.05, 0.5, 5.0, 50.0] {
            let x0 = ImageBatch::standard_normal(1, 1, 400, 500, &mut r).map(|v| 0.1 + sd * v);
            let ex = TrainingExample::new(x0, ImageBatch::zeros(1, 1, 400, 500), None).unwrap();
            let loss = denoiser_loss(&oracle, &ex, &c, sigma, &mut r).unwrap();
            assert!((loss - 1.0).abs() < 0.01, "sigma {sigma}: {loss}");
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = toy_data(8, 2);
        let c = cfg(2);
        let run = || {
            let mut t = Trainer::new(tiny_net(3, 2));
            let mut losses = Vec::new();
            for _ in 0..5 {
                losses.push(t.run_epoch(&data, &c).unwrap());
            }
            (losses, t.net)
        };
        let (a, na) = run();
        let (b, nb) = run();
        assert_eq!(a, b);
        assert_eq!(na, nb);
    }

    #[test]
    fn parameters_stay_f32_representable() {
        let data = toy_data(4, 1);
        let mut t = Trainer::new(tiny_net(4, 1));
        t.run_epoch(&data, &cfg(1)).unwrap();
        for tensor in params::collect(&t.net) {
            assert!(tensor.values.iter().all(|&v| v == v as f32 as f64));
        }
        assert!(t.optimizer.second_moment.iter().flatten().all(|&v| v == v as f32 as f64));
    }

    #[test]
    fn loss_decreases_on_the_toy_task() {
        let data = toy_data(16, 1);
        let c = cfg(1);
        let mut t = Trainer::new(tiny_net(6, 1));
        let first = t.run_steps(&data, &c, 1).unwrap();
        t.epoch = 0;
        let mut early = 0.0;
        let mut late = 0.0;
        for e in 0..50 {
            let loss = t.run_epoch(&data, &c).unwrap();
            if e < 5 {
                early += loss;
            }
            if e >= 45 {
                late += loss;
            }
        }
        assert!(late < early, "late {late} vs early {early} (first {first})");
    }

    #[test]
    fn optimizer_clips_large_gradients() {
        let net = tiny_net(7, 1);
        let mut p = net.clone();
        let mut g = net.zeros_like();
        g.visit_mut("", &mut |_, _, v| v.iter_mut().for_each(|x| *x = 1e6));
        let mut opt = Optimizer::new(&p);
        let norm = opt.update(&mut p, &g, 1e-3, 1.0);
        assert!(norm > 1e6);
        // Every coordinate moves by at most lr / (1 − β2)^{1/2}-corrected ≈ lr.
        let before = params::collect(&net);
        let after = params::collect(&p);
        for (a, b) in before.iter().zip(after.iter()) {
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                assert!((x - y).abs() <= 1.01e-3);
            }
        }
    }

    #[test]
    fn sequence_length_must_match() {
        let data = toy_data(2, 2);
        let mut t = Trainer::new(tiny_net(8, 2));
        let err = t.run_epoch(&data, &cfg(3)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn weighted_loss_hand_example() {
        let d = ImageBatch::scalar(1.5);
        let x = ImageBatch::scalar(0.5);
        assert_relative_eq!(weighted_loss(&d, &x, 2.0).unwrap(), 2.0);
    }
}
