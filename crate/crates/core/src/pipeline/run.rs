//! The command implementations behind the CLI: train, sample, evaluate.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};

use super::checkpoint::{Checkpoint, CheckpointHeader, Topology};
use super::config::RunConfig;
use super::container::{Container, TensorRecord};
use super::dataset::{load_split, write_preview, Manifest, Scene, Split};
use crate::denoiser::{ConvNet, PreconditionedDenoiser};
use crate::error::{Error, Result};
use crate::metrics::{ImageMetrics, MetricReport};
use crate::precondition::PreconditionParams;
use crate::rng::{self, domain};
use crate::sampler::{sample, TraceRow};
use crate::schedule::Schedule;
use crate::trainer::{fit, EpochRecord, FitHooks, Trainer, TrainingExample};

pub const LAST_CHECKPOINT: &str = "last.emrd";
pub const BEST_CHECKPOINT: &str = "best.emrd";
pub const TRAIN_LOG: &str = "metrics.csv";
pub const SAMPLES_DIR: &str = "samples";
pub const TEST_METRICS: &str = "metrics_test.csv";
pub const BASELINE_METRICS: &str = "baseline_test.csv";

/// Model space `[-1, 1]` back to clamped pixel units.
pub fn to_pixels(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

fn check_data(cfg: &RunConfig, manifest: &Manifest) -> Result<()> {
    let (d, s) = (&cfg.data, &manifest.spec);
    let pairs = [
        ("data.channels", d.channels, s.channels),
        ("data.aux_channels", d.aux_channels, s.aux_channels),
        ("data.height", d.height, s.height),
        ("data.width", d.width, s.width),
        ("data.seq_len", d.seq_len, s.seq_len),
    ];
    for (key, want, have) in pairs {
        if want != have {
            return Err(Error::config(key, format!("config says {want} but the dataset has {have}")));
        }
    }
    Ok(())
}

/// Preconditioning statistics: explicit config values, else the manifest.
pub fn precondition_params(cfg: &RunConfig, manifest: &Manifest) -> Result<PreconditionParams> {
    let p = &cfg.precondition;
    let st = manifest.stats;
    PreconditionParams::new(
        p.sigma_data.unwrap_or(st.sigma_data),
        p.sigma_mu.unwrap_or(st.sigma_mu),
        p.sigma_cov.unwrap_or(st.sigma_cov),
        p.seq_len,
    )
}

fn examples(cfg: &RunConfig, scenes: &[Scene]) -> Result<Vec<TrainingExample>> {
    scenes
        .iter()
        .map(|s| s.to_example(cfg.precondition.seq_len, cfg.network.use_cloudy_cond, cfg.network.use_aux))
        .collect()
}

/// Restores one example; returns the model-space estimate `(C, H, W)`.
pub fn restore(
    net: &ConvNet,
    precondition: PreconditionParams,
    schedule: Schedule,
    cfg: &RunConfig,
    example: &TrainingExample,
    rng_coords: &[u64],
    trace: Option<&mut Vec<TraceRow>>,
) -> Result<Array3<f64>> {
    let denoiser = PreconditionedDenoiser {
        net,
        params: precondition,
        schedule,
    };
    let mut r = rng::stream(cfg.seed, rng_coords);
    let out = sample(
        &denoiser,
        &example.mu,
        example.cond.as_ref(),
        &schedule,
        &cfg.sampler_config(),
        &mut r,
        trace,
    )?;
    Ok(out.time_slice(0).to_owned())
}

struct RunHooks<'a> {
    cfg: &'a RunConfig,
    header: CheckpointHeader,
    val: Vec<(TrainingExample, Array3<f64>)>,
    run_dir: PathBuf,
}

impl FitHooks for RunHooks<'_> {
    fn validate(&mut self, net: &ConvNet) -> Result<f64> {
        let schedule = self.cfg.schedule.build()?;
        let mut total = 0.0;
        for (i, (ex, clean)) in self.val.iter().enumerate() {
            let x = restore(
                net,
                self.header.precondition,
                schedule,
                self.cfg,
                ex,
                &[domain::VALIDATION, i as u64],
                None,
            )?;
            let m = ImageMetrics::compute("val", clean.view(), to_pixels(&x).view())?;
            total += crate::metrics::display_psnr(m.psnr);
        }
        Ok(total / self.val.len() as f64)
    }

    fn on_epoch_end(&mut self, trainer: &Trainer, record: &EpochRecord, improved: bool) -> Result<()> {
        let ck = Checkpoint::new(self.header.clone(), trainer.clone());
        ck.save(&self.run_dir.join(LAST_CHECKPOINT))?;
        if improved {
            ck.save(&self.run_dir.join(BEST_CHECKPOINT))?;
        }
        let path = self.run_dir.join(TRAIN_LOG);
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{},{:.8},{:.6}", record.epoch, record.train_loss, record.val_psnr).map_err(|e| Error::io(&path, e))
    }
}

fn header_for(cfg: &RunConfig, precondition: PreconditionParams) -> CheckpointHeader {
    let net = cfg.network_config();
    CheckpointHeader {
        seed: cfg.seed,
        epoch: 0,
        step: 0,
        optimizer_steps: 0,
        best_val_psnr: f64::NEG_INFINITY,
        schedule: cfg.schedule.clone(),
        precondition,
        network: Topology {
            kind: cfg.network.kind,
            image_channels: net.image_channels,
            cond_channels: net.cond_channels,
            width: net.width,
            heads: net.heads,
            key_dim: net.key_dim,
            use_cloudy_cond: cfg.network.use_cloudy_cond,
            use_aux: cfg.network.use_aux,
        },
    }
}

/// Trains (or resumes) the model described by `cfg`. Writes checkpoints and
/// the per-epoch metrics log into the run directory.
pub fn train(cfg: &RunConfig) -> Result<Vec<EpochRecord>> {
    let data_dir = &cfg.paths.data_dir;
    let run_dir = &cfg.paths.run_dir;
    let manifest = Manifest::read(data_dir)?;
    check_data(cfg, &manifest)?;
    let precondition = precondition_params(cfg, &manifest)?;
    let scenes = load_split(data_dir, &manifest, Split::Train)?;
    let data = examples(cfg, &scenes)?;
    let header = header_for(cfg, precondition);
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;

    let last = run_dir.join(LAST_CHECKPOINT);
    let mut trainer = if cfg.trainer.resume && last.exists() {
        let ck = Checkpoint::load(&last)?;
        let mut expected = header.clone();
        expected.epoch = ck.header.epoch;
        expected.step = ck.header.step;
        expected.optimizer_steps = ck.header.optimizer_steps;
        expected.best_val_psnr = ck.header.best_val_psnr;
        if ck.header != expected {
            return Err(Error::config(
                "trainer.resume",
                format!("{} was written with a different configuration", last.display()),
            ));
        }
        ck.trainer
    } else {
        let net = ConvNet::new(cfg.network_config(), &mut rng::stream(cfg.seed, &[domain::INIT]))?;
        let log = run_dir.join(TRAIN_LOG);
        std::fs::write(&log, "epoch,train_loss,val_psnr\n").map_err(|e| Error::io(&log, e))?;
        Trainer::new(net)
    };
    let n_val = cfg.trainer.val_images.min(scenes.len());
    let val = scenes[..n_val]
        .iter()
        .zip(&data)
        .map(|(s, ex)| (ex.clone(), s.clean.clone()))
        .collect();
    let mut hooks = RunHooks {
        cfg,
        header,
        val,
        run_dir: run_dir.clone(),
    };
    let train_cfg = cfg.train_config(precondition)?;
    fit(&mut trainer, &data, &train_cfg, &mut hooks)
}

/// Path of a restored test image.
pub fn sample_path(run_dir: &Path, index: usize) -> PathBuf {
    run_dir.join(SAMPLES_DIR).join(format!("{index:04}.emrt"))
}

/// Restores every test scene with the best checkpoint (or `checkpoint`).
pub fn sample_test(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<usize> {
    let data_dir = &cfg.paths.data_dir;
    let run_dir = &cfg.paths.run_dir;
    let manifest = Manifest::read(data_dir)?;
    let default_ck = run_dir.join(BEST_CHECKPOINT);
    let ck = Checkpoint::load(checkpoint.unwrap_or(&default_ck))?;
    let h = &ck.header;
    if h.network.image_channels != manifest.spec.channels {
        return Err(Error::config("data.channels", "checkpoint and dataset disagree on channels"));
    }
    let schedule = h.schedule.build()?;
    let scenes = load_split(data_dir, &manifest, Split::Test)?;
    let out_dir = run_dir.join(SAMPLES_DIR);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    for (i, scene) in scenes.iter().enumerate() {
        let ex = scene.to_example(h.precondition.seq_len, h.network.use_cloudy_cond, h.network.use_aux)?;
        let mut rows = Vec::new();
        let trace = cfg.sampler.trace.then_some(&mut rows);
        let x = restore(
            &ck.trainer.net,
            h.precondition,
            schedule,
            cfg,
            &ex,
            &[domain::SAMPLER, i as u64],
            trace,
        )?;
        let pixels = to_pixels(&x);
        let mut c = Container::new("kind = \"restored\"\n");
        c.push(TensorRecord::from_f64("restored", pixels.shape(), pixels.as_slice().expect("contiguous"))?);
        c.write(&sample_path(run_dir, i))?;
        write_preview(&out_dir.join(format!("{i:04}.png")), pixels.view())?;
        if cfg.sampler.trace {
            let mut text = String::from("step,t,t_hat,mean_abs\n");
            for r in &rows {
                let _ = writeln!(text, "{},{},{},{}", r.step, r.t, r.t_hat, r.mean_abs);
            }
            let p = out_dir.join(format!("{i:04}_trace.csv"));
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(scenes.len())
}

pub fn load_restored(run_dir: &Path, index: usize) -> Result<Array3<f64>> {
    let c = Container::read(&sample_path(run_dir, index))?;
    let rec = c.require("restored")?;
    let shape = rec.shape();
    if shape.len() != 3 {
        return Err(Error::Format("restored tensor must have rank 3".into()));
    }
    Array3::from_shape_vec((shape[0], shape[1], shape[2]), rec.to_f64()).map_err(|e| Error::Format(e.to_string()))
}

/// Metrics of the cloudy inputs against the target, averaged over time points.
pub fn cloudy_baseline(name: &str, scene: &Scene) -> Result<ImageMetrics> {
    let l = scene.seq_len();
    let mut acc = ImageMetrics {
        name: name.to_string(),
        psnr: 0.0,
        ssim: 0.0,
        mae: 0.0,
        sam: 0.0,
    };
    for obs in scene.cloudy.axis_iter(Axis(0)) {
        let m = ImageMetrics::compute(name, scene.clean.view(), obs)?;
        acc.psnr += crate::metrics::display_psnr(m.psnr) / l as f64;
        acc.ssim += m.ssim / l as f64;
        acc.mae += m.mae / l as f64;
        acc.sam += m.sam / l as f64;
    }
    Ok(acc)
}

/// Scores restored test images and the cloudy baseline; writes both CSVs.
pub fn evaluate(cfg: &RunConfig) -> Result<(MetricReport, MetricReport)> {
    let data_dir = &cfg.paths.data_dir;
    let run_dir = &cfg.paths.run_dir;
    let manifest = Manifest::read(data_dir)?;
    let scenes = load_split(data_dir, &manifest, Split::Test)?;
    let mut restored = MetricReport::default();
    let mut baseline = MetricReport::default();
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("{i:04}");
        let x = load_restored(run_dir, i)?;
        restored.push(ImageMetrics::compute(name.clone(), scene.clean.view(), x.view())?);
        baseline.push(cloudy_baseline(&name, scene)?);
    }
    for (file, report) in [(TEST_METRICS, &restored), (BASELINE_METRICS, &baseline)] {
        let p = run_dir.join(file);
        std::fs::write(&p, report.to_csv()).map_err(|e| Error::io(&p, e))?;
    }
    Ok((restored, baseline))
}
