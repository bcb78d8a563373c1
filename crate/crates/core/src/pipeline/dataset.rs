//! Synthetic cloud-occlusion sequences.
//!
//! Each scene has one clean image and `L` cloudy observations. Clean images
//! are sums of random low-frequency sinusoids normalized to `[0, 1]` per
//! channel. Every observation gets its own soft cloud mask from thresholded,
//! smoothed noise; clouds are bright speckled fields independent of the
//! scene. The auxiliary modality is an edge map of the clean image that
//! clouds attenuate, standing in for a cloud-penetrating sensor.
//!
//! Files: `manifest.toml`, `train/NNNN.emrt`, `test/NNNN.emrt` and PNG
//! previews under `previews/`. Pixel values on disk stay in `[0, 1]`; models
//! work in `2v − 1`.

use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::container::{Container, TensorRecord};
use crate::denoiser::layers::bilinear_resize;
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::ImageBatch;
use crate::trainer::TrainingExample;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_FORMAT: u32 = 1;
const SINUSOIDS: usize = 4;
/// Cell size of the coarse noise grid behind cloud masks.
const CLOUD_CELL: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub seq_len: usize,
    pub cloud_density: f64,
    pub seed: u64,
    pub channels: usize,
    pub aux_channels: usize,
}

impl DatasetSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let d = &cfg.data;
        DatasetSpec {
            n_train: d.n_train,
            n_test: d.n_test,
            height: d.height,
            width: d.width,
            seq_len: d.seq_len,
            cloud_density: d.cloud_density,
            seed: cfg.seed,
            channels: d.channels,
            aux_channels: d.aux_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = crate::denoiser::unet::DOWNSAMPLE;
        if self.n_train == 0 {
            return Err(Error::config("data.n_train", "must be >= 1"));
        }
        if self.height == 0 || !self.height.is_multiple_of(f) {
            return Err(Error::config("data.height", format!("must be a positive multiple of {f}")));
        }
        if self.width == 0 || !self.width.is_multiple_of(f) {
            return Err(Error::config("data.width", format!("must be a positive multiple of {f}")));
        }
        if self.seq_len == 0 {
            return Err(Error::config("data.seq_len", "must be >= 1"));
        }
        if self.channels == 0 {
            return Err(Error::config("data.channels", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.cloud_density) {
            return Err(Error::config("data.cloud_density", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Model-space statistics over the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetStats {
    pub sigma_data: f64,
    pub sigma_mu: f64,
    pub sigma_cov: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub spec: DatasetSpec,
    pub stats: DatasetStats,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Format(format!("manifest: {}", e.message())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Version {
                found: m.format,
                expected: MANIFEST_FORMAT,
            });
        }
        m.spec.validate().map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let st = m.stats;
        if !(st.sigma_data > 0.0 && st.sigma_mu >= 0.0 && [st.sigma_data, st.sigma_mu, st.sigma_cov].iter().all(|v| v.is_finite())) {
            return Err(Error::Format("manifest: invalid statistics".into()));
        }
        Ok(m)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Manifest::parse(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

/// One scene in `[0, 1]` pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `(C, H, W)`
    pub clean: Array3<f64>,
    /// `(L, C, H, W)`
    pub cloudy: Array4<f64>,
    /// `(L, 1, H, W)` cloud opacity.
    pub masks: Array4<f64>,
    /// `(L, A, H, W)`, absent when `A = 0`.
    pub aux: Option<Array4<f64>>,
}

fn record(name: &str, shape: &[usize], values: impl Iterator<Item = f64>) -> Result<TensorRecord> {
    let v: Vec<f64> = values.collect();
    TensorRecord::from_f64(name, shape, &v)
}

fn array3(rec: &TensorRecord) -> Result<Array3<f64>> {
    let shape = rec.shape();
    if shape.len() != 3 {
        return Err(Error::Format(format!("tensor {} must have rank 3", rec.name)));
    }
    Array3::from_shape_vec((shape[0], shape[1], shape[2]), rec.to_f64()).map_err(|e| Error::Format(e.to_string()))
}

fn array4(rec: &TensorRecord) -> Result<Array4<f64>> {
    let shape = rec.shape();
    if shape.len() != 4 {
        return Err(Error::Format(format!("tensor {} must have rank 4", rec.name)));
    }
    Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), rec.to_f64())
        .map_err(|e| Error::Format(e.to_string()))
}

impl Scene {
    pub fn seq_len(&self) -> usize {
        self.cloudy.len_of(Axis(0))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("kind = \"scene\"\n");
        c.push(record("clean", self.clean.shape(), self.clean.iter().copied())?);
        c.push(record("cloudy", self.cloudy.shape(), self.cloudy.iter().copied())?);
        c.push(record("mask", self.masks.shape(), self.masks.iter().copied())?);
        if let Some(aux) = &self.aux {
            c.push(record("aux", aux.shape(), aux.iter().copied())?);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let clean = array3(c.require("clean")?)?;
        let cloudy = array4(c.require("cloudy")?)?;
        let masks = array4(c.require("mask")?)?;
        let aux = c.get("aux").map(array4).transpose()?;
        let (ch, h, w) = clean.dim();
        let l = cloudy.len_of(Axis(0));
        if cloudy.dim() != (l, ch, h, w) || masks.dim() != (l, 1, h, w) {
            return Err(Error::Format("scene tensors disagree in shape".into()));
        }
        if let Some(a) = &aux {
            let (al, _, ah, aw) = a.dim();
            if (al, ah, aw) != (l, h, w) {
                return Err(Error::Format("auxiliary tensor disagrees in shape".into()));
            }
        }
        Ok(Scene {
            clean,
            cloudy,
            masks,
            aux,
        })
    }

    /// Model-space training example over the first `seq_len` observations.
    pub fn to_example(&self, seq_len: usize, use_cloudy: bool, use_aux: bool) -> Result<TrainingExample> {
        let to_model = |v: f64| 2.0 * v - 1.0;
        let (c, h, w) = self.clean.dim();
        let x0 = ImageBatch::new(self.clean.mapv(to_model).into_shape_with_order((1, c, h, w)).expect("shape"))?;
        let mu = ImageBatch::new(self.cloudy.mapv(to_model))?.leading(seq_len)?;
        let mut cond: Option<ImageBatch> = None;
        if use_cloudy {
            cond = Some(mu.clone());
        }
        if use_aux {
            if let Some(aux) = &self.aux {
                let a = ImageBatch::new(aux.mapv(to_model))?.leading(seq_len)?;
                cond = Some(match cond {
                    Some(existing) => existing.concat_channels(&a)?,
                    None => a,
                });
            }
        }
        TrainingExample::new(x0, mu, cond)
    }
}

pub fn scene_path(dir: &Path, split: Split, index: usize) -> PathBuf {
    dir.join(split.name()).join(format!("{index:04}.emrt"))
}

pub fn load_scene(dir: &Path, split: Split, index: usize) -> Result<Scene> {
    Scene::from_container(&Container::read(&scene_path(dir, split, index))?)
}

pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<Scene>> {
    let n = match split {
        Split::Train => manifest.spec.n_train,
        Split::Test => manifest.spec.n_test,
    };
    (0..n).map(|i| load_scene(dir, split, i)).collect()
}

fn smooth_noise<R: Rng + ?Sized>(h: usize, w: usize, cell: usize, rng: &mut R) -> Array3<f64> {
    let gh = h.div_ceil(cell) + 1;
    let gw = w.div_ceil(cell) + 1;
    let coarse = Array3::from_shape_simple_fn((1, gh, gw), || rng.sample::<f64, _>(StandardNormal));
    bilinear_resize(coarse.view(), h, w)
}

fn clean_image<R: Rng + ?Sized>(c: usize, h: usize, w: usize, rng: &mut R) -> Array3<f64> {
    let wave = |rng: &mut R| {
        let amp: f64 = rng.random_range(0.5..1.0);
        let fx: f64 = rng.random_range(-3.0..3.0);
        let fy: f64 = rng.random_range(-3.0..3.0);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        move |i: usize, j: usize| {
            amp * (std::f64::consts::TAU * (fx * j as f64 / w as f64 + fy * i as f64 / h as f64) + phase).sin()
        }
    };
    let shared: Vec<_> = (0..SINUSOIDS).map(|_| wave(rng)).collect();
    let mut img = Array3::zeros((c, h, w));
    for ci in 0..c {
        let own: Vec<_> = (0..SINUSOIDS).map(|_| wave(rng)).collect();
        let mut plane = img.index_axis_mut(Axis(0), ci);
        for ((i, j), v) in plane.indexed_iter_mut() {
            *v = shared.iter().map(|f| f(i, j)).sum::<f64>() + 0.6 * own.iter().map(|f| f(i, j)).sum::<f64>();
        }
        let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            plane.mapv_inplace(|v| (v - lo) / (hi - lo));
        } else {
            plane.fill(0.5);
        }
    }
    img
}

fn cloud_mask<R: Rng + ?Sized>(h: usize, w: usize, density: f64, rng: &mut R) -> Array3<f64> {
    if density <= 0.0 {
        return Array3::zeros((1, h, w));
    }
    if density >= 1.0 {
        return Array3::ones((1, h, w));
    }
    let noise = smooth_noise(h, w, CLOUD_CELL, rng);
    let mut sorted: Vec<f64> = noise.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let idx = (((1.0 - density) * sorted.len() as f64) as usize).min(sorted.len() - 1);
    let threshold = sorted[idx];
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let std = (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / sorted.len() as f64)
        .sqrt()
        .max(1e-12);
    let softness = 0.15 * std;
    noise.mapv(|v| 1.0 / (1.0 + (-(v - threshold) / softness).exp()))
}

/// Gradient magnitude of the channel mean, scaled to `[0, 1]`.
fn edge_map(clean: &Array3<f64>) -> Array3<f64> {
    let (_, h, w) = clean.dim();
    let gray = clean.mean_axis(Axis(0)).expect("channels");
    let mut edges = Array3::zeros((1, h, w));
    for i in 0..h {
        for j in 0..w {
            let gx = gray[[i, (j + 1).min(w - 1)]] - gray[[i, j.saturating_sub(1)]];
            let gy = gray[[(i + 1).min(h - 1), j]] - gray[[i.saturating_sub(1), j]];
            edges[[0, i, j]] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = edges.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        edges.mapv_inplace(|v| v / max);
    }
    edges
}

/// Generates one scene from its own random stream.
pub fn generate_scene(spec: &DatasetSpec, split: Split, index: usize) -> Scene {
    let mut r = rng::stream(spec.seed, &[domain::DATA, split.tag(), index as u64]);
    let (c, h, w, l) = (spec.channels, spec.height, spec.width, spec.seq_len);
    let clean = clean_image(c, h, w, &mut r);
    let edges = edge_map(&clean);
    let mut cloudy = Array4::zeros((l, c, h, w));
    let mut masks = Array4::zeros((l, 1, h, w));
    let mut aux = (spec.aux_channels > 0).then(|| Array4::zeros((l, spec.aux_channels, h, w)));
    for li in 0..l {
        let alpha = cloud_mask(h, w, spec.cloud_density, &mut r);
        let cloud = Array3::from_shape_simple_fn((1, h, w), || 0.8 + 0.2 * r.random::<f64>());
        for ci in 0..c {
            let mut dst = cloudy.slice_mut(s![li, ci, .., ..]);
            ndarray::Zip::from(&mut dst)
                .and(&clean.index_axis(Axis(0), ci))
                .and(&alpha.index_axis(Axis(0), 0))
                .and(&cloud.index_axis(Axis(0), 0))
                .for_each(|m, &x, &a, &v| *m = a * v + (1.0 - a) * x);
        }
        masks.slice_mut(s![li, 0, .., ..]).assign(&alpha.index_axis(Axis(0), 0));
        if let Some(aux) = aux.as_mut() {
            for ai in 0..spec.aux_channels {
                let mut dst = aux.slice_mut(s![li, ai, .., ..]);
                ndarray::Zip::from(&mut dst)
                    .and(&edges.index_axis(Axis(0), 0))
                    .and(&alpha.index_axis(Axis(0), 0))
                    .for_each(|d, &e, &a| *d = (1.0 - a) * e);
            }
        }
    }
    Scene {
        clean,
        cloudy,
        masks,
        aux,
    }
}

/// Centered statistics of model-space targets and observations, pooled over
/// scenes, time points, channels and pixels.
pub fn compute_stats(scenes: &[Scene]) -> DatasetStats {
    let to_model = |v: f64| 2.0 * v - 1.0;
    let (mut n, mut sx, mut sm, mut sxx, mut smm, mut sxm) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for sc in scenes {
        for li in 0..sc.seq_len() {
            let obs = sc.cloudy.index_axis(Axis(0), li);
            for (&x, &m) in sc.clean.iter().zip(obs.iter()) {
                let (x, m) = (to_model(x), to_model(m));
                n += 1.0;
                sx += x;
                sm += m;
                sxx += x * x;
                smm += m * m;
                sxm += x * m;
            }
        }
    }
    let (mx, mm) = (sx / n, sm / n);
    DatasetStats {
        sigma_data: (sxx / n - mx * mx).max(0.0).sqrt(),
        sigma_mu: (smm / n - mm * mm).max(0.0).sqrt(),
        sigma_cov: sxm / n - mx * mm,
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit preview: RGB from the first three channels when
/// available, otherwise grayscale of the first channel.
pub fn write_preview(path: &Path, img: ndarray::ArrayView3<f64>) -> Result<()> {
    let (c, h, w) = img.dim();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let result = if c >= 3 {
        let mut buf = Vec::with_capacity(h * w * 3);
        for i in 0..h {
            for j in 0..w {
                for ci in 0..3 {
                    buf.push(to_u8(img[[ci, i, j]]));
                }
            }
        }
        image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::Rgb8)
    } else {
        let buf: Vec<u8> = img.index_axis(Axis(0), 0).iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::L8)
    };
    result.map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Generates the full dataset into `dir` and returns its manifest.
pub fn gen_data(spec: &DatasetSpec, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let mut train = Vec::with_capacity(spec.n_train);
    for (split, n) in [(Split::Train, spec.n_train), (Split::Test, spec.n_test)] {
        std::fs::create_dir_all(dir.join(split.name())).map_err(|e| Error::io(dir.join(split.name()), e))?;
        for i in 0..n {
            let scene = generate_scene(spec, split, i);
            scene.to_container()?.write(&scene_path(dir, split, i))?;
            let stem = format!("{}_{i:04}", split.name());
            let previews = dir.join("previews");
            write_preview(&previews.join(format!("{stem}_clean.png")), scene.clean.view())?;
            for li in 0..scene.seq_len() {
                write_preview(
                    &previews.join(format!("{stem}_cloudy{li}.png")),
                    scene.cloudy.index_axis(Axis(0), li),
                )?;
            }
            if split == Split::Train {
                train.push(scene);
            }
        }
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        spec: *spec,
        stats: compute_stats(&train),
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_toml_string()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
