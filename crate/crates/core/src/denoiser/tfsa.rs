//! Temporal fusion self-attention and mask-weighted skip fusion.
//!
//! A learnable length-1 query per head attends over the `L` feature vectors
//! at each spatial location. Keys are a linear projection of the features and
//! values are the features themselves, split evenly into one channel group
//! per head. The resulting per-head masks also weight the encoder skip maps
//! after bilinear upsampling to each resolution.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::layers::{bilinear_resize, bilinear_resize_backward};
use super::params::{ParamSink, ParamSinkMut, Parameters};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TfsaConfig {
    pub heads: usize,
    pub key_dim: usize,
    pub channels: usize,
}

impl TfsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.key_dim == 0 {
            return Err(Error::config("network.heads", "heads and key_dim must be >= 1"));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::config(
                "network.heads",
                format!("{} channels are not divisible by {} heads", self.channels, self.heads),
            ));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.channels / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tfsa {
    pub cfg: TfsaConfig,
    /// `(G, d_k)`
    pub query: Array2<f64>,
    /// `(G, C, d_k)`
    pub key_proj: Array3<f64>,
}

/// Per-location intermediate values for backward.
pub struct TfsaCache {
    /// `(P, L, C)` inputs gathered per location.
    inputs: Vec<Array2<f64>>,
    /// `(P, G, L, d_k)`
    keys: Vec<Array3<f64>>,
    /// `(P, G, L)`
    masks: Vec<Array2<f64>>,
    spatial: (usize, usize),
}

impl Tfsa {
    pub fn new<R: Rng + ?Sized>(cfg: TfsaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let query = Array2::from_shape_simple_fn((cfg.heads, cfg.key_dim), || rng.sample::<f64, _>(StandardNormal));
        let scale = 1.0 / (cfg.channels as f64).sqrt();
        let key_proj = Array3::from_shape_simple_fn((cfg.heads, cfg.channels, cfg.key_dim), || {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Ok(Tfsa { cfg, query, key_proj })
    }

    pub fn zeros_like(&self) -> Self {
        Tfsa {
            cfg: self.cfg,
            query: Array2::zeros(self.query.raw_dim()),
            key_proj: Array3::zeros(self.key_proj.raw_dim()),
        }
    }

    /// Keys `(G, L, d_k)` for one location.
    fn keys(&self, x: ArrayView2<f64>) -> Array3<f64> {
        let (l, _) = x.dim();
        let mut keys = Array3::zeros((self.cfg.heads, l, self.cfg.key_dim));
        for g in 0..self.cfg.heads {
            let k = x.dot(&self.key_proj.index_axis(Axis(0), g));
            keys.index_axis_mut(Axis(0), g).assign(&k);
        }
        keys
    }

    /// Attention over one location: `x` is `(L, C)`. Returns the fused `(C)`
    /// vector and the `(G, L)` masks.
    pub fn forward_location(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let (l, c) = x.dim();
        if l == 0 {
            return Err(Error::Shape("attention needs at least one time point".into()));
        }
        if c != self.cfg.channels {
            return Err(Error::Shape(format!("expected {} channels, got {c}", self.cfg.channels)));
        }
        let keys = self.keys(x);
        let masks = self.masks_from_keys(&keys);
        Ok((self.fuse_location(x, &masks), masks))
    }

    fn masks_from_keys(&self, keys: &Array3<f64>) -> Array2<f64> {
        let (g_n, l, _) = keys.dim();
        let inv_sqrt = 1.0 / (self.cfg.key_dim as f64).sqrt();
        let mut masks = Array2::zeros((g_n, l));
        for g in 0..g_n {
            let q = self.query.row(g);
            let scores: Vec<f64> = (0..l)
                .map(|li| q.dot(&keys.slice(ndarray::s![g, li, ..])) * inv_sqrt)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for li in 0..l {
                masks[[g, li]] = exps[li] / total;
            }
        }
        masks
    }

    fn fuse_location(&self, x: ArrayView2<f64>, masks: &Array2<f64>) -> Array1<f64> {
        let (l, c) = x.dim();
        let group = self.cfg.group_size();
        let mut fused = Array1::zeros(c);
        for ch in 0..c {
            let g = ch / group;
            fused[ch] = (0..l).map(|li| masks[[g, li]] * x[[li, ch]]).sum();
        }
        fused
    }

    /// Attention over feature maps `(C, h, w)` per time point. Returns the
    /// fused map and masks `(G, L, h, w)`.
    pub fn forward_maps(&self, features: &[Array3<f64>]) -> Result<(Array3<f64>, Array4<f64>, TfsaCache)> {
        let l = features.len();
        let (c, h, w) = features
            .first()
            .ok_or_else(|| Error::Shape("attention needs at least one time point".into()))?
            .dim();
        let mut fused = Array3::zeros((c, h, w));
        let mut mask_maps = Array4::zeros((self.cfg.heads, l, h, w));
        let mut cache = TfsaCache {
            inputs: Vec::with_capacity(h * w),
            keys: Vec::with_capacity(h * w),
            masks: Vec::with_capacity(h * w),
            spatial: (h, w),
        };
        for i in 0..h {
            for j in 0..w {
                let x = Array2::from_shape_fn((l, c), |(li, ch)| features[li][[ch, i, j]]);
                if x.ncols() != self.cfg.channels {
                    return Err(Error::Shape(format!(
                        "expected {} channels, got {}",
                        self.cfg.channels,
                        x.ncols()
                    )));
                }
                let keys = self.keys(x.view());
                let masks = self.masks_from_keys(&keys);
                let out = self.fuse_location(x.view(), &masks);
                for ch in 0..c {
                    fused[[ch, i, j]] = out[ch];
                }
                for g in 0..self.cfg.heads {
                    for li in 0..l {
                        mask_maps[[g, li, i, j]] = masks[[g, li]];
                    }
                }
                cache.inputs.push(x);
                cache.keys.push(keys);
                cache.masks.push(masks);
            }
        }
        Ok((fused, mask_maps, cache))
    }

    /// Backward through [`Tfsa::forward_maps`]. `d_masks` carries gradients
    /// arriving at the masks from skip fusion.
    pub fn backward_maps(
        &self,
        cache: &TfsaCache,
        d_fused: &Array3<f64>,
        d_masks: &Array4<f64>,
        grad: &mut Tfsa,
    ) -> Vec<Array3<f64>> {
        let (h, w) = cache.spatial;
        let l = cache.masks[0].ncols();
        let c = self.cfg.channels;
        let group = self.cfg.group_size();
        let inv_sqrt = 1.0 / (self.cfg.key_dim as f64).sqrt();
        let mut d_features = vec![Array3::zeros((c, h, w)); l];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let x = &cache.inputs[p];
                let keys = &cache.keys[p];
                let masks = &cache.masks[p];
                let mut dx = Array2::<f64>::zeros((l, c));
                let mut d_mask = Array2::<f64>::zeros((self.cfg.heads, l));
                for g in 0..self.cfg.heads {
                    for li in 0..l {
                        d_mask[[g, li]] = d_masks[[g, li, i, j]];
                    }
                }
                // Value path.
                for ch in 0..c {
                    let g = ch / group;
                    let df = d_fused[[ch, i, j]];
                    for li in 0..l {
                        dx[[li, ch]] += masks[[g, li]] * df;
                        d_mask[[g, li]] += df * x[[li, ch]];
                    }
                }
                // Softmax and score path.
                for g in 0..self.cfg.heads {
                    let inner: f64 = (0..l).map(|li| masks[[g, li]] * d_mask[[g, li]]).sum();
                    let key_proj = self.key_proj.index_axis(Axis(0), g);
                    for li in 0..l {
                        let d_score = masks[[g, li]] * (d_mask[[g, li]] - inner) * inv_sqrt;
                        if d_score == 0.0 {
                            continue;
                        }
                        for kd in 0..self.cfg.key_dim {
                            grad.query[[g, kd]] += d_score * keys[[g, li, kd]];
                            let d_key = d_score * self.query[[g, kd]];
                            for ch in 0..c {
                                grad.key_proj[[g, ch, kd]] += x[[li, ch]] * d_key;
                                dx[[li, ch]] += d_key * key_proj[[ch, kd]];
                            }
                        }
                    }
                }
                for li in 0..l {
                    for ch in 0..c {
                        d_features[li][[ch, i, j]] = dx[[li, ch]];
                    }
                }
            }
        }
        d_features
    }
}

impl Parameters for Tfsa {
    fn visit(&self, prefix: &str, f: &mut ParamSink<'_>) {
        f(&format!("{prefix}.query"), self.query.shape(), self.query.as_slice().unwrap());
        f(&format!("{prefix}.key_proj"), self.key_proj.shape(), self.key_proj.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamSinkMut<'_>) {
        let shape = self.query.shape().to_vec();
        f(&format!("{prefix}.query"), &shape, self.query.as_slice_mut().unwrap());
        let shape = self.key_proj.shape().to_vec();
        f(&format!("{prefix}.key_proj"), &shape, self.key_proj.as_slice_mut().unwrap());
    }
}

/// Upsampled masks kept for the backward pass of [`fuse_skips`].
pub struct FusionCache {
    upsampled: Array4<f64>,
    mask_dim: (usize, usize),
}

/// Bilinearly upsamples `(G, L, h0, w0)` masks to the skip resolution.
pub fn upsample_masks(masks: &Array4<f64>, height: usize, width: usize) -> Array4<f64> {
    let (g_n, l, _, _) = masks.dim();
    let mut out = Array4::zeros((g_n, l, height, width));
    for g in 0..g_n {
        let up = bilinear_resize(masks.index_axis(Axis(0), g), height, width);
        out.index_axis_mut(Axis(0), g).assign(&up);
    }
    out
}

/// Collapses the time axis of skip maps: channel group `g` of the output is
/// `Σ_l bilinear(a_l^g) ⊙ e_l^g`.
pub fn fuse_skips(masks: &Array4<f64>, skips: &[Array3<f64>]) -> Result<(Array3<f64>, FusionCache)> {
    let (g_n, l, h0, w0) = masks.dim();
    if skips.len() != l {
        return Err(Error::Shape(format!("{} skip maps for {l} mask time points", skips.len())));
    }
    let (c, h, w) = skips[0].dim();
    if g_n == 0 || c % g_n != 0 {
        return Err(Error::Shape(format!("{c} skip channels cannot be split across {g_n} heads")));
    }
    if skips.iter().any(|s| s.dim() != (c, h, w)) {
        return Err(Error::Shape("skip maps differ in shape across time".into()));
    }
    let group = c / g_n;
    let up = upsample_masks(masks, h, w);
    let mut out = Array3::zeros((c, h, w));
    for (li, skip) in skips.iter().enumerate() {
        for ch in 0..c {
            let weight = up.slice(ndarray::s![ch / group, li, .., ..]);
            let mut dst = out.index_axis_mut(Axis(0), ch);
            ndarray::Zip::from(&mut dst)
                .and(&weight)
                .and(&skip.index_axis(Axis(0), ch))
                .for_each(|o, &a, &e| *o += a * e);
        }
    }
    Ok((
        out,
        FusionCache {
            upsampled: up,
            mask_dim: (h0, w0),
        },
    ))
}

/// Returns skip gradients per time point and the gradient at the
/// low-resolution masks.
pub fn fuse_skips_backward(
    cache: &FusionCache,
    skips: &[Array3<f64>],
    d_out: &Array3<f64>,
) -> (Vec<Array3<f64>>, Array4<f64>) {
    let (g_n, l, h, w) = cache.upsampled.dim();
    let c = d_out.dim().0;
    let group = c / g_n;
    let mut d_skips = Vec::with_capacity(l);
    let mut d_up = Array4::<f64>::zeros((g_n, l, h, w));
    for (li, skip) in skips.iter().enumerate() {
        let mut ds = Array3::zeros((c, h, w));
        for ch in 0..c {
            let g = ch / group;
            let a = cache.upsampled.slice(ndarray::s![g, li, .., ..]);
            let dout = d_out.index_axis(Axis(0), ch);
            ndarray::Zip::from(&mut ds.index_axis_mut(Axis(0), ch))
                .and(&a)
                .and(&dout)
                .for_each(|d, &av, &g_| *d = av * g_);
            let e = skip.index_axis(Axis(0), ch);
            ndarray::Zip::from(&mut d_up.slice_mut(ndarray::s![g, li, .., ..]))
                .and(&e)
                .and(&dout)
                .for_each(|d, &ev, &g_| *d += ev * g_);
        }
        d_skips.push(ds);
    }
    let (h0, w0) = cache.mask_dim;
    let mut d_masks = Array4::zeros((g_n, l, h0, w0));
    for g in 0..g_n {
        let up = d_up.index_axis(Axis(0), g).to_owned();
        d_masks
            .index_axis_mut(Axis(0), g)
            .assign(&bilinear_resize_backward(&up, h0, w0));
    }
    (d_skips, d_masks)
}
