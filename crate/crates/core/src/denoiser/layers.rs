//! Building blocks with explicit backward passes. Feature maps are `(C, H, W)`.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{ParamSink, ParamSinkMut, Parameters};

/// Square convolution, stride 1, zero "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out, in · k · k)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub kernel: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize),
}

impl Conv2d {
    /// Fan-in scaled normal init, multiplied by `gain`.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, kernel: usize, gain: f64, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = input * kernel * kernel;
        let scale = gain / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((output, fan_in), || {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Conv2d {
            weight,
            bias: Array1::zeros(output),
            kernel,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            kernel: self.kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let cols = im2col(x, self.kernel);
        let mut y = self.weight.dot(&cols);
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += b;
        }
        let y = y
            .into_shape_with_order((self.out_channels(), h, w))
            .expect("conv output shape");
        (y, ConvCache { cols, in_dim: (c, h, w) })
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient
    /// when requested.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Array3<f64>,
        grad: &mut Conv2d,
        need_input: bool,
    ) -> Option<Array3<f64>> {
        let (_, h, w) = cache.in_dim;
        let dy2 = dy
            .view()
            .into_shape_with_order((self.out_channels(), h * w))
            .expect("conv grad shape");
        grad.weight += &dy2.dot(&cache.cols.t());
        grad.bias += &dy2.sum_axis(Axis(1));
        if need_input {
            let dcols = self.weight.t().dot(&dy2);
            Some(col2im(&dcols, cache.in_dim, self.kernel))
        } else {
            None
        }
    }
}

impl Parameters for Conv2d {
    fn visit(&self, prefix: &str, f: &mut ParamSink<'_>) {
        f(&format!("{prefix}.weight"), self.weight.shape(), self.weight.as_slice().unwrap());
        f(&format!("{prefix}.bias"), self.bias.shape(), self.bias.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamSinkMut<'_>) {
        let shape = self.weight.shape().to_vec();
        f(&format!("{prefix}.weight"), &shape, self.weight.as_slice_mut().unwrap());
        let shape = self.bias.shape().to_vec();
        f(&format!("{prefix}.bias"), &shape, self.bias.as_slice_mut().unwrap());
    }
}

fn im2col(x: ArrayView3<f64>, kernel: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let pad = (kernel / 2) as isize;
    let mut cols = Array2::zeros((c * kernel * kernel, h * w));
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let mut dst = cols.row_mut(row);
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + xx] = plane[[sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, dim: (usize, usize, usize), kernel: usize) -> Array3<f64> {
    let (c, h, w) = dim;
    let pad = (kernel / 2) as isize;
    let mut x = Array3::zeros(dim);
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = cols.row((ci * kernel + ky) * kernel + kx);
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        x[[ci, sy as usize, sx as usize]] += row[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `z · sigmoid(z)`, applied in place; returns the pre-activation for backward.
pub fn silu(z: Array3<f64>) -> (Array3<f64>, Array3<f64>) {
    let y = z.mapv(|v| v * sigmoid(v));
    (y, z)
}

pub fn silu_backward(pre: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dz = dy.clone();
    dz.zip_mut_with(pre, |d, &z| {
        let s = sigmoid(z);
        *d *= s + z * s * (1.0 - s);
    });
    dz
}

/// 2×2 mean pooling.
pub fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, h / 2, w / 2));
    for ci in 0..c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                y[[ci, i, j]] = 0.25
                    * (x[[ci, 2 * i, 2 * j]]
                        + x[[ci, 2 * i + 1, 2 * j]]
                        + x[[ci, 2 * i, 2 * j + 1]]
                        + x[[ci, 2 * i + 1, 2 * j + 1]]);
            }
        }
    }
    y
}

pub fn avg_pool2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = dy.dim();
    let mut dx = Array3::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let g = 0.25 * dy[[ci, i, j]];
                dx[[ci, 2 * i, 2 * j]] = g;
                dx[[ci, 2 * i + 1, 2 * j]] = g;
                dx[[ci, 2 * i, 2 * j + 1]] = g;
                dx[[ci, 2 * i + 1, 2 * j + 1]] = g;
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, i, j)| x[[ci, i / 2, j / 2]])
}

pub fn upsample2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = dy.dim();
    let mut dx = Array3::zeros((c, h / 2, w / 2));
    for ((ci, i, j), &g) in dy.indexed_iter() {
        dx[[ci, i / 2, j / 2]] += g;
    }
    dx
}

/// Adds `weight · c_noise` to every pixel of each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEmbedding {
    pub weight: Array1<f64>,
}

impl NoiseEmbedding {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        NoiseEmbedding {
            weight: Array1::from_shape_simple_fn(channels, || rng.sample::<f64, _>(StandardNormal)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        NoiseEmbedding {
            weight: Array1::zeros(self.weight.raw_dim()),
        }
    }

    pub fn apply(&self, x: &mut Array3<f64>, c_noise: f64) {
        for (mut plane, &w) in x.axis_iter_mut(Axis(0)).zip(self.weight.iter()) {
            plane += w * c_noise;
        }
    }

    pub fn backward(&self, dz: &Array3<f64>, c_noise: f64, grad: &mut NoiseEmbedding) {
        for (g, plane) in grad.weight.iter_mut().zip(dz.axis_iter(Axis(0))) {
            *g += c_noise * plane.sum();
        }
    }
}

impl Parameters for NoiseEmbedding {
    fn visit(&self, prefix: &str, f: &mut ParamSink<'_>) {
        f(&format!("{prefix}.weight"), self.weight.shape(), self.weight.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamSinkMut<'_>) {
        let shape = self.weight.shape().to_vec();
        f(&format!("{prefix}.weight"), &shape, self.weight.as_slice_mut().unwrap());
    }
}

/// Concatenation along channels and its split.
pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

pub fn split_channels(x: &Array3<f64>, first: usize) -> (Array3<f64>, Array3<f64>) {
    (
        x.slice(s![..first, .., ..]).to_owned(),
        x.slice(s![first.., .., ..]).to_owned(),
    )
}

/// One-axis bilinear interpolation taps with half-pixel centers: each output
/// index reads `(i0, i1, w0, w1)` with `w0 + w1 = 1`.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Bilinear resize of each plane of `x` to `(height, width)`.
pub fn bilinear_resize(x: ArrayView3<f64>, height: usize, width: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let ty = bilinear_taps(h, height);
    let tx = bilinear_taps(w, width);
    let mut out = Array3::zeros((c, height, width));
    for ci in 0..c {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                out[[ci, oy, ox]] = wy0 * (wx0 * x[[ci, y0, x0]] + wx1 * x[[ci, y0, x1]])
                    + wy1 * (wx0 * x[[ci, y1, x0]] + wx1 * x[[ci, y1, x1]]);
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`] from `(height, width)` back to `(h, w)`.
pub fn bilinear_resize_backward(dy: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, height, width) = dy.dim();
    let ty = bilinear_taps(h, height);
    let tx = bilinear_taps(w, width);
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = dy[[ci, oy, ox]];
                dx[[ci, y0, x0]] += wy0 * wx0 * g;
                dx[[ci, y0, x1]] += wy0 * wx1 * g;
                dx[[ci, y1, x0]] += wy1 * wx0 * g;
                dx[[ci, y1, x1]] += wy1 * wx1 * g;
            }
        }
    }
    dx
}
