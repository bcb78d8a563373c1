//! Multi-temporal image stacks with axes (time, channel, height, width).

use ndarray::{s, Array3, Array4, ArrayView3, ArrayViewMut3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A stack of `L` images sharing one `(C, H, W)` shape.
///
/// A `1×1×1×1` batch is a valid scalar, which lets analytic checks run through
/// the same code paths as real images.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch(Array4<f64>);

impl ImageBatch {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.shape().contains(&0) {
            return Err(Error::Shape(format!(
                "image batch axes must be non-empty, got {:?}",
                data.shape()
            )));
        }
        Ok(ImageBatch(data))
    }

    pub fn zeros(len: usize, channels: usize, height: usize, width: usize) -> Self {
        assert!(len * channels * height * width > 0, "empty image batch");
        ImageBatch(Array4::zeros((len, channels, height, width)))
    }

    pub fn filled(len: usize, channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(len * channels * height * width > 0, "empty image batch");
        ImageBatch(Array4::from_elem((len, channels, height, width), value))
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, 1, 1, value)
    }

    /// Standard-normal draws with the given shape.
    pub fn standard_normal<R: Rng + ?Sized>(
        len: usize,
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let data = Array4::from_shape_simple_fn((len, channels, height, width), || {
            rng.sample::<f64, _>(StandardNormal)
        });
        ImageBatch(data)
    }

    /// Stacks single images `(C, H, W)` along a new time axis.
    pub fn stack(slices: &[Array3<f64>]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero slices".into()))?;
        let dim = first.dim();
        let mut out = Array4::zeros((slices.len(), dim.0, dim.1, dim.2));
        for (l, slice) in slices.iter().enumerate() {
            if slice.dim() != dim {
                return Err(Error::Shape(format!(
                    "slice {l} has shape {:?}, expected {:?}",
                    slice.dim(),
                    dim
                )));
            }
            out.index_axis_mut(Axis(0), l).assign(slice);
        }
        Self::new(out)
    }

    pub fn len_time(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    /// `(C, H, W)` of one temporal slice.
    pub fn slice_dim(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.len_time(), self.channels(), self.height(), self.width()]
    }

    pub fn numel(&self) -> usize {
        self.0.len()
    }

    pub fn time_slice(&self, l: usize) -> ArrayView3<'_, f64> {
        self.0.index_axis(Axis(0), l)
    }

    pub fn time_slice_mut(&mut self, l: usize) -> ArrayViewMut3<'_, f64> {
        self.0.index_axis_mut(Axis(0), l)
    }

    /// The first `len` temporal slices.
    pub fn leading(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.len_time() {
            return Err(Error::Shape(format!(
                "cannot take {len} slices from a sequence of {}",
                self.len_time()
            )));
        }
        Ok(ImageBatch(self.0.slice(s![..len, .., .., ..]).to_owned()))
    }

    /// Arithmetic mean over the time axis, as a one-slice batch.
    pub fn mean_over_time(&self) -> Self {
        let mean = self.0.mean_axis(Axis(0)).expect("non-empty time axis");
        ImageBatch(mean.insert_axis(Axis(0)))
    }

    /// Concatenates two batches with equal `L, H, W` along channels.
    pub fn concat_channels(&self, other: &ImageBatch) -> Result<Self> {
        if self.len_time() != other.len_time()
            || self.height() != other.height()
            || self.width() != other.width()
        {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} and {:?} along channels",
                self.shape(),
                other.shape()
            )));
        }
        let joined = ndarray::concatenate(Axis(1), &[self.0.view(), other.0.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(ImageBatch(joined))
    }

    /// Checks that `other` has the same `(C, H, W)` and either the same `L`
    /// or `L = 1`.
    pub fn ensure_slice_compatible(&self, other: &ImageBatch, what: &str) -> Result<()> {
        if self.slice_dim() != other.slice_dim() {
            return Err(Error::Shape(format!(
                "{what}: slice shape {:?} does not match {:?}",
                other.slice_dim(),
                self.slice_dim()
            )));
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &ImageBatch, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: shape {:?} does not match {:?}",
                other.shape(),
                self.shape()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn as_array(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn as_array_mut(&mut self) -> &mut Array4<f64> {
        &mut self.0
    }

    pub fn into_array(self) -> Array4<f64> {
        self.0
    }

    pub fn mean(&self) -> f64 {
        self.0.mean().unwrap_or(0.0)
    }

    pub fn mean_abs(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum::<f64>() / self.numel() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ImageBatch(self.0.mapv(f))
    }
}

impl From<f64> for ImageBatch {
    fn from(value: f64) -> Self {
        ImageBatch::scalar(value)
    }
}
