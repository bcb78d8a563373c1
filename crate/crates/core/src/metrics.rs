//! Restoration metrics on `(C, H, W)` images scaled to `[0, 1]`.

use std::fmt::Write as _;

use ndarray::{s, ArrayView3, Zip};

use crate::error::{Error, Result};

/// PSNR values above this are reported as this value.
pub const PSNR_DISPLAY_CAP: f64 = 99.0;

/// Side of the non-overlapping SSIM windows.
pub const SSIM_WINDOW: usize = 8;

fn same_shape(y: &ArrayView3<f64>, y_hat: &ArrayView3<f64>) -> Result<()> {
    if y.dim() != y_hat.dim() {
        return Err(Error::Shape(format!("metric inputs {:?} vs {:?}", y.dim(), y_hat.dim())));
    }
    if y.is_empty() {
        return Err(Error::Shape("metric inputs are empty".into()));
    }
    Ok(())
}

pub fn rmse(y: ArrayView3<f64>, y_hat: ArrayView3<f64>) -> Result<f64> {
    same_shape(&y, &y_hat)?;
    let mut sse = 0.0;
    Zip::from(&y).and(&y_hat).for_each(|a, b| sse += (a - b) * (a - b));
    Ok((sse / y.len() as f64).sqrt())
}

/// `20·log10(peak / RMSE)`; `+∞` for identical images.
pub fn psnr(y: ArrayView3<f64>, y_hat: ArrayView3<f64>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Domain(format!("peak must be > 0, got {peak}")));
    }
    let e = rmse(y, y_hat)?;
    Ok(if e == 0.0 { f64::INFINITY } else { 20.0 * (peak / e).log10() })
}

pub fn display_psnr(value: f64) -> f64 {
    value.min(PSNR_DISPLAY_CAP)
}

/// SSIM of one window pair from its raw pixel lists.
fn ssim_window(a: &[f64], b: &[f64], c1: f64, c2: f64) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Mean SSIM over non-overlapping `window × window` tiles and channels.
/// Trailing rows/columns that do not fill a tile are skipped; images smaller
/// than one tile use a single global window per channel.
pub fn ssim_with(y: ArrayView3<f64>, y_hat: ArrayView3<f64>, c1: f64, c2: f64, window: usize) -> Result<f64> {
    same_shape(&y, &y_hat)?;
    if window == 0 {
        return Err(Error::Domain("SSIM window must be >= 1".into()));
    }
    let (c, h, w) = y.dim();
    let (wh, ww) = if h < window || w < window { (h, w) } else { (window, window) };
    let mut total = 0.0;
    let mut count = 0usize;
    for ci in 0..c {
        for i in (0..=h - wh).step_by(wh) {
            for j in (0..=w - ww).step_by(ww) {
                let a: Vec<f64> = y.slice(s![ci, i..i + wh, j..j + ww]).iter().copied().collect();
                let b: Vec<f64> = y_hat.slice(s![ci, i..i + wh, j..j + ww]).iter().copied().collect();
                total += ssim_window(&a, &b, c1, c2);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// SSIM with the standard stabilizers `c1 = (0.01·peak)²`, `c2 = (0.03·peak)²`.
pub fn ssim(y: ArrayView3<f64>, y_hat: ArrayView3<f64>, peak: f64) -> Result<f64> {
    ssim_with(y, y_hat, (0.01 * peak).powi(2), (0.03 * peak).powi(2), SSIM_WINDOW)
}

pub fn mae(y: ArrayView3<f64>, y_hat: ArrayView3<f64>) -> Result<f64> {
    same_shape(&y, &y_hat)?;
    let mut acc = 0.0;
    Zip::from(&y).and(&y_hat).for_each(|a, b| acc += (a - b).abs());
    Ok(acc / y.len() as f64)
}

/// Spectral angle between the flattened images, in radians.
pub fn sam(y: ArrayView3<f64>, y_hat: ArrayView3<f64>) -> Result<f64> {
    same_shape(&y, &y_hat)?;
    let (mut dot, mut ny, mut nh) = (0.0, 0.0, 0.0);
    Zip::from(&y).and(&y_hat).for_each(|a, b| {
        dot += a * b;
        ny += a * a;
        nh += b * b;
    });
    if ny == 0.0 || nh == 0.0 {
        return Err(Error::Domain("spectral angle of a zero image".into()));
    }
    Ok((dot / (ny.sqrt() * nh.sqrt())).clamp(-1.0, 1.0).acos())
}

/// Metrics of one restored image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    /// Uncapped; may be `+∞`.
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub sam: f64,
}

impl ImageMetrics {
    pub fn compute(name: impl Into<String>, y: ArrayView3<f64>, y_hat: ArrayView3<f64>) -> Result<Self> {
        Ok(ImageMetrics {
            name: name.into(),
            psnr: psnr(y, y_hat, 1.0)?,
            ssim: ssim(y, y_hat, 1.0)?,
            mae: mae(y, y_hat)?,
            sam: sam(y, y_hat)?,
        })
    }
}

/// Per-image metrics plus their means (PSNR averaged after capping).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub sam: f64,
}

impl MetricReport {
    pub fn push(&mut self, m: ImageMetrics) {
        self.images.push(m);
    }

    pub fn summary(&self) -> MetricSummary {
        let n = self.images.len();
        let mean = |f: &dyn Fn(&ImageMetrics) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                self.images.iter().map(f).sum::<f64>() / n as f64
            }
        };
        MetricSummary {
            count: n,
            psnr: mean(&|m| display_psnr(m.psnr)),
            ssim: mean(&|m| m.ssim),
            mae: mean(&|m| m.mae),
            sam: mean(&|m| m.sam),
        }
    }

    /// `name,psnr,ssim,mae,sam` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,psnr,ssim,mae,sam\n");
        for m in &self.images {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                m.name,
                display_psnr(m.psnr),
                m.ssim,
                m.mae,
                m.sam
            );
        }
        let s = self.summary();
        let _ = writeln!(out, "mean,{:.6},{:.6},{:.6},{:.6}", s.psnr, s.ssim, s.mae, s.sam);
        out
    }
}

impl std::fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "images {}  psnr {:.3} dB  ssim {:.4}  mae {:.4}  sam {:.4} rad",
            self.count, self.psnr, self.ssim, self.mae, self.sam
        )
    }
}
