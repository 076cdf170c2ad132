//! Full-reference image quality: RMSE, PSNR and SSIM for images in `[0, 1]`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn rmse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape("rmse", a, b)?;
    let ss: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum();
    Ok((ss / a.numel() as f64).sqrt())
}

/// `20·log10(1 / rmse)`, capped at [`PSNR_CAP`].
pub fn psnr_from_rmse(rmse: f64) -> f64 {
    if rmse <= 0.0 {
        PSNR_CAP
    } else {
        (20.0 * (1.0 / rmse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    rmse(a, b).map(psnr_from_rmse)
}

fn luminance(img: &Tensor<f32>) -> Result<(usize, usize, Vec<f64>)> {
    let Some((h, w, c)) = img.hwc() else {
        return Err(Error::shape("ssim", format!("expected (H, W, C), got {:?}", img.shape())));
    };
    let lum = img.data().chunks_exact(c).map(|p| p.iter().map(|&v| f64::from(v)).sum::<f64>() / c as f64).collect();
    Ok((h, w, lum))
}

fn window_1d() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of an `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = k.iter().enumerate().map(|(t, kv)| kv * src[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = k.iter().enumerate().map(|(t, kv)| kv * rows[(y + t) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM of the channel-mean luminance over all fully contained windows.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (h, w, x) = luminance(a)?;
    let (_, _, y) = luminance(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::arg("ssim", format!("{h}×{w} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")));
    }
    let k = window_1d();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let mxx = filter_valid(&prod(&x, &x), h, w, &k);
    let myy = filter_valid(&prod(&y, &y), h, w, &k);
    let mxy = filter_valid(&prod(&x, &y), h, w, &k);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cxy) = (mxx[i] - ux * ux, myy[i] - uy * uy, mxy[i] - ux * uy);
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairMetrics {
    pub name: String,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl PairMetrics {
    pub fn compute(name: impl Into<String>, pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<Self> {
        let r = rmse(pred, gt)?;
        Ok(PairMetrics { name: name.into(), rmse: r, psnr: psnr_from_rmse(r), ssim: ssim(pred, gt)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub count: usize,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-pair values plus their arithmetic means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub pairs: Vec<PairMetrics>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn new(pairs: Vec<PairMetrics>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Dataset("no image pairs to evaluate".into()));
        }
        let n = pairs.len() as f64;
        let mean = |f: fn(&PairMetrics) -> f64| pairs.iter().map(f).sum::<f64>() / n;
        let aggregate = Aggregate { count: pairs.len(), rmse: mean(|p| p.rmse), psnr: mean(|p| p.psnr), ssim: mean(|p| p.ssim) };
        Ok(MetricsReport { pairs, aggregate })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data serializes");
        s.push('\n');
        s
    }
}
