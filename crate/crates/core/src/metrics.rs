//! SSIM and PSNR on unit-interval RGB images.
//!
//! SSIM uses an 11×11 Gaussian window with σ = 1.5, evaluated only where the
//! window fits inside the image (a 22×22 map for 32×32 inputs), with
//! `C₁ = 0.01²` and `C₂ = 0.03²` for a dynamic range of 1. Each RGB channel
//! is scored separately and the three scores are averaged.

use serde::{Deserialize, Serialize};

use crate::dataset::{ImageF, SIDE};
use crate::error::{Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub psnr_db: f64,
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; WINDOW] {
    let mut taps = [0.0; WINDOW];
    let mid = (WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *t = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Valid-mode separable filtering of a `w×h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|k| taps[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, taps: &[f64; WINDOW]) -> f64 {
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(a, w, h, taps);
    let mu_b = filter_valid(b, w, h, taps);
    let aa = filter_valid(&prod(&|x, _| x * x), w, h, taps);
    let bb = filter_valid(&prod(&|_, y| y * y), w, h, taps);
    let ab = filter_valid(&prod(&|x, y| x * y), w, h, taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
            / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    total / n as f64
}

/// SSIM of two interleaved RGB images of any size of at least 11×11.
pub fn ssim_rgb(a: &[f32], b: &[f32], width: usize, height: usize) -> Result<f64> {
    let expected = width * height * 3;
    if a.len() != expected || b.len() != expected {
        return Err(Error::ShapeMismatch {
            expected: format!("{expected} values ({width}x{height}x3)"),
            got: format!("{} and {}", a.len(), b.len()),
        });
    }
    if width < WINDOW || height < WINDOW {
        return Err(Error::ShapeMismatch {
            expected: format!("at least {WINDOW}x{WINDOW}"),
            got: format!("{width}x{height}"),
        });
    }
    let taps = gaussian_taps();
    let mut score = 0.0;
    for ch in 0..3 {
        let pa: Vec<f64> = a.iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
        score += ssim_plane(&pa, &pb, width, height, &taps);
    }
    Ok((score / 3.0).clamp(-1.0, 1.0))
}

pub fn ssim(a: &ImageF, b: &ImageF) -> f64 {
    ssim_rgb(a.pixels(), b.pixels(), SIDE, SIDE).expect("fixed 32x32 shapes")
}

pub fn mse_rgb(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values", a.len()),
            got: format!("{} values", b.len()),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64)
}

/// `10·log10(1 / mse)`; `+∞` for identical inputs.
pub fn psnr_rgb(a: &[f32], b: &[f32]) -> Result<f64> {
    let mse = mse_rgb(a, b)?;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

pub fn psnr(a: &ImageF, b: &ImageF) -> f64 {
    psnr_rgb(a.pixels(), b.pixels()).expect("fixed shapes")
}

pub fn report(a: &ImageF, b: &ImageF) -> MetricReport {
    MetricReport {
        ssim: ssim(a, b),
        psnr_db: psnr(a, b),
    }
}

/// Mean and population standard deviation of SSIM plus mean PSNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
}

pub fn aggregate_reports(reports: &[MetricReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = reports.len() as f64;
    let ssim_mean = reports.iter().map(|r| r.ssim).sum::<f64>() / n;
    let var = reports.iter().map(|r| (r.ssim - ssim_mean).powi(2)).sum::<f64>() / n;
    let psnr_mean = reports.iter().map(|r| r.psnr_db).sum::<f64>() / n;
    Ok(Aggregate {
        ssim_mean,
        ssim_std: var.sqrt(),
        psnr_mean,
    })
}

pub fn aggregate(pairs: &[(ImageF, ImageF)]) -> Result<Aggregate> {
    let reports: Vec<MetricReport> = pairs.iter().map(|(a, b)| report(a, b)).collect();
    aggregate_reports(&reports)
}
