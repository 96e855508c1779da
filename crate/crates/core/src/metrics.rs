//! Full-reference PSNR and SSIM for images in `[0,1]`.

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Plane};

/// PSNR returned for identical images (and the ceiling for all others).
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mse = a.clamped(0.0, 1.0).mse(&b.clamped(0.0, 1.0))?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx);
        }
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

fn ssim_planes(a: &Plane, b: &Plane) -> f64 {
    let window = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (h, w) = (a.height(), a.width());
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut mu_a, mut mu_b, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let g = window[dy * SSIM_WINDOW + dx];
                    let i = (y0 + dy) * w + x0 + dx;
                    let (va, vb) = (ad[i], bd[i]);
                    mu_a += g * va;
                    mu_b += g * vb;
                    saa += g * (va * va);
                    sbb += g * (vb * vb);
                    sab += g * (va * vb);
                }
            }
            let var_a = saa - mu_a * mu_a;
            let var_b = sbb - mu_b * mu_b;
            let cov = sab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

/// Mean SSIM over all valid 11×11 Gaussian windows (σ = 1.5) on luminance.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    let la = a.clamped(0.0, 1.0).luminance();
    let lb = b.clamped(0.0, 1.0).luminance();
    Ok(ssim_planes(&la, &lb))
}

pub fn evaluate(a: &ImageTensor, b: &ImageTensor) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
    })
}
