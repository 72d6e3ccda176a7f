//! Image quality metrics and the forward evaluation loss.

use crate::frame::{DepthImage, RgbFrame};
use crate::gaussian::SplatMap;

use super::{RenderError, RenderedFrame};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01; // (0.01·L)², L = 1
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_sizes(a: &RgbFrame, b: &RgbFrame) -> Result<(), RenderError> {
    if a.width != b.width || a.height != b.height {
        return Err(RenderError::SizeMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for images in [0, 1]; capped at 100 dB.
pub fn psnr(a: &RgbFrame, b: &RgbFrame) -> Result<f64, RenderError> {
    check_sizes(a, b)?;
    let n = a.data().len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse < 1e-10 {
        return Ok(100.0);
    }
    Ok(-10.0 * mse.log10())
}

fn gaussian_window() -> [[f64; SSIM_WINDOW]; SSIM_WINDOW] {
    let mut w = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            *v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            sum += *v;
        }
    }
    for row in w.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    w
}

/// Structural similarity over 11×11 Gaussian windows (σ = 1.5), averaged
/// over all fully interior window positions and the three channels.
pub fn ssim(a: &RgbFrame, b: &RgbFrame) -> Result<f64, RenderError> {
    check_sizes(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(RenderError::InvalidArgument("image smaller than the SSIM window"));
    }
    let window = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for channel in 0..3 {
        let at = |img: &RgbFrame, x: usize, y: usize| img.data()[(y * w + x) * 3 + channel];
        for cy in half..h - half {
            for cx in half..w - half {
                let (mut mu_a, mut mu_b) = (0.0, 0.0);
                let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
                for (i, row) in window.iter().enumerate() {
                    let y = cy + i - half;
                    for (j, &wv) in row.iter().enumerate() {
                        let x = cx + j - half;
                        let va = at(a, x, y);
                        let vb = at(b, x, y);
                        mu_a += wv * va;
                        mu_b += wv * vb;
                        aa += wv * va * va;
                        bb += wv * vb * vb;
                        ab += wv * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let val = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
                total += val;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Terms of the evaluation loss.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean absolute color difference.
    pub l1: f64,
    /// SSIM value (not the loss term).
    pub ssim: f64,
    /// Mean absolute deviation of each primitive's scales from their mean.
    pub iso: f64,
}

/// total = (1−λ)·L1 + λ·(1−SSIM) + λ_iso·iso.
///
/// The isotropy term averages, over primitives, the mean absolute deviation
/// of the scale components from the primitive's own mean scale.
pub fn loss(
    rendered: &RgbFrame,
    ground_truth: &RgbFrame,
    map: &SplatMap,
    lambda: f64,
    lambda_iso: f64,
) -> Result<LossBreakdown, RenderError> {
    check_sizes(rendered, ground_truth)?;
    let n = rendered.data().len() as f64;
    let l1: f64 = rendered
        .data()
        .iter()
        .zip(ground_truth.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n;
    let ssim_value = ssim(rendered, ground_truth)?;
    let iso = if map.is_empty() {
        0.0
    } else {
        map.primitives()
            .iter()
            .map(|p| {
                let mean = (p.scale.x + p.scale.y + p.scale.z) / 3.0;
                ((p.scale.x - mean).abs() + (p.scale.y - mean).abs() + (p.scale.z - mean).abs())
                    / 3.0
            })
            .sum::<f64>()
            / map.len() as f64
    };
    Ok(LossBreakdown {
        total: (1.0 - lambda) * l1 + lambda * (1.0 - ssim_value) + lambda_iso * iso,
        l1,
        ssim: ssim_value,
        iso,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DepthLoss {
    pub value: f64,
    /// Pixels that entered the mean; 0 means the value is a warning-level 0.
    pub valid_pixels: usize,
}

/// Mean absolute depth error over pixels with finite ground truth that the
/// render substantially covered (transmittance < 0.5).
pub fn depth_loss(rendered: &RenderedFrame, ground_truth: &DepthImage) -> Result<DepthLoss, RenderError> {
    if rendered.depth.width != ground_truth.width || rendered.depth.height != ground_truth.height {
        return Err(RenderError::SizeMismatch(
            rendered.depth.width,
            rendered.depth.height,
            ground_truth.width,
            ground_truth.height,
        ));
    }
    let mut sum = 0.0;
    let mut valid = 0usize;
    for (i, (&d_r, &d_gt)) in rendered.depth.data().iter().zip(ground_truth.data()).enumerate() {
        if d_gt.is_finite() && rendered.transmittance[i] < 0.5 {
            sum += (d_r - d_gt).abs();
            valid += 1;
        }
    }
    Ok(DepthLoss {
        value: if valid == 0 { 0.0 } else { sum / valid as f64 },
        valid_pixels: valid,
    })
}
