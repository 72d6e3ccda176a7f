//! Patch-grid densification: tile the image into fixed-size patches, fill
//! texture-poor patches (too few keypoints) with stratified jittered samples,
//! assign depths from the sensor or the nearest depth-bearing keypoint, and
//! back-project everything into initialized Gaussian primitives.

use nalgebra::{Quaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::{CameraPose, PinholeIntrinsics};
use crate::frame::{DepthImage, RgbFrame};
use crate::gaussian::{color_to_sh, GaussianPrimitive, EPS_SCALE};
use crate::io::KeypointRecord;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

#[derive(Debug, Clone)]
pub struct PatchGridConfig {
    /// Square patch edge, pixels.
    pub patch_size: u32,
    /// Patches with fewer keypoints than this receive samples.
    pub min_keypoints_per_patch: usize,
    pub samples_per_patch: usize,
    pub rng_seed: u64,
}

impl Default for PatchGridConfig {
    fn default() -> Self {
        Self { patch_size: 32, min_keypoints_per_patch: 2, samples_per_patch: 4, rng_seed: 0 }
    }
}

/// One patch rectangle; edge patches may be smaller than `patch_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointSource {
    Keypoint,
    PgSample,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledPoint {
    pub u: f64,
    pub v: f64,
    /// Meters; `None` until depth assignment.
    pub depth: Option<f64>,
    pub source: PointSource,
}

/// Tiles the image exactly: ceil(w/p) × ceil(h/p) patches in row-major order.
pub fn partition_patches(
    width: u32,
    height: u32,
    cfg: &PatchGridConfig,
) -> Result<Vec<PatchRect>, SampleError> {
    if width == 0 || height == 0 {
        return Err(SampleError::InvalidArgument("image dimensions must be positive"));
    }
    if cfg.patch_size < 4 {
        return Err(SampleError::InvalidArgument("patch_size must be at least 4"));
    }
    let p = cfg.patch_size;
    let mut patches = Vec::with_capacity((width.div_ceil(p) * height.div_ceil(p)) as usize);
    for y0 in (0..height).step_by(p as usize) {
        for x0 in (0..width).step_by(p as usize) {
            patches.push(PatchRect {
                x0,
                y0,
                width: p.min(width - x0),
                height: p.min(height - y0),
            });
        }
    }
    Ok(patches)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Fills patches whose keypoint count is below the threshold with exactly
/// `samples_per_patch` stratified jittered samples; all keypoints pass
/// through unchanged first. Deterministic for a fixed seed: each patch draws
/// from its own derived RNG stream.
pub fn sample_sparse_patches(
    keypoints: &[KeypointRecord],
    patches: &[PatchRect],
    cfg: &PatchGridConfig,
) -> Vec<SampledPoint> {
    let mut counts = vec![0usize; patches.len()];
    let cols = patches.iter().filter(|p| p.y0 == 0).count().max(1);
    for kp in keypoints {
        let px = (kp.u / cfg.patch_size as f64).floor() as usize;
        let py = (kp.v / cfg.patch_size as f64).floor() as usize;
        let idx = py * cols + px;
        if let Some(c) = counts.get_mut(idx) {
            *c += 1;
        }
    }

    let mut points: Vec<SampledPoint> = keypoints
        .iter()
        .map(|kp| SampledPoint {
            u: kp.u,
            v: kp.v,
            depth: kp.depth.filter(|d| d.is_finite() && *d > 0.0),
            source: PointSource::Keypoint,
        })
        .collect();

    let grid = (cfg.samples_per_patch as f64).sqrt().ceil() as u32;
    for (idx, (patch, &count)) in patches.iter().zip(&counts).enumerate() {
        if count >= cfg.min_keypoints_per_patch {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.rng_seed ^ (idx as u64)));
        let cell_w = patch.width as f64 / grid as f64;
        let cell_h = patch.height as f64 / grid as f64;
        for k in 0..cfg.samples_per_patch {
            let (cx, cy) = (k as u32 % grid, k as u32 / grid);
            let u = patch.x0 as f64 + (cx as f64 + rng.gen_range(0.0..1.0)) * cell_w;
            let v = patch.y0 as f64 + (cy as f64 + rng.gen_range(0.0..1.0)) * cell_h;
            points.push(SampledPoint { u, v, depth: None, source: PointSource::PgSample });
        }
    }
    points
}

/// Resolves a point's depth: an already-assigned depth is kept; otherwise the
/// depth image at the rounded pixel wins when finite; otherwise the
/// pixel-space nearest keypoint with finite depth (ties broken by lowest
/// keypoint index). `None` when no source exists — the caller counts skips.
pub fn assign_depth(
    point: &SampledPoint,
    depth_image: Option<&DepthImage>,
    keypoints: &[KeypointRecord],
) -> Option<SampledPoint> {
    if let Some(d) = point.depth {
        if d.is_finite() && d > 0.0 {
            return Some(*point);
        }
    }
    if let Some(img) = depth_image {
        let x = (point.u.round().max(0.0) as u32).min(img.width - 1);
        let y = (point.v.round().max(0.0) as u32).min(img.height - 1);
        let d = img.get(x, y);
        if d.is_finite() && d > 0.0 {
            return Some(SampledPoint { depth: Some(d), ..*point });
        }
    }
    let mut best: Option<(f64, f64)> = None; // (distance², depth)
    for kp in keypoints {
        let Some(d) = kp.depth.filter(|d| d.is_finite() && *d > 0.0) else { continue };
        let dist2 = (kp.u - point.u).powi(2) + (kp.v - point.v).powi(2);
        if best.is_none_or(|(b, _)| dist2 < b) {
            best = Some((dist2, d));
        }
    }
    best.map(|(_, d)| SampledPoint { depth: Some(d), ..*point })
}

/// Back-projects depth-assigned points into world-frame primitives: identity
/// rotation, isotropic scale from the mean 3-nearest-neighbor distance
/// (clamped to [ε_scale, 0.5 m]), opacity 0.5, color from the RGB pixel.
/// Returns the primitives (indices 0..n) and the number of skipped points.
pub fn initialize_primitives(
    points: &[SampledPoint],
    pose: &CameraPose,
    intrinsics: &PinholeIntrinsics,
    rgb: &RgbFrame,
) -> (Vec<GaussianPrimitive>, usize) {
    const MAX_SCALE: f64 = 0.5;

    let mut skipped = 0usize;
    let mut kept: Vec<(&SampledPoint, Vector3<f64>)> = Vec::with_capacity(points.len());
    for point in points {
        let Some(depth) = point.depth.filter(|d| d.is_finite() && *d > 0.0) else {
            skipped += 1;
            continue;
        };
        let p_cam = intrinsics.unproject(point.u, point.v, depth);
        kept.push((point, pose.camera_to_world(&p_cam)));
    }

    let scales: Vec<f64> = kept
        .iter()
        .enumerate()
        .map(|(i, (_, mean))| {
            let mut nearest = [f64::INFINITY; 3];
            for (j, (_, other)) in kept.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (mean - other).norm();
                if d < nearest[2] {
                    nearest[2] = d;
                    nearest.sort_by(|a, b| a.partial_cmp(b).unwrap());
                }
            }
            let finite: Vec<f64> = nearest.iter().copied().filter(|d| d.is_finite()).collect();
            if finite.is_empty() {
                MAX_SCALE
            } else {
                (finite.iter().sum::<f64>() / finite.len() as f64).clamp(EPS_SCALE, MAX_SCALE)
            }
        })
        .collect();

    let primitives = kept
        .iter()
        .zip(&scales)
        .enumerate()
        .map(|(idx, ((point, mean), &scale))| {
            let x = (point.u.round().max(0.0) as u32).min(rgb.width - 1);
            let y = (point.v.round().max(0.0) as u32).min(rgb.height - 1);
            let color = color_to_sh(Vector3::from(rgb.pixel(x, y)));
            let mut p = GaussianPrimitive::new(
                *mean,
                Quaternion::new(1.0, 0.0, 0.0, 0.0),
                Vector3::new(scale, scale, scale),
                0.5,
                color,
                0.0,
                0,
            )
            .expect("finite inputs yield a valid primitive");
            p.insertion_index = idx as u64;
            p
        })
        .collect();
    (primitives, skipped)
}
