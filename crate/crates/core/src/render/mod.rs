//! CPU forward splatting: perspective projection of 3D Gaussians to screen
//! space and tile-binned front-to-back alpha blending of color and depth.
//!
//! Per pixel, splats sorted by camera depth contribute
//! α_i = opacity_i · exp(−½ Δᵀ Σ_I⁻¹ Δ) composited as
//! C = Σ c_i α_i Π_{j<i}(1 − α_j); depth blends the same way. Blending for a
//! splat is restricted to its 3σ screen-space bounding box.

mod metrics;
mod naive;

pub use metrics::{depth_loss, loss, psnr, ssim, DepthLoss, LossBreakdown};
pub use naive::naive_rasterize;

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{CameraPose, PinholeIntrinsics};
use crate::frame::{DepthImage, RgbFrame};
use crate::gaussian::{sh_to_color, GaussianPrimitive, SplatMap};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("image size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(u32, u32, u32, u32),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

/// Isotropic dilation added to every screen covariance, pixels².
pub const COV_DILATION: f64 = 0.3;
/// Upper clamp on per-splat alpha.
pub const ALPHA_MAX: f64 = 0.99;
/// Near-plane used by [`rasterize`].
pub const DEFAULT_NEAR: f64 = 0.01;
/// Compositing stops once remaining transmittance drops below this.
pub const TRANSMITTANCE_STOP: f64 = 1e-4;

const TILE: u32 = 16;

/// A primitive projected into image space.
#[derive(Debug, Clone)]
pub struct ProjectedSplat {
    /// Mean in pixel coordinates.
    pub pixel_mean: Vector2<f64>,
    /// 2×2 screen covariance, already dilated by [`COV_DILATION`].
    pub screen_cov: Matrix2<f64>,
    /// Camera-space depth, meters.
    pub depth: f64,
    pub opacity: f64,
    /// View-independent RGB in [0, 1].
    pub rgb: Vector3<f64>,
}

/// Projects one primitive; `None` when it lies at or behind the near plane.
pub fn project(
    primitive: &GaussianPrimitive,
    pose: &CameraPose,
    intrinsics: &PinholeIntrinsics,
    near: f64,
) -> Option<ProjectedSplat> {
    let p_cam = pose.world_to_camera(&primitive.mean);
    if p_cam.z <= near {
        return None;
    }
    let pixel_mean = intrinsics.project(&p_cam);
    let j = intrinsics.jacobian(&p_cam);
    let jw = j * pose.rotation();
    let screen_cov =
        jw * primitive.covariance().matrix() * jw.transpose() + Matrix2::identity() * COV_DILATION;
    Some(ProjectedSplat {
        pixel_mean,
        screen_cov,
        depth: p_cam.z,
        opacity: primitive.opacity,
        rgb: sh_to_color(primitive.color),
    })
}

/// Per-pixel color, depth and remaining transmittance of one render.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub color: RgbFrame,
    /// Alpha-blended depth; 0 where nothing was hit.
    pub depth: DepthImage,
    /// Remaining transmittance per pixel, 1 where nothing was hit.
    pub transmittance: Vec<f64>,
}

pub(crate) struct PreparedSplat {
    pub mean: Vector2<f64>,
    pub inv_cov: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub rgb: Vector3<f64>,
    /// Continuous 3σ bounding box [x0, x1, y0, y1] in pixel coordinates.
    pub bbox: [f64; 4],
}

/// Projects, culls and depth-sorts the whole map. Splats with a singular
/// screen covariance (impossible after dilation, kept as a guard) or a
/// footprint entirely off the image are dropped.
pub(crate) fn prepare_splats(
    map: &SplatMap,
    pose: &CameraPose,
    intrinsics: &PinholeIntrinsics,
) -> Vec<PreparedSplat> {
    let width = intrinsics.width as f64;
    let height = intrinsics.height as f64;
    let mut prepared: Vec<PreparedSplat> = map
        .primitives()
        .iter()
        .filter_map(|p| project(p, pose, intrinsics, DEFAULT_NEAR))
        .filter_map(|s| {
            let det = s.screen_cov[(0, 0)] * s.screen_cov[(1, 1)]
                - s.screen_cov[(0, 1)] * s.screen_cov[(1, 0)];
            if det <= 0.0 || !det.is_finite() {
                return None;
            }
            let inv_cov = Matrix2::new(
                s.screen_cov[(1, 1)], -s.screen_cov[(0, 1)],
                -s.screen_cov[(1, 0)], s.screen_cov[(0, 0)],
            ) / det;
            let rx = 3.0 * s.screen_cov[(0, 0)].sqrt();
            let ry = 3.0 * s.screen_cov[(1, 1)].sqrt();
            let bbox = [
                s.pixel_mean.x - rx,
                s.pixel_mean.x + rx,
                s.pixel_mean.y - ry,
                s.pixel_mean.y + ry,
            ];
            if bbox[1] < 0.0 || bbox[0] > width || bbox[3] < 0.0 || bbox[2] > height {
                return None;
            }
            Some(PreparedSplat {
                mean: s.pixel_mean,
                inv_cov,
                depth: s.depth,
                opacity: s.opacity,
                rgb: s.rgb,
                bbox,
            })
        })
        .collect();
    prepared.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap());
    prepared
}

/// Composites one splat onto a pixel with center (cx, cy); returns false when
/// the pixel center lies outside the splat's bounding box.
#[inline]
pub(crate) fn composite(
    splat: &PreparedSplat,
    cx: f64,
    cy: f64,
    rgb: &mut [f64; 3],
    depth: &mut f64,
    transmittance: &mut f64,
) -> bool {
    if cx < splat.bbox[0] || cx > splat.bbox[1] || cy < splat.bbox[2] || cy > splat.bbox[3] {
        return false;
    }
    let d = Vector2::new(cx - splat.mean.x, cy - splat.mean.y);
    let q = d.dot(&(splat.inv_cov * d));
    let alpha = (splat.opacity * (-0.5 * q).exp()).min(ALPHA_MAX);
    let weight = *transmittance * alpha;
    rgb[0] += weight * splat.rgb.x;
    rgb[1] += weight * splat.rgb.y;
    rgb[2] += weight * splat.rgb.z;
    *depth += weight * splat.depth;
    *transmittance *= 1.0 - alpha;
    true
}

/// Renders the map with 16×16 tile binning. Tiles run in parallel; the
/// result matches a per-pixel loop over all splats.
pub fn rasterize(
    map: &SplatMap,
    pose: &CameraPose,
    intrinsics: &PinholeIntrinsics,
) -> RenderedFrame {
    let (width, height) = (intrinsics.width, intrinsics.height);
    let splats = prepare_splats(map, pose, intrinsics);

    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for (idx, splat) in splats.iter().enumerate() {
        // integer range of pixels whose centers px + 0.5 can fall in the bbox
        let px0 = (splat.bbox[0] - 0.5).ceil().max(0.0) as u32;
        let px1 = (splat.bbox[1] - 0.5).floor().min((width - 1) as f64);
        let py0 = (splat.bbox[2] - 0.5).ceil().max(0.0) as u32;
        let py1 = (splat.bbox[3] - 0.5).floor().min((height - 1) as f64);
        if px1 < 0.0 || py1 < 0.0 || px0 as f64 > px1 || py0 as f64 > py1 {
            continue;
        }
        let (px1, py1) = (px1 as u32, py1 as u32);
        for ty in (py0 / TILE)..=(py1 / TILE) {
            for tx in (px0 / TILE)..=(px1 / TILE) {
                tile_lists[(ty * tiles_x + tx) as usize].push(idx as u32);
            }
        }
    }

    struct TileResult {
        tx: u32,
        ty: u32,
        rgb: Vec<[f64; 3]>,
        depth: Vec<f64>,
        transmittance: Vec<f64>,
    }

    let results: Vec<TileResult> = tile_lists
        .par_iter()
        .enumerate()
        .map(|(tile_idx, list)| {
            let tx = tile_idx as u32 % tiles_x;
            let ty = tile_idx as u32 / tiles_x;
            let x0 = tx * TILE;
            let y0 = ty * TILE;
            let tw = TILE.min(width - x0);
            let th = TILE.min(height - y0);
            let mut rgb = vec![[0.0; 3]; (tw * th) as usize];
            let mut depth = vec![0.0; (tw * th) as usize];
            let mut transmittance = vec![1.0; (tw * th) as usize];
            for ly in 0..th {
                for lx in 0..tw {
                    let cx = (x0 + lx) as f64 + 0.5;
                    let cy = (y0 + ly) as f64 + 0.5;
                    let i = (ly * tw + lx) as usize;
                    for &splat_idx in list {
                        composite(
                            &splats[splat_idx as usize],
                            cx,
                            cy,
                            &mut rgb[i],
                            &mut depth[i],
                            &mut transmittance[i],
                        );
                        if transmittance[i] < TRANSMITTANCE_STOP {
                            break;
                        }
                    }
                }
            }
            TileResult { tx, ty, rgb, depth, transmittance }
        })
        .collect();

    let mut color = RgbFrame::new(width, height);
    let mut depth = vec![0.0; (width * height) as usize];
    let mut transmittance = vec![1.0; (width * height) as usize];
    for tile in results {
        let x0 = tile.tx * TILE;
        let y0 = tile.ty * TILE;
        let tw = TILE.min(width - x0);
        let th = TILE.min(height - y0);
        for ly in 0..th {
            for lx in 0..tw {
                let i = (ly * tw + lx) as usize;
                let (x, y) = (x0 + lx, y0 + ly);
                color.set_pixel(x, y, tile.rgb[i]);
                depth[(y * width + x) as usize] = tile.depth[i];
                transmittance[(y * width + x) as usize] = tile.transmittance[i];
            }
        }
    }
    RenderedFrame {
        color,
        depth: DepthImage::from_data(width, height, depth),
        transmittance,
    }
}
