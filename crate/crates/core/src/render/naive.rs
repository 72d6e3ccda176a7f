//! Brute-force per-pixel renderer, the slow reference the tiled rasterizer is
//! verified against. Deliberately shares no binning or compositing code with
//! the production path; not used outside verification.

use nalgebra::Vector2;

use crate::camera::{CameraPose, PinholeIntrinsics};
use crate::frame::{DepthImage, RgbFrame};
use crate::gaussian::SplatMap;

use super::{project, ProjectedSplat, RenderedFrame, ALPHA_MAX, DEFAULT_NEAR, TRANSMITTANCE_STOP};

/// Renders by looping every splat for every pixel, in global depth order.
pub fn naive_rasterize(
    map: &SplatMap,
    pose: &CameraPose,
    intrinsics: &PinholeIntrinsics,
) -> RenderedFrame {
    let (width, height) = (intrinsics.width, intrinsics.height);
    let mut splats: Vec<ProjectedSplat> = map
        .primitives()
        .iter()
        .filter_map(|p| project(p, pose, intrinsics, DEFAULT_NEAR))
        .collect();
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap());
    let inverses: Vec<Option<nalgebra::Matrix2<f64>>> =
        splats.iter().map(|s| s.screen_cov.try_inverse()).collect();

    let mut color = RgbFrame::new(width, height);
    let mut depth = vec![0.0; (width * height) as usize];
    let mut transmittance = vec![1.0; (width * height) as usize];

    for y in 0..height {
        for x in 0..width {
            let center = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let i = (y * width + x) as usize;
            let mut rgb = [0.0; 3];
            for (splat, inv) in splats.iter().zip(&inverses) {
                let Some(inv) = inv else { continue };
                let rx = 3.0 * splat.screen_cov[(0, 0)].sqrt();
                let ry = 3.0 * splat.screen_cov[(1, 1)].sqrt();
                if (center.x - splat.pixel_mean.x).abs() > rx
                    || (center.y - splat.pixel_mean.y).abs() > ry
                {
                    continue;
                }
                let d = center - splat.pixel_mean;
                let alpha = (splat.opacity * (-0.5 * d.dot(&(inv * d))).exp()).min(ALPHA_MAX);
                let weight = transmittance[i] * alpha;
                rgb[0] += weight * splat.rgb.x;
                rgb[1] += weight * splat.rgb.y;
                rgb[2] += weight * splat.rgb.z;
                depth[i] += weight * splat.depth;
                transmittance[i] *= 1.0 - alpha;
                if transmittance[i] < TRANSMITTANCE_STOP {
                    break;
                }
            }
            color.set_pixel(x, y, rgb);
        }
    }
    RenderedFrame {
        color,
        depth: DepthImage::from_data(width, height, depth),
        transmittance,
    }
}
