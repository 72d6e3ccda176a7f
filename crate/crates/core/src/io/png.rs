//! PNG I/O: 16-bit grayscale depth (TUM-style raw/depth_scale encoding, raw 0
//! means unavailable) and 8-bit RGB color.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::frame::{DepthImage, RgbFrame};

use super::IoError;

/// Reads a 16-bit single-channel PNG; meters = raw / depth_scale, raw 0 → NaN.
pub fn read_depth_png(path: impl AsRef<Path>, depth_scale: f64) -> Result<DepthImage, IoError> {
    let img = image::open(path.as_ref()).map_err(|e| IoError::Format(e.to_string()))?;
    let DynamicImage::ImageLuma16(buf) = img else {
        return Err(IoError::Format("expected a 16-bit single-channel PNG".into()));
    };
    let (w, h) = buf.dimensions();
    let data = buf
        .pixels()
        .map(|Luma([raw])| if *raw == 0 { f64::NAN } else { *raw as f64 / depth_scale })
        .collect();
    Ok(DepthImage::from_data(w, h, data))
}

/// Writes depth as 16-bit grayscale; NaN and non-positive values become 0.
pub fn write_depth_png(
    depth: &DepthImage,
    path: impl AsRef<Path>,
    depth_scale: f64,
) -> Result<(), IoError> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(depth.width, depth.height, |x, y| {
            let meters = depth.get(x, y);
            let raw = if meters.is_finite() && meters > 0.0 {
                (meters * depth_scale).round().clamp(0.0, u16::MAX as f64) as u16
            } else {
                0
            };
            Luma([raw])
        });
    buf.save(path.as_ref()).map_err(|e| IoError::Format(e.to_string()))
}

pub fn read_color_png(path: impl AsRef<Path>) -> Result<RgbFrame, IoError> {
    let img = image::open(path.as_ref())
        .map_err(|e| IoError::Format(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().flat_map(|Rgb(c)| c.map(|v| v as f64 / 255.0)).collect();
    Ok(RgbFrame::from_data(w, h, data))
}

pub fn write_color_png(frame: &RgbFrame, path: impl AsRef<Path>) -> Result<(), IoError> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_fn(frame.width, frame.height, |x, y| {
            let px = frame.pixel(x, y);
            Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        });
    buf.save(path.as_ref()).map_err(|e| IoError::Format(e.to_string()))
}
