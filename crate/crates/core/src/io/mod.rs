//! File I/O: binary splat PLY, keypoint CSV, 16-bit depth and 8-bit color
//! PNG, and plain-text pose / intrinsics files.

mod csv;
mod ply;
mod png;
mod text;

pub use csv::{read_keypoints_csv, write_keypoints_csv, KeypointRecord};
pub use ply::{read_splat_ply, write_splat_ply, PlyHeaderInfo, PlyScalar};
pub use png::{read_color_png, read_depth_png, write_color_png, write_depth_png};
pub use text::{read_intrinsics, read_poses, write_intrinsics, write_poses};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("missing property {0}")]
    MissingProperty(String),
    #[error("truncated payload at byte offset {0}")]
    Truncated(u64),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}
