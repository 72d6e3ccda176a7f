//! Plain-text camera files: poses (one row-major 4×4 world→camera transform
//! per line, 16 floats) and pinhole intrinsics (fx fy cx cy width height).

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::camera::{CameraPose, PinholeIntrinsics};

use super::IoError;

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<CameraPose>, IoError> {
    let text = std::fs::read_to_string(path)?;
    let mut poses = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|w| {
                w.parse::<f64>().map_err(|_| IoError::Parse {
                    line: line_no,
                    message: format!("bad float {w:?}"),
                })
            })
            .collect::<Result<_, _>>()?;
        if values.len() != 16 {
            return Err(IoError::Parse {
                line: line_no,
                message: format!("expected 16 floats, found {}", values.len()),
            });
        }
        let bottom_ok = values[12] == 0.0 && values[13] == 0.0 && values[14] == 0.0
            && (values[15] - 1.0).abs() < 1e-9;
        if !bottom_ok {
            return Err(IoError::Parse {
                line: line_no,
                message: "bottom row must be 0 0 0 1".into(),
            });
        }
        let rotation = Matrix3::new(
            values[0], values[1], values[2],
            values[4], values[5], values[6],
            values[8], values[9], values[10],
        );
        let translation = Vector3::new(values[3], values[7], values[11]);
        let pose = CameraPose::new(rotation, translation).map_err(|e| IoError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        poses.push(pose);
    }
    Ok(poses)
}

pub fn write_poses(poses: &[CameraPose], path: impl AsRef<Path>) -> Result<(), IoError> {
    let mut out = String::new();
    for pose in poses {
        let r = pose.rotation();
        let t = pose.translation();
        let row = [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ];
        let words: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_intrinsics(path: impl AsRef<Path>) -> Result<PinholeIntrinsics, IoError> {
    let text = std::fs::read_to_string(path)?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|w| {
            w.parse::<f64>()
                .map_err(|_| IoError::Parse { line: 1, message: format!("bad value {w:?}") })
        })
        .collect::<Result<_, _>>()?;
    if values.len() != 6 {
        return Err(IoError::Parse {
            line: 1,
            message: format!("expected fx fy cx cy width height, found {} values", values.len()),
        });
    }
    PinholeIntrinsics::new(
        values[0],
        values[1],
        values[2],
        values[3],
        values[4] as u32,
        values[5] as u32,
    )
    .map_err(|e| IoError::Parse { line: 1, message: e.to_string() })
}

pub fn write_intrinsics(intr: &PinholeIntrinsics, path: impl AsRef<Path>) -> Result<(), IoError> {
    std::fs::write(
        path,
        format!("{} {} {} {} {} {}\n", intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height),
    )?;
    Ok(())
}
