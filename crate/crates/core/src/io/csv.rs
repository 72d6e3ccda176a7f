//! Keypoint CSV: header `u,v,depth,active`, one record per row, empty depth
//! field means unavailable.

use std::path::Path;

use super::IoError;

/// An image feature with optional metric depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointRecord {
    pub u: f64,
    pub v: f64,
    /// Meters; `None` when no depth is associated.
    pub depth: Option<f64>,
    /// True when the keypoint has a corresponding 3D map point.
    pub active: bool,
}

pub fn read_keypoints_csv(path: impl AsRef<Path>) -> Result<Vec<KeypointRecord>, IoError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "u,v,depth,active" => {}
        _ => {
            return Err(IoError::Parse { line: 1, message: "expected header u,v,depth,active".into() })
        }
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(IoError::Parse {
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let parse_f64 = |s: &str, what: &str| {
            s.trim().parse::<f64>().map_err(|_| IoError::Parse {
                line: line_no,
                message: format!("bad {what}: {s:?}"),
            })
        };
        let u = parse_f64(fields[0], "u")?;
        let v = parse_f64(fields[1], "v")?;
        let depth = if fields[2].trim().is_empty() {
            None
        } else {
            Some(parse_f64(fields[2], "depth")?)
        };
        let active = match fields[3].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(IoError::Parse {
                    line: line_no,
                    message: format!("bad active flag: {other:?}"),
                })
            }
        };
        records.push(KeypointRecord { u, v, depth, active });
    }
    Ok(records)
}

pub fn write_keypoints_csv(
    records: &[KeypointRecord],
    path: impl AsRef<Path>,
) -> Result<(), IoError> {
    let mut out = String::from("u,v,depth,active\n");
    for r in records {
        let depth = r.depth.map_or(String::new(), |d| d.to_string());
        out.push_str(&format!("{},{},{},{}\n", r.u, r.v, depth, u8::from(r.active)));
    }
    std::fs::write(path, out)?;
    Ok(())
}
