//! Binary little-endian PLY reader/writer for splat maps.
//!
//! The written layout follows the common splat convention:
//! x y z, f_dc_0..2, [f_rest_*], opacity, scale_0..2, rot_0..3 (w first),
//! plus grad_avg and kf_idx. Opacity/scale are stored activated (linear);
//! files carrying raw values declare it with the header comments
//! `opacity_space logit` / `scale_space log`.

use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::gaussian::{GaussianPrimitive, SplatMap, EPS_SCALE};

use super::IoError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyScalar {
    Float,
    Double,
    Char,
    Uchar,
    Short,
    Ushort,
    Int,
    Uint,
}

impl PlyScalar {
    fn parse(word: &str) -> Option<Self> {
        Some(match word {
            "float" | "float32" => Self::Float,
            "double" | "float64" => Self::Double,
            "char" | "int8" => Self::Char,
            "uchar" | "uint8" => Self::Uchar,
            "short" | "int16" => Self::Short,
            "ushort" | "uint16" => Self::Ushort,
            "int" | "int32" => Self::Int,
            "uint" | "uint32" => Self::Uint,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::Char | Self::Uchar => 1,
            Self::Short | Self::Ushort => 2,
            Self::Float | Self::Int | Self::Uint => 4,
            Self::Double => 8,
        }
    }
}

/// Parsed header of a binary splat PLY.
#[derive(Debug, Clone)]
pub struct PlyHeaderInfo {
    pub vertex_count: usize,
    /// Property names and scalar types in declared order.
    pub properties: Vec<(String, PlyScalar)>,
    pub comments: Vec<String>,
    /// Byte length of the header including the end_header line.
    pub header_len: usize,
}

const MANDATORY_PROPS: &[&str] = &[
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity", "f_dc_0", "f_dc_1", "f_dc_2",
];

impl PlyHeaderInfo {
    pub fn parse(bytes: &[u8]) -> Result<Self, IoError> {
        let end_marker = b"end_header\n";
        let header_len = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .map(|p| p + end_marker.len())
            .ok_or_else(|| IoError::Format("no end_header line".into()))?;
        let header = std::str::from_utf8(&bytes[..header_len])
            .map_err(|_| IoError::Format("header is not valid UTF-8".into()))?;

        let mut lines = header.lines();
        if lines.next().map(str::trim) != Some("ply") {
            return Err(IoError::Format("missing ply magic".into()));
        }
        let mut format_seen = false;
        let mut vertex_count = None;
        let mut properties = Vec::new();
        let mut comments = Vec::new();
        let mut in_vertex_element = false;
        for line in lines {
            let line = line.trim();
            let mut words = line.split_whitespace();
            match words.next() {
                Some("format") => {
                    if line != "format binary_little_endian 1.0" {
                        return Err(IoError::Format(format!("unsupported format: {line}")));
                    }
                    format_seen = true;
                }
                Some("comment") => comments.push(line["comment".len()..].trim().to_string()),
                Some("element") => {
                    let name = words.next().unwrap_or("");
                    if name != "vertex" {
                        return Err(IoError::Format(format!("unsupported element: {name}")));
                    }
                    let count = words
                        .next()
                        .and_then(|w| w.parse::<usize>().ok())
                        .ok_or_else(|| IoError::Format("bad vertex count".into()))?;
                    vertex_count = Some(count);
                    in_vertex_element = true;
                }
                Some("property") => {
                    if !in_vertex_element {
                        return Err(IoError::Format("property outside vertex element".into()));
                    }
                    let type_word = words.next().unwrap_or("");
                    if type_word == "list" {
                        return Err(IoError::Format("list properties are not supported".into()));
                    }
                    let scalar = PlyScalar::parse(type_word).ok_or_else(|| {
                        IoError::Format(format!("unknown property type: {type_word}"))
                    })?;
                    let name = words
                        .next()
                        .ok_or_else(|| IoError::Format("property without a name".into()))?;
                    properties.push((name.to_string(), scalar));
                }
                Some("end_header") => break,
                Some(other) => {
                    return Err(IoError::Format(format!("unexpected header line: {other}")))
                }
                None => {}
            }
        }
        if !format_seen {
            return Err(IoError::Format("missing format line".into()));
        }
        let vertex_count =
            vertex_count.ok_or_else(|| IoError::Format("missing vertex element".into()))?;

        let info = Self { vertex_count, properties, comments, header_len };
        info.validate_mandatory()?;
        Ok(info)
    }

    /// Mandatory splat properties must be present and of type float32.
    fn validate_mandatory(&self) -> Result<(), IoError> {
        for name in MANDATORY_PROPS {
            match self.properties.iter().find(|(n, _)| n == name) {
                None => return Err(IoError::MissingProperty((*name).to_string())),
                Some((_, PlyScalar::Float)) => {}
                Some((_, other)) => {
                    return Err(IoError::Format(format!(
                        "property {name} has unsupported type {other:?}, expected float"
                    )))
                }
            }
        }
        Ok(())
    }

    fn stride(&self) -> usize {
        self.properties.iter().map(|(_, t)| t.size()).sum()
    }

    fn offset_of(&self, name: &str) -> Option<usize> {
        let mut offset = 0;
        for (n, t) in &self.properties {
            if n == name {
                return Some(offset);
            }
            offset += t.size();
        }
        None
    }

    fn has_comment_flag(&self, key: &str, value: &str) -> bool {
        self.comments.iter().any(|c| {
            let mut words = c.split_whitespace();
            words.next() == Some(key) && words.next() == Some(value)
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Reads a splat map; one primitive per vertex, insertion index = file order.
pub fn read_splat_ply(path: impl AsRef<Path>) -> Result<SplatMap, IoError> {
    let bytes = std::fs::read(path)?;
    let header = PlyHeaderInfo::parse(&bytes)?;
    let stride = header.stride();
    let payload = &bytes[header.header_len..];
    let needed = header.vertex_count * stride;
    if payload.len() < needed {
        return Err(IoError::Truncated(bytes.len() as u64));
    }

    let logit_opacity = header.has_comment_flag("opacity_space", "logit");
    let log_scale = header.has_comment_flag("scale_space", "log");

    let field = |name: &str| header.offset_of(name).expect("mandatory property present");
    let offsets: Vec<usize> = MANDATORY_PROPS.iter().map(|n| field(n)).collect();
    let grad_offset = header.offset_of("grad_avg");
    let kf_offset = header.offset_of("kf_idx");
    let mut rest_offsets: Vec<(usize, usize)> = header
        .properties
        .iter()
        .filter_map(|(n, _)| {
            n.strip_prefix("f_rest_")
                .and_then(|idx| idx.parse::<usize>().ok())
                .map(|idx| (idx, header.offset_of(n).unwrap()))
        })
        .collect();
    rest_offsets.sort_by_key(|(idx, _)| *idx);

    let mut primitives = Vec::with_capacity(header.vertex_count);
    for v in 0..header.vertex_count {
        let row = &payload[v * stride..(v + 1) * stride];
        let get = |offset: usize| LittleEndian::read_f32(&row[offset..offset + 4]) as f64;

        let mean = Vector3::new(get(offsets[0]), get(offsets[1]), get(offsets[2]));
        let mut scale = Vector3::new(get(offsets[3]), get(offsets[4]), get(offsets[5]));
        if log_scale {
            scale = scale.map(f64::exp);
        }
        scale = scale.map(|s| s.max(EPS_SCALE));

        let raw_q = Quaternion::new(get(offsets[6]), get(offsets[7]), get(offsets[8]), get(offsets[9]));
        if !raw_q.coords.iter().all(|c| c.is_finite()) || raw_q.norm() < 1e-12 {
            return Err(IoError::Format(format!("vertex {v}: invalid rotation")));
        }
        let rotation = UnitQuaternion::from_quaternion(raw_q);

        let mut opacity = get(offsets[10]);
        if logit_opacity {
            opacity = sigmoid(opacity);
        }
        let color = Vector3::new(get(offsets[11]), get(offsets[12]), get(offsets[13]));
        let grad_stat = grad_offset.map_or(0.0, get).max(0.0);
        let keyframe_index = kf_offset.map_or(0.0, get).max(0.0) as u32;
        let sh_rest: Vec<f32> = rest_offsets.iter().map(|&(_, o)| get(o) as f32).collect();

        let mut p = GaussianPrimitive::new(mean, raw_q, scale, opacity.clamp(0.0, 1.0), color, grad_stat, keyframe_index)
            .map_err(|e| IoError::Format(format!("vertex {v}: {e}")))?;
        p.rotation = rotation;
        p.sh_rest = sh_rest;
        primitives.push(p);
    }
    Ok(SplatMap::from_ordered(primitives))
}

/// Rounds a unit quaternion to f32 components that survive the reader's
/// renormalization bit-exactly, so write→read→write is byte-stable.
fn quantize_rotation(q: &UnitQuaternion<f64>) -> [f32; 4] {
    let mut c = [q.w as f32, q.i as f32, q.j as f32, q.k as f32];
    for _ in 0..8 {
        let v = [c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
        let next = [
            (v[0] / n) as f32,
            (v[1] / n) as f32,
            (v[2] / n) as f32,
            (v[3] / n) as f32,
        ];
        if next == c {
            break;
        }
        c = next;
    }
    c
}

/// Writes a binary little-endian PLY with float32 properties; byte-for-byte
/// deterministic for equal maps.
pub fn write_splat_ply(map: &SplatMap, path: impl AsRef<Path>) -> Result<(), IoError> {
    let rest_len = map.primitives().first().map_or(0, |p| p.sh_rest.len());
    if map.primitives().iter().any(|p| p.sh_rest.len() != rest_len) {
        return Err(IoError::Format("inconsistent sh_rest lengths across primitives".into()));
    }

    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str("comment opacity_space linear\ncomment scale_space linear\n");
    header.push_str(&format!("element vertex {}\n", map.len()));
    for name in ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"] {
        header.push_str(&format!("property float {name}\n"));
    }
    for k in 0..rest_len {
        header.push_str(&format!("property float f_rest_{k}\n"));
    }
    for name in [
        "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
        "grad_avg", "kf_idx",
    ] {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");

    let floats_per_vertex = 16 + rest_len;
    let mut out = Vec::with_capacity(header.len() + map.len() * floats_per_vertex * 4);
    out.extend_from_slice(header.as_bytes());
    let mut buf = [0u8; 4];
    let mut push = |out: &mut Vec<u8>, value: f32| {
        LittleEndian::write_f32(&mut buf, value);
        out.extend_from_slice(&buf);
    };
    for p in map.primitives() {
        for v in [p.mean.x, p.mean.y, p.mean.z, p.color.x, p.color.y, p.color.z] {
            push(&mut out, v as f32);
        }
        for &v in &p.sh_rest {
            push(&mut out, v);
        }
        push(&mut out, p.opacity as f32);
        for v in [p.scale.x, p.scale.y, p.scale.z] {
            push(&mut out, v as f32);
        }
        for v in quantize_rotation(&p.rotation) {
            push(&mut out, v);
        }
        push(&mut out, p.grad_stat as f32);
        push(&mut out, p.keyframe_index as f32);
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}
