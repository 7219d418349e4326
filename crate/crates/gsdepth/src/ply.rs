//! Gaussian checkpoints as binary little-endian PLY, using the property names
//! of the reference splatting point cloud.

use std::path::Path;

use gsdepth_core::scene::{Gaussian, GaussianCloud};
use gsdepth_core::sh;
use nalgebra::Vector3;

use crate::error::{self, Error, Result};

/// Extra header data carried as `comment` lines.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PlyMeta {
    /// Image size of the views the cloud was trained on.
    pub image_size: Option<(usize, usize)>,
}

fn property_names(sh_degree: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..rest_count(sh_degree) {
        names.push(format!("f_rest_{i}"));
    }
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

fn rest_count(sh_degree: usize) -> usize {
    3 * (sh::coeff_count(sh_degree) - 1)
}

pub fn encode_ply(cloud: &GaussianCloud, meta: &PlyMeta) -> Vec<u8> {
    let names = property_names(cloud.sh_degree);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    if let Some((w, h)) = meta.image_size {
        header.push_str(&format!("comment image_size {w} {h}\n"));
    }
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");

    let mut out = header.into_bytes();
    let k = sh::coeff_count(cloud.sh_degree);
    let mut row = Vec::with_capacity(names.len());
    for g in &cloud.gaussians {
        row.clear();
        row.extend(g.position.iter());
        row.extend([0.0; 3]);
        row.extend(g.sh[0]);
        // Channel-major: every red coefficient, then green, then blue.
        for c in 0..3 {
            row.extend((1..k).map(|j| g.sh[j][c]));
        }
        row.push(g.opacity_logit);
        row.extend(g.log_scale.iter());
        row.extend(g.rotation);
        for v in &row {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]),
        }
    }
}

/// `path` only labels errors.
pub fn decode_ply(bytes: &[u8], path: &Path) -> Result<(GaussianCloud, PlyMeta)> {
    let end = b"end_header\n";
    let header_len = bytes
        .windows(end.len())
        .position(|w| w == end)
        .map(|p| p + end.len())
        .ok_or_else(|| Error::format(path, "no end_header line"))?;
    let header = std::str::from_utf8(&bytes[..header_len]).map_err(|_| Error::format(path, "header is not UTF-8"))?;

    let mut meta = PlyMeta::default();
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    for (i, line) in header.lines().enumerate() {
        let lineno = i + 1;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["ply"] if i == 0 => {}
            _ if i == 0 => return Err(Error::format(path, "missing ply magic")),
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", f, ..] => return Err(Error::format(path, format!("unsupported format {f}"))),
            ["comment", "image_size", w, h] => {
                let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(path, lineno, format!("bad image size {s:?}")));
                meta.image_size = Some((parse(w)?, parse(h)?));
            }
            ["comment", ..] | ["obj_info", ..] | ["end_header"] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(Error::parse(path, lineno, "duplicate vertex element"));
                }
                count = Some(n.parse::<usize>().map_err(|_| Error::parse(path, lineno, format!("bad vertex count {n:?}")))?);
            }
            ["element", name, ..] => return Err(Error::parse(path, lineno, format!("unexpected element {name}"))),
            ["property", "list", ..] => return Err(Error::parse(path, lineno, "list properties are not supported")),
            ["property", ty, name] => {
                if count.is_none() {
                    return Err(Error::parse(path, lineno, "property before element"));
                }
                let ty = Scalar::parse(ty).ok_or_else(|| Error::parse(path, lineno, format!("unknown type {ty}")))?;
                props.push((name.to_string(), ty));
            }
            _ => return Err(Error::parse(path, lineno, format!("unrecognized header line {line:?}"))),
        }
    }
    let count = count.ok_or_else(|| Error::format(path, "no vertex element"))?;

    let offset_of = |name: &str| -> Option<(usize, Scalar)> {
        let mut off = 0;
        for (n, ty) in &props {
            if n == name {
                return Some((off, *ty));
            }
            off += ty.size();
        }
        None
    };
    let rests = props.iter().filter(|(n, _)| n.starts_with("f_rest_")).count();
    let degree = (0..=sh::MAX_DEGREE).find(|d| rest_count(*d) == rests);
    let expected = property_names(degree.unwrap_or(0));
    let mut missing: Vec<String> =
        expected.iter().filter(|n| !matches!(n.as_str(), "nx" | "ny" | "nz") && offset_of(n).is_none()).cloned().collect();
    if degree.is_none() {
        missing.extend((0..rests).map(|i| format!("f_rest_{i}")).filter(|n| offset_of(n).is_none()));
        if missing.is_empty() {
            return Err(Error::format(path, format!("{rests} f_rest properties match no SH degree")));
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingProperties { path: path.to_path_buf(), names: missing });
    }
    let sh_degree = degree.unwrap_or(0);

    let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
    let body = &bytes[header_len..];
    if body.len() != stride * count {
        return Err(Error::format(path, format!("body has {} bytes, {count} vertices need {}", body.len(), stride * count)));
    }
    let field = |name: &str| offset_of(name).expect("checked above");
    let pos = ["x", "y", "z"].map(field);
    let dc = ["f_dc_0", "f_dc_1", "f_dc_2"].map(field);
    let rest: Vec<_> = (0..rests).map(|i| field(&format!("f_rest_{i}"))).collect();
    let opacity = field("opacity");
    let scale = ["scale_0", "scale_1", "scale_2"].map(field);
    let rot = ["rot_0", "rot_1", "rot_2", "rot_3"].map(field);

    let k = sh::coeff_count(sh_degree);
    let mut cloud = GaussianCloud::new(sh_degree);
    for row in body.chunks_exact(stride.max(1)).take(count) {
        let get = |(off, ty): (usize, Scalar)| ty.read(&row[off..]);
        let mut coeffs = vec![[0.0; 3]; k];
        coeffs[0] = dc.map(get);
        for c in 0..3 {
            for j in 1..k {
                coeffs[j][c] = get(rest[c * (k - 1) + j - 1]);
            }
        }
        let [x, y, z] = pos.map(get);
        let [s0, s1, s2] = scale.map(get);
        cloud.push(Gaussian {
            position: Vector3::new(x, y, z),
            rotation: rot.map(get),
            log_scale: Vector3::new(s0, s1, s2),
            opacity_logit: get(opacity),
            sh: coeffs,
        })?;
    }
    Ok((cloud, meta))
}

pub fn write_ply(path: &Path, cloud: &GaussianCloud, meta: &PlyMeta) -> Result<()> {
    error::write(path, &encode_ply(cloud, meta))
}

pub fn read_ply(path: &Path) -> Result<(GaussianCloud, PlyMeta)> {
    decode_ply(&error::read(path)?, path)
}
