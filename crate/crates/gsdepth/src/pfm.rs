//! Single-channel PFM for depth and disparity maps.
//!
//! Rows are stored bottom to top. A negative scale marks little-endian
//! floats, a positive one big-endian. Writing always produces little-endian.

use std::path::Path;

use gsdepth_core::image::{DepthMap, ScalarMap};
use gsdepth_core::stereo::DisparityMap;

use crate::error::{self, Error, Result};

/// Decoded payload with rows in top-to-bottom order.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Pfm {
    pub fn from_values(width: usize, height: usize, values: impl IntoIterator<Item = f64>) -> Self {
        Self { width, height, data: values.into_iter().map(|v| v as f32).collect() }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("Pf\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        out.reserve(self.data.len() * 4);
        for row in self.data.chunks_exact(self.width.max(1)).rev() {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut token = |what: &str| -> Result<String> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(path, format!("truncated header, expected {what}")));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token("magic")?;
        match magic.as_str() {
            "Pf" => {}
            "PF" => return Err(Error::Channels { path: path.to_path_buf(), channels: 3 }),
            other => return Err(Error::format(path, format!("bad magic {other:?}"))),
        }
        let dim = |s: String, what: &str| {
            s.parse::<usize>().map_err(|_| Error::format(path, format!("bad {what} {s:?}")))
        };
        let width = dim(token("width")?, "width")?;
        let height = dim(token("height")?, "height")?;
        let s = token("scale")?;
        let scale: f64 = s.parse().map_err(|_| Error::format(path, format!("bad scale {s:?}")))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::format(path, format!("bad scale {s:?}")));
        }
        // Exactly one whitespace byte separates the header from the payload.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::format(path, "missing payload"));
        }
        let payload = &bytes[pos + 1..];
        let n = width * height;
        if payload.len() != n * 4 {
            return Err(Error::format(path, format!("payload has {} bytes, {width}x{height} needs {}", payload.len(), n * 4)));
        }
        let little = scale < 0.0;
        let mut data = vec![0f32; n];
        for (i, b) in payload.chunks_exact(4).enumerate() {
            let raw = [b[0], b[1], b[2], b[3]];
            let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            let (row, col) = (i / width, i % width);
            data[(height - 1 - row) * width + col] = v;
        }
        Ok(Self { width, height, data })
    }

    pub fn to_scalar_map(&self) -> Result<ScalarMap> {
        Ok(ScalarMap::from_vec(self.width, self.height, self.data.iter().map(|v| *v as f64).collect())?)
    }
}

pub fn read_pfm(path: &Path) -> Result<Pfm> {
    Pfm::decode(&error::read(path)?, path)
}

pub fn write_pfm(path: &Path, pfm: &Pfm) -> Result<()> {
    error::write(path, &pfm.encode())
}

/// Invalid pixels are stored as 0.
pub fn write_depth(path: &Path, map: &DepthMap) -> Result<()> {
    let values = map.depth.iter().zip(&map.valid).map(|(d, ok)| if *ok { *d } else { 0.0 });
    write_pfm(path, &Pfm::from_values(map.width, map.height, values))
}

/// Positive finite values are valid; everything else is masked.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let p = read_pfm(path)?;
    Ok(DepthMap::from_values(p.width, p.height, p.data.iter().map(|v| *v as f64).collect())?)
}

/// Invalid pixels keep the matcher's negative sentinel.
pub fn write_disparity(path: &Path, map: &DisparityMap) -> Result<()> {
    write_pfm(path, &Pfm::from_values(map.width, map.height, map.disparity.iter().copied()))
}
