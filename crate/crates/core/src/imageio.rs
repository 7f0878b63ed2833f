//! Binary 16-bit PGM (`P5`) and PPM (`P6`) maps with values in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::codec::LatentMap;
use crate::error::{Error, Result};

pub const MAXVAL: u16 = u16::MAX;

pub fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * MAXVAL as f64).round() as u16
}

pub fn dequantize(q: u16) -> f64 {
    q as f64 / MAXVAL as f64
}

/// Serializes a 1- or 3-channel map. Samples are big-endian as the format
/// requires for maxval > 255.
pub fn to_pnm_bytes(map: &LatentMap) -> Result<Vec<u8>> {
    let magic = match map.channels() {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::Format(format!(
                "PNM maps need 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n{MAXVAL}\n", map.width(), map.height()).into_bytes();
    out.reserve(map.len() * 2);
    for &v in map.data() {
        out.extend_from_slice(&quantize(v).to_be_bytes());
    }
    Ok(out)
}

pub fn from_pnm_bytes(bytes: &[u8]) -> Result<LatentMap> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM magic {m}"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PNM header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != MAXVAL as usize {
        return Err(Error::Format(format!(
            "expected 16-bit maxval, got {maxval}"
        )));
    }
    let n = w * h * channels;
    let raster = bytes
        .get(pos..pos + 2 * n)
        .ok_or_else(|| Error::Format("truncated PNM raster".into()))?;
    let data = raster
        .chunks_exact(2)
        .map(|b| dequantize(u16::from_be_bytes([b[0], b[1]])))
        .collect();
    LatentMap::new(h, w, channels, data)
}

pub fn write_pnm(path: &Path, map: &LatentMap) -> Result<()> {
    let bytes = to_pnm_bytes(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pnm(path: &Path) -> Result<LatentMap> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    from_pnm_bytes(&bytes)
}
