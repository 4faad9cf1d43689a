//! File formats: JSON annotations, `DRFDMAP1` density maps, 8-bit PGM.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DensityMap, PointAnnotation};
use crate::error::{Error, Result};

pub const DENSITY_MAGIC: &[u8; 8] = b"DRFDMAP1";

pub fn read_annotation(path: &Path) -> Result<PointAnnotation> {
    let ann: PointAnnotation = serde_json::from_slice(&fs::read(path)?)?;
    ann.validate()?;
    Ok(ann)
}

pub fn annotation_json(ann: &PointAnnotation) -> String {
    serde_json::to_string(ann).expect("annotation serializes")
}

pub fn write_annotation(path: &Path, ann: &PointAnnotation) -> Result<()> {
    fs::write(path, annotation_json(ann))?;
    Ok(())
}

/// `DRFDMAP1`, `u32` width, `u32` height, `f64` scale, row-major `f64` payload; all little-endian.
pub fn encode_density(map: &DensityMap) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + 8 * map.values.len());
    buf.extend_from_slice(DENSITY_MAGIC);
    buf.extend((map.width as u32).to_le_bytes());
    buf.extend((map.height as u32).to_le_bytes());
    buf.extend(map.scale.to_le_bytes());
    for v in &map.values {
        buf.extend(v.to_le_bytes());
    }
    buf
}

pub fn decode_density(mut bytes: &[u8]) -> Result<DensityMap> {
    let mut header = [0u8; 24];
    bytes
        .read_exact(&mut header)
        .map_err(|_| Error::format("density map", "truncated header"))?;
    if &header[..8] != DENSITY_MAGIC {
        return Err(Error::format("density map", "bad magic"));
    }
    let width = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let height = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize;
    let scale = f64::from_le_bytes(header[16..24].try_into().expect("8 bytes"));
    if bytes.len() != width * height * 8 {
        return Err(Error::format(
            "density map",
            format!("payload has {} bytes, expected {}", bytes.len(), width * height * 8),
        ));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    DensityMap::new(width, height, values, scale)
}

pub fn write_density(path: &Path, map: &DensityMap) -> Result<()> {
    fs::write(path, encode_density(map))?;
    Ok(())
}

pub fn read_density(path: &Path) -> Result<DensityMap> {
    decode_density(&fs::read(path)?)
}

/// Binary (`P5`) 8-bit PGM bytes.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    buf
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |r: &str| Error::format("pgm", r.to_string());
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
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("only binary P5 is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(bad("pixel payload size mismatch"));
    }
    Ok((w, h, data.to_vec()))
}

/// Heatmap with each map scaled so its maximum becomes 255.
pub fn heatmap_pgm(map: &DensityMap) -> Vec<u8> {
    let max = map.max();
    let pixels: Vec<u8> = map
        .values
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (v.max(0.0) / max * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    encode_pgm(map.width, map.height, &pixels)
}

pub fn write_heatmap(path: &Path, map: &DensityMap) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&heatmap_pgm(map))?;
    Ok(())
}
