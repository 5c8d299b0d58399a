//! Binary (P5) greymaps, used for masks.

use crate::error::{Error, Result};
use crate::metrics::Mask;
use std::path::Path;

/// Foreground is written as 255, background as 0.
pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.w, mask.h).into_bytes();
    out.extend(mask.data.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Greymap with samples scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grey {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grey {
    /// Samples at or above one half are foreground.
    pub fn to_mask(&self) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| v >= 0.5).collect(),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Grey> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::format(format!("expected P5 greymap, found {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(format!("bad PGM header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format(format!("bad PGM header {w}x{h} maxval {maxval}")));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let width = if maxval < 256 { 1 } else { 2 };
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != w * h * width {
        return Err(Error::format(format!("PGM raster has {} bytes, expected {}", raster.len(), w * h * width)));
    }
    let data = if width == 1 {
        raster.iter().map(|&v| v as f64 / maxval as f64).collect()
    } else {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64).collect()
    };
    Ok(Grey { h, w, data })
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    Ok(std::fs::write(path, encode_mask(mask))?)
}

pub fn read(path: &Path) -> Result<Grey> {
    decode(&std::fs::read(path)?)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(read(path)?.to_mask())
}
