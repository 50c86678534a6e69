//! Binary greymap (P5) images with 8- or 16-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples.
    pub data: Vec<u16>,
}

impl Pgm {
    pub fn new(width: usize, height: usize, maxval: u16, data: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 || maxval == 0 {
            return Err(Error::arg(format!("greymap {width}x{height} with maxval {maxval}")));
        }
        if data.len() != width * height {
            return Err(Error::arg(format!("{} samples for a {width}x{height} greymap", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > maxval) {
            return Err(Error::arg(format!("sample {v} exceeds maxval {maxval}")));
        }
        Ok(Self { width, height, maxval, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.data.iter().map(|&v| v as u8));
        } else {
            for v in &self.data {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let magic = token(bytes, &mut pos)?;
        if magic != "P5" {
            return Err(format!("not a binary greymap (magic {magic:?})"));
        }
        let mut field = |what: &str| -> std::result::Result<usize, String> {
            let t = token(bytes, &mut pos)?;
            t.parse().map_err(|_| format!("bad {what} {t:?}"))
        };
        let width = field("width")?;
        let height = field("height")?;
        let maxval = field("maxval")?;
        if width == 0 || height == 0 {
            return Err(format!("empty image {width}x{height}"));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(format!("maxval {maxval} out of range"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let wide = maxval > 255;
        let n = width * height;
        let need = if wide { 2 * n } else { n };
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() < need {
            return Err(format!("raster truncated: {} of {need} bytes", raster.len()));
        }
        let data: Vec<u16> = if wide {
            raster[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            raster[..need].iter().map(|&b| b as u16).collect()
        };
        if let Some(v) = data.iter().find(|&&v| v as usize > maxval) {
            return Err(format!("sample {v} exceeds maxval {maxval}"));
        }
        Ok(Self { width, height, maxval: maxval as u16, data })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::parse(&bytes).map_err(|reason| Error::format(path.display().to_string(), reason))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn token(bytes: &[u8], pos: &mut usize) -> std::result::Result<String, String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err("header truncated".into());
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}
