//! Binary portable graymap (P5) interchange for tiled images.

use std::io::{Read, Write};

use super::tiling::TiledImage;
use crate::error::{Error, Result};

/// PGM maxval used for n-bit levels.
pub fn maxval_for_bits(bits: u8) -> u16 {
    if bits <= 8 {
        ((1u32 << bits) - 1) as u16
    } else {
        u16::MAX
    }
}

/// A decoded graymap: dimensions, maxval and row-major samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

pub fn write_pgm<W: Write>(mut w: W, img: &TiledImage, bits: u8) -> Result<()> {
    let maxval = maxval_for_bits(bits);
    write!(w, "P5\n{} {}\n{}\n", img.width(), img.height(), maxval)?;
    if maxval < 256 {
        let bytes: Vec<u8> = img.pixels().iter().map(|&p| p as u8).collect();
        w.write_all(&bytes)?;
    } else {
        let bytes: Vec<u8> = img.pixels().iter().flat_map(|p| p.to_be_bytes()).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_pgm<R: Read>(mut r: R) -> Result<Graymap> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match buf.get(pos) {
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::decode("truncated PGM header")),
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(|c| !c.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::decode("not a binary PGM (P5)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()?.parse().map_err(|_| Error::decode(format!("bad PGM {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::decode("invalid PGM dimensions or maxval"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width * height;
    let raster = buf.get(pos..).unwrap_or_default();
    let samples = if maxval < 256 {
        if raster.len() < n {
            return Err(Error::decode("truncated PGM raster"));
        }
        raster[..n].iter().map(|&b| b as u16).collect()
    } else {
        if raster.len() < 2 * n {
            return Err(Error::decode("truncated PGM raster"));
        }
        raster[..2 * n].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok(Graymap { width, height, maxval: maxval as u16, samples })
}
