//! Lossless tile codec and its `CIFB` container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `"CIFB"` |
//! | 1 | version (1) |
//! | 1 | mode: 0 = range-coded residuals, 1 = raw bit-packed levels |
//! | 1 | bit depth n |
//! | 2×5 | H, W, C, grid rows, grid cols (u16) |
//! | 8×2 | quantizer min, max (f64) |
//! | 4 | CRC-32 of the tiled pixels (u16 LE) |
//! | 4 | payload length in bytes |
//!
//! Range-coded mode predicts every pixel from its left neighbour (the pixel
//! above for column 0, zero for the origin), wraps the residual into n bits and
//! codes it as a zero flag, a sign, a unary bit length and the mantissa bits,
//! each with its own adaptive context. Raw mode stores the C real channels at
//! n bits each and is chosen whenever it is smaller.

use super::rangecoder::{BitModel, Decoder, Encoder};
use super::tiling::{tile, untile, TiledImage};
use crate::error::{Error, Result};
use crate::quantizer::{LevelTensor, QuantParams};

pub const MAGIC: &[u8; 4] = b"CIFB";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodingMode {
    RangeCoded,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitstreamHeader {
    pub mode: CodingMode,
    pub quant: QuantParams,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub checksum: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn payload_bit_count(&self) -> u64 {
        self.payload.len() as u64 * 8
    }

    /// Header plus payload bits.
    pub fn total_bits(&self) -> u64 {
        (HEADER_BYTES + self.payload.len()) as u64 * 8
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(match h.mode {
            CodingMode::RangeCoded => 0,
            CodingMode::Raw => 1,
        });
        out.push(h.quant.bits());
        for dim in [h.height, h.width, h.channels, h.grid_rows, h.grid_cols] {
            out.extend_from_slice(&(dim as u16).to_le_bytes());
        }
        out.extend_from_slice(&h.quant.min().to_le_bytes());
        out.extend_from_slice(&h.quant.max().to_le_bytes());
        out.extend_from_slice(&h.checksum.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::decode(format!("container is {} bytes, header needs {HEADER_BYTES}", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::decode("bad CIFB magic"));
        }
        if bytes[4] != VERSION {
            return Err(Error::decode(format!("unsupported CIFB version {}", bytes[4])));
        }
        let mode = match bytes[5] {
            0 => CodingMode::RangeCoded,
            1 => CodingMode::Raw,
            m => return Err(Error::decode(format!("unknown coding mode {m}"))),
        };
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let quant = QuantParams::new(bytes[6], f64_at(17), f64_at(25))
            .map_err(|e| Error::decode(format!("bad quantizer header: {e}")))?;
        let header = BitstreamHeader {
            mode,
            quant,
            height: u16_at(7),
            width: u16_at(9),
            channels: u16_at(11),
            grid_rows: u16_at(13),
            grid_cols: u16_at(15),
            checksum: u32_at(33),
        };
        if [header.height, header.width, header.channels, header.grid_rows, header.grid_cols].contains(&0) {
            return Err(Error::decode("zero dimension in header"));
        }
        if header.grid_rows * header.grid_cols < header.channels {
            return Err(Error::decode("tile grid smaller than channel count"));
        }
        let len = u32_at(37) as usize;
        let payload = &bytes[HEADER_BYTES..];
        if payload.len() != len {
            return Err(Error::decode(format!("payload is {} bytes, header says {len}", payload.len())));
        }
        Ok(Self { header, payload: payload.to_vec() })
    }
}

/// Per-stream adaptive contexts.
struct ResidualModel {
    bits: u32,
    zero: [BitModel; 3],
    sign: [BitModel; 3],
    len: [[BitModel; 16]; 6],
    mantissa: [[BitModel; 16]; 17],
}

impl ResidualModel {
    fn new(bits: u8) -> Self {
        Self {
            bits: bits as u32,
            zero: Default::default(),
            sign: Default::default(),
            len: Default::default(),
            mantissa: [[BitModel::default(); 16]; 17],
        }
    }

    fn encode(&mut self, enc: &mut Encoder, r: i32, activity: usize) {
        if r == 0 {
            enc.encode(&mut self.zero[activity], false);
            return;
        }
        enc.encode(&mut self.zero[activity], true);
        let neg = r < 0;
        enc.encode(&mut self.sign[activity], neg);
        let m = r.unsigned_abs();
        let k = 32 - m.leading_zeros();
        let len_ctx = &mut self.len[activity * 2 + neg as usize];
        for i in 0..k - 1 {
            enc.encode(&mut len_ctx[i as usize], true);
        }
        if k < self.bits {
            enc.encode(&mut len_ctx[(k - 1) as usize], false);
        }
        for pos in (0..k - 1).rev() {
            enc.encode(&mut self.mantissa[k as usize][pos as usize], (m >> pos) & 1 == 1);
        }
    }

    fn decode(&mut self, dec: &mut Decoder, activity: usize) -> Result<i32> {
        if !dec.decode(&mut self.zero[activity])? {
            return Ok(0);
        }
        let neg = dec.decode(&mut self.sign[activity])?;
        let len_ctx = &mut self.len[activity * 2 + neg as usize];
        let mut k = 1;
        while k < self.bits && dec.decode(&mut len_ctx[(k - 1) as usize])? {
            k += 1;
        }
        let mut m = 1u32;
        for pos in (0..k - 1).rev() {
            m = (m << 1) | dec.decode(&mut self.mantissa[k as usize][pos as usize])? as u32;
        }
        let r = m as i32;
        Ok(if neg { -r } else { r })
    }
}

#[inline]
fn activity_of(r: i32) -> usize {
    match r.unsigned_abs() {
        0 => 0,
        1..=2 => 1,
        _ => 2,
    }
}

#[inline]
fn prediction(pixels: &[u16], idx: usize, width: usize) -> i32 {
    if idx % width != 0 {
        pixels[idx - 1] as i32
    } else if idx >= width {
        pixels[idx - width] as i32
    } else {
        0
    }
}

fn checksum(pixels: &[u16]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for p in pixels {
        h.update(&p.to_le_bytes());
    }
    h.finalize()
}

fn range_code(img: &TiledImage, bits: u8) -> Vec<u8> {
    let modulus = 1i32 << bits;
    let half = modulus / 2;
    let pixels = img.pixels();
    let width = img.width();
    let mut model = ResidualModel::new(bits);
    let mut enc = Encoder::new();
    let mut activity = 0;
    for idx in 0..pixels.len() {
        let mut r = (pixels[idx] as i32 - prediction(pixels, idx, width)).rem_euclid(modulus);
        if r >= half {
            r -= modulus;
        }
        model.encode(&mut enc, r, activity);
        activity = activity_of(r);
    }
    enc.finish()
}

fn range_decode(payload: &[u8], bits: u8, height: usize, width: usize) -> Result<Vec<u16>> {
    let modulus = 1i32 << bits;
    let mut model = ResidualModel::new(bits);
    let mut dec = Decoder::new(payload)?;
    let mut pixels = vec![0u16; height * width];
    let mut activity = 0;
    for idx in 0..pixels.len() {
        let r = model.decode(&mut dec, activity)?;
        pixels[idx] = (prediction(&pixels, idx, width) + r).rem_euclid(modulus) as u16;
        activity = activity_of(r);
    }
    Ok(pixels)
}

fn pack_raw(levels: &LevelTensor, bits: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity((levels.len() * bits as usize).div_ceil(8));
    let (mut acc, mut filled) = (0u32, 0u32);
    for &v in levels.data() {
        acc = (acc << bits) | v as u32;
        filled += bits as u32;
        while filled >= 8 {
            filled -= 8;
            out.push((acc >> filled) as u8);
        }
        acc &= (1 << filled) - 1;
    }
    if filled > 0 {
        out.push((acc << (8 - filled)) as u8);
    }
    out
}

fn unpack_raw(payload: &[u8], bits: u8, count: usize) -> Result<Vec<u16>> {
    if payload.len() != (count * bits as usize).div_ceil(8) {
        return Err(Error::decode("raw payload length does not match tensor size"));
    }
    let mut out = Vec::with_capacity(count);
    let (mut acc, mut filled) = (0u32, 0u32);
    let mut bytes = payload.iter();
    for _ in 0..count {
        while filled < bits as u32 {
            acc = (acc << 8) | *bytes.next().unwrap() as u32;
            filled += 8;
        }
        filled -= bits as u32;
        out.push((acc >> filled) as u16 & (((1u32 << bits) - 1) as u16));
        acc &= (1 << filled) - 1;
    }
    Ok(out)
}

/// Codes a tiled image holding `channels` channels quantized with `meta`.
pub fn encode_lossless(img: &TiledImage, channels: usize, meta: &QuantParams) -> Result<Bitstream> {
    let top = meta.max_level();
    if img.pixels().iter().any(|&p| p > top) {
        return Err(Error::contract(format!("pixel exceeds {}-bit range", meta.bits())));
    }
    if channels == 0 || channels > img.capacity() {
        return Err(Error::contract(format!("{channels} channels do not fit the tile grid")));
    }
    for (what, v) in [("height", img.tile_h()), ("width", img.tile_w()), ("channels", channels)]
        .into_iter()
        .chain([("grid rows", img.grid_rows()), ("grid cols", img.grid_cols())])
    {
        if v > u16::MAX as usize {
            return Err(Error::contract(format!("{what} {v} exceeds the container limit")));
        }
    }
    let bits = meta.bits();
    let coded = range_code(img, bits);
    let raw_bytes = (img.tile_h() * img.tile_w() * channels * bits as usize).div_ceil(8);
    let (mode, payload) = if coded.len() <= raw_bytes {
        (CodingMode::RangeCoded, coded)
    } else {
        (CodingMode::Raw, pack_raw(&untile(img, channels)?, bits))
    };
    Ok(Bitstream {
        header: BitstreamHeader {
            mode,
            quant: *meta,
            height: img.tile_h(),
            width: img.tile_w(),
            channels,
            grid_rows: img.grid_rows(),
            grid_cols: img.grid_cols(),
            checksum: checksum(img.pixels()),
        },
        payload,
    })
}

pub fn decode_lossless(b: &Bitstream) -> Result<TiledImage> {
    let h = &b.header;
    let bits = h.quant.bits();
    let img = match h.mode {
        CodingMode::RangeCoded => {
            let pixels = range_decode(&b.payload, bits, h.grid_rows * h.height, h.grid_cols * h.width)?;
            TiledImage::new(h.grid_rows, h.grid_cols, h.height, h.width, pixels)?
        }
        CodingMode::Raw => {
            let data = unpack_raw(&b.payload, bits, h.height * h.width * h.channels)?;
            let levels = LevelTensor::new(h.height, h.width, h.channels, data)?;
            tile(&levels, Some((h.grid_rows, h.grid_cols)))?
        }
    };
    if checksum(img.pixels()) != h.checksum {
        return Err(Error::decode("checksum mismatch: corrupt payload"));
    }
    Ok(img)
}

/// Tiles and codes a level tensor.
pub fn encode_levels(levels: &LevelTensor, grid: Option<(usize, usize)>, meta: &QuantParams) -> Result<Bitstream> {
    encode_lossless(&tile(levels, grid)?, levels.channels(), meta)
}

/// Inverse of [`encode_levels`].
pub fn decode_levels(b: &Bitstream) -> Result<LevelTensor> {
    untile(&decode_lossless(b)?, b.header.channels)
}
