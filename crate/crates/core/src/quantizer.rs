//! Uniform n-bit Q-layer.
//!
//! At inference time features are clipped to `[min, max]` and mapped to
//! integer levels `0..=2ⁿ−1`. During training the rounding is replaced by
//! additive uniform noise of one quantization step, which keeps the layer
//! differentiable (straight-through).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;

pub const DEFAULT_BITS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    bits: u8,
    min: f64,
    max: f64,
}

impl QuantParams {
    pub fn new(bits: u8, min: f64, max: f64) -> Result<Self> {
        if !(1..=16).contains(&bits) {
            return Err(Error::contract(format!("bit depth must be 1..=16, got {bits}")));
        }
        if !min.is_finite() || !max.is_finite() || max <= min {
            return Err(Error::contract(format!("invalid clipping range [{min}, {max}]")));
        }
        Ok(Self { bits, min, max })
    }

    /// Parameters whose range is the observed range of `f`.
    pub fn fitted(bits: u8, f: &FeatureTensor) -> Result<Self> {
        let (lo, hi) = fit_range(f);
        Self::new(bits, lo, hi)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    /// Highest level, `2ⁿ − 1`.
    pub fn max_level(&self) -> u16 {
        ((1u32 << self.bits) - 1) as u16
    }

    /// Width of one quantization bin.
    pub fn step(&self) -> f64 {
        (self.max - self.min) / self.max_level() as f64
    }

    pub fn quantize_value(&self, v: f64) -> u16 {
        let unit = ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0);
        // f64::round rounds half away from zero.
        (unit * self.max_level() as f64).round() as u16
    }

    pub fn dequantize_value(&self, level: u16) -> f64 {
        self.min + (self.max - self.min) * level as f64 / self.max_level() as f64
    }
}

/// Sidecar text form: `n=<int> min=<float> max=<float>`. Floats use the
/// shortest representation that parses back to the same value.
impl fmt::Display for QuantParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n={} min={:?} max={:?}", self.bits, self.min, self.max)
    }
}

impl FromStr for QuantParams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mut bits, mut min, mut max) = (None, None, None);
        for tok in s.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::data(format!("bad sidecar token {tok:?}")))?;
            let bad = |_| Error::data(format!("bad sidecar value {tok:?}"));
            match k {
                "n" => bits = Some(v.parse::<u8>().map_err(|e| bad(e.to_string()))?),
                "min" => min = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
                "max" => max = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
                _ => return Err(Error::data(format!("unknown sidecar key {k:?}"))),
            }
        }
        match (bits, min, max) {
            (Some(n), Some(lo), Some(hi)) => Self::new(n, lo, hi),
            _ => Err(Error::data("sidecar needs n, min and max")),
        }
    }
}

/// Integer quantization levels with the shape of a [`FeatureTensor`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u16>,
}

impl LevelTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "level tensor dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "level tensor {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn channel_slice(&self, i: usize) -> &[u16] {
        let n = self.height * self.width;
        &self.data[i * n..(i + 1) * n]
    }
}

pub fn quantize(f: &FeatureTensor, q: &QuantParams) -> LevelTensor {
    let data = f.data().iter().map(|&v| q.quantize_value(v)).collect();
    LevelTensor { height: f.height(), width: f.width(), channels: f.channels(), data }
}

pub fn dequantize(levels: &LevelTensor, q: &QuantParams) -> Result<FeatureTensor> {
    let top = q.max_level();
    if let Some(&bad) = levels.data.iter().find(|&&l| l > top) {
        return Err(Error::data(format!("level {bad} exceeds {top} for {}-bit quantizer", q.bits())));
    }
    let data = levels.data.iter().map(|&l| q.dequantize_value(l)).collect();
    FeatureTensor::new(levels.height, levels.width, levels.channels, data)
}

/// Observed `(min, max)` of `f`; a degenerate range `[v, v]` widens to `[v, v + 1]`.
pub fn fit_range(f: &FeatureTensor) -> (f64, f64) {
    range_of(f.data())
}

/// Per-channel variant of [`fit_range`].
pub fn fit_range_per_channel(f: &FeatureTensor) -> Vec<(f64, f64)> {
    (0..f.channels()).map(|i| range_of(f.channel_slice(i).unwrap())).collect()
}

fn range_of(values: &[f64]) -> (f64, f64) {
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

/// Quantizes each channel with its own parameters.
pub fn quantize_per_channel(f: &FeatureTensor, params: &[QuantParams]) -> Result<LevelTensor> {
    if params.len() != f.channels() {
        return Err(Error::shape(format!("{} channel params for {} channels", params.len(), f.channels())));
    }
    let mut data = Vec::with_capacity(f.len());
    for (i, q) in params.iter().enumerate() {
        data.extend(f.channel_slice(i)?.iter().map(|&v| q.quantize_value(v)));
    }
    LevelTensor::new(f.height(), f.width(), f.channels(), data)
}

pub fn dequantize_per_channel(levels: &LevelTensor, params: &[QuantParams]) -> Result<FeatureTensor> {
    if params.len() != levels.channels {
        return Err(Error::shape(format!("{} channel params for {} channels", params.len(), levels.channels)));
    }
    let mut data = Vec::with_capacity(levels.len());
    for (i, q) in params.iter().enumerate() {
        for &l in levels.channel_slice(i) {
            if l > q.max_level() {
                return Err(Error::data(format!("level {l} exceeds {} in channel {i}", q.max_level())));
            }
            data.push(q.dequantize_value(l));
        }
    }
    FeatureTensor::new(levels.height, levels.width, levels.channels, data)
}

/// Training-time Q-layer: adds `Uniform(−step/2, step/2)` noise when
/// `training` is set, otherwise passes `x` through untouched.
pub fn noise_emulation<R: Rng + ?Sized>(
    tape: &Tape,
    x: Var,
    q: &QuantParams,
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    if !training {
        return Ok(x);
    }
    tape.add_uniform_noise(x, q.step(), rng)
}
