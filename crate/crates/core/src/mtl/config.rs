//! Line-oriented `key = value` configuration shared by training, evaluation
//! and the experiment driver.
//!
//! Blank lines and lines starting with `#` are ignored. Values run to the end
//! of the line, so codec command templates may contain `=` and quotes.
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `epochs` | training epochs | 30 |
//! | `batch` | samples per model update | 4 |
//! | `lr` | initial model learning rate (polynomial decay to 0) | 0.003 |
//! | `weight_lr` | learning rate of the per-epoch task-weight update | 0.01 |
//! | `seed` | seed of one training run | 1 |
//! | `seeds` | comma list of seeds for `experiment` | 1,2,3 |
//! | `data_seed` | seed of the synthetic train/test sets | 2024 |
//! | `train_samples`, `test_samples` | dataset sizes | 96, 16 |
//! | `bits` | Q-layer bit depth | 8 |
//! | `include_rate` | add the compressibility loss | true |
//! | `encoder` | `enc1` (8×8×16) or `enc2` (16×16×8) | enc1 |
//! | `encoders` | comma list for `experiment` | enc1,enc2 |
//! | `quant_range` | `fitted` (per tensor min/max) or `lo,hi` | fitted |
//! | `grid` | tile grid `RxC` or `auto` | auto |
//! | `encode_cmd`, `decode_cmd` | external codec templates (`{in}`, `{out}`, `{q}`) | Pillow JPEG |
//! | `qualities` | external codec qualities | 95,90,85,80 |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::model::ModelArch;
use crate::error::{Error, Result};
use crate::quantizer::QuantParams;
use crate::tensor::FeatureTensor;

/// How the Q-layer clipping range is chosen for each feature tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantRange {
    Fitted,
    Fixed(f64, f64),
}

impl QuantRange {
    pub fn params(&self, bits: u8, f: &FeatureTensor) -> Result<QuantParams> {
        match *self {
            QuantRange::Fitted => QuantParams::fitted(bits, f),
            QuantRange::Fixed(lo, hi) => QuantParams::new(bits, lo, hi),
        }
    }
}

impl std::fmt::Display for QuantRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QuantRange::Fitted => f.write_str("fitted"),
            QuantRange::Fixed(lo, hi) => write!(f, "{lo:?},{hi:?}"),
        }
    }
}

impl FromStr for QuantRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "fitted" {
            return Ok(QuantRange::Fitted);
        }
        let (lo, hi) = s
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("quant_range must be `fitted` or `lo,hi`, got `{s}`")))?;
        let lo: f64 = parse_value("quant_range", lo.trim())?;
        let hi: f64 = parse_value("quant_range", hi.trim())?;
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::Config(format!("quant_range needs finite lo < hi, got `{s}`")));
        }
        Ok(QuantRange::Fixed(lo, hi))
    }
}

fn parse_encoder(s: &str) -> Result<ModelArch> {
    match s {
        "enc1" => Ok(ModelArch::ENCODER1),
        "enc2" => Ok(ModelArch::ENCODER2),
        _ => Err(Error::Config(format!("unknown encoder `{s}` (expected enc1 or enc2)"))),
    }
}

pub fn encoder_name(arch: ModelArch) -> String {
    if arch == ModelArch::ENCODER1 {
        "enc1".into()
    } else if arch == ModelArch::ENCODER2 {
        "enc2".into()
    } else {
        format!("custom-{}x{}x{}", arch.width, arch.bottleneck_channels, arch.downsamples)
    }
}

const JPEG_ENCODE: &str = "python3 -c \"import sys; from PIL import Image; \
Image.open(sys.argv[1]).save(sys.argv[2], 'JPEG', quality=int(sys.argv[3]))\" {in} {out} {q}";
const JPEG_DECODE: &str =
    "python3 -c \"import sys; from PIL import Image; Image.open(sys.argv[1]).save(sys.argv[2])\" {in} {out}";

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_lr: f64,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub bits: u8,
    pub include_rate: bool,
    pub encoder: ModelArch,
    pub encoders: Vec<ModelArch>,
    pub quant_range: QuantRange,
    pub grid: Option<(usize, usize)>,
    pub encode_cmd: String,
    pub decode_cmd: String,
    pub qualities: Vec<u32>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 4,
            lr: 3e-3,
            weight_lr: 0.01,
            seed: 1,
            seeds: vec![1, 2, 3],
            data_seed: 2024,
            train_samples: 96,
            test_samples: 16,
            bits: 8,
            include_rate: true,
            encoder: ModelArch::ENCODER1,
            encoders: vec![ModelArch::ENCODER1, ModelArch::ENCODER2],
            quant_range: QuantRange::Fitted,
            grid: None,
            encode_cmd: JPEG_ENCODE.into(),
            decode_cmd: JPEG_DECODE.into(),
            qualities: vec![95, 90, 85, 80],
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    let items: Vec<T> = v.split(',').map(|s| parse_value(key, s.trim())).collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("`{key}` must not be empty")));
    }
    Ok(items)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "weight_lr" => self.weight_lr = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "data_seed" => self.data_seed = parse_value(key, v)?,
            "train_samples" => self.train_samples = parse_value(key, v)?,
            "test_samples" => self.test_samples = parse_value(key, v)?,
            "bits" => self.bits = parse_value(key, v)?,
            "include_rate" => self.include_rate = parse_value(key, v)?,
            "encoder" => self.encoder = parse_encoder(v)?,
            "encoders" => self.encoders = v.split(',').map(|s| parse_encoder(s.trim())).collect::<Result<_>>()?,
            "quant_range" => self.quant_range = v.parse()?,
            "grid" => {
                self.grid = if v == "auto" {
                    None
                } else {
                    let (r, c) = v
                        .split_once('x')
                        .ok_or_else(|| Error::Config(format!("grid must be `auto` or `RxC`, got `{v}`")))?;
                    Some((parse_value(key, r)?, parse_value(key, c)?))
                }
            }
            "encode_cmd" => self.encode_cmd = v.to_string(),
            "decode_cmd" => self.decode_cmd = v.to_string(),
            "qualities" => self.qualities = parse_list(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be positive");
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return bad("train_samples and test_samples must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.weight_lr >= 0.0 && self.weight_lr.is_finite()) {
            return bad("lr and weight_lr must be finite and non-negative");
        }
        if !(1..=16).contains(&self.bits) {
            return bad("bits must be in 1..=16");
        }
        if self.encoders.is_empty() {
            return bad("encoders must not be empty");
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let grid = match self.grid {
            Some((r, c)) => format!("{r}x{c}"),
            None => "auto".into(),
        };
        let encoders: Vec<String> = self.encoders.iter().map(|&a| encoder_name(a)).collect();
        let entries: BTreeMap<&str, String> = [
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("weight_lr", format!("{:?}", self.weight_lr)),
            ("seed", self.seed.to_string()),
            ("seeds", join(&self.seeds)),
            ("data_seed", self.data_seed.to_string()),
            ("train_samples", self.train_samples.to_string()),
            ("test_samples", self.test_samples.to_string()),
            ("bits", self.bits.to_string()),
            ("include_rate", self.include_rate.to_string()),
            ("encoder", encoder_name(self.encoder)),
            ("encoders", encoders.join(",")),
            ("quant_range", self.quant_range.to_string()),
            ("grid", grid),
            ("encode_cmd", self.encode_cmd.clone()),
            ("decode_cmd", self.decode_cmd.clone()),
            ("qualities", join(&self.qualities)),
        ]
        .into_iter()
        .collect();
        for (k, v) in entries {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}
