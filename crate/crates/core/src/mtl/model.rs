//! Toy convolutional encoder with three task decoders sharing its bottleneck.
//!
//! Encoder: `downsamples` × (3×3 conv, ReLU, 2×2 average pool) followed by a
//! 3×3 conv and ReLU producing the bottleneck. Each decoder mirrors it with
//! stride-2 4×4 transposed convolutions and ends in a 3×3 conv head.
//!
//! Checkpoint files are a sequence of entries, each a `u16` LE name length,
//! the UTF-8 name and an FTEN blob, read until end of file. Order: `arch`
//! (`[width, bottleneck_channels, downsamples]`), the parameters in model
//! order, `task_log_weights` (`[s₁, s₂, s₃, s_r]`). Four-dimensional weights
//! `[A, B, k, k]` are stored with `C = A·B`, `H = W = k`; vectors as `1×len×1`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{IMAGE_SIZE, NUM_CLASSES};
use super::loss::TaskWeights;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{FeatureTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelArch {
    /// Channels of the first encoder stage; later stages use twice this.
    pub width: usize,
    pub bottleneck_channels: usize,
    pub downsamples: usize,
}

impl ModelArch {
    /// 8×8×16 bottleneck.
    pub const ENCODER1: ModelArch = ModelArch { width: 8, bottleneck_channels: 16, downsamples: 3 };
    /// 16×16×8 bottleneck: one stage shallower, half the channels.
    pub const ENCODER2: ModelArch = ModelArch { width: 8, bottleneck_channels: 8, downsamples: 2 };

    /// `(H, W, C)` of the bottleneck for 64×64 inputs.
    pub fn bottleneck_shape(&self) -> (usize, usize, usize) {
        let side = IMAGE_SIZE >> self.downsamples;
        (side, side, self.bottleneck_channels)
    }

    fn stage_channels(&self, i: usize) -> usize {
        self.width << i.min(1)
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.bottleneck_channels == 0 || self.downsamples == 0 || self.downsamples > 5 {
            return Err(Error::Config(format!("invalid model architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Seg,
    Disp,
    Recon,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Seg, Head::Disp, Head::Recon];

    fn prefix(self) -> &'static str {
        match self {
            Head::Seg => "seg",
            Head::Disp => "disp",
            Head::Recon => "rec",
        }
    }

    fn out_channels(self) -> usize {
        match self {
            Head::Seg => NUM_CLASSES,
            Head::Disp => 1,
            Head::Recon => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerKind {
    Conv,
    TConv,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    kind: LayerKind,
    cin: usize,
    cout: usize,
    k: usize,
}

impl Layer {
    fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv => vec![self.cout, self.cin, self.k, self.k],
            LayerKind::TConv => vec![self.cin, self.cout, self.k, self.k],
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv => self.cin * self.k * self.k,
            // Each output pixel of a stride-2 transposed conv sees a quarter of the taps.
            LayerKind::TConv => self.cin * self.k * self.k / 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    arch: ModelArch,
    layers: Vec<Layer>,
    /// Encoder layers come first, then `decoder_len` layers per head.
    encoder_len: usize,
    decoder_len: usize,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// A model's parameters recorded on one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ToyModel {
    /// He-uniform initialisation from `seed`.
    pub fn new(arch: ModelArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::new();
        let mut names = Vec::new();
        let mut cin = 3;
        for i in 0..arch.downsamples {
            let cout = arch.stage_channels(i);
            layers.push(Layer { kind: LayerKind::Conv, cin, cout, k: 3 });
            cin = cout;
        }
        layers.push(Layer { kind: LayerKind::Conv, cin, cout: arch.bottleneck_channels, k: 3 });
        let encoder_len = layers.len();
        for i in 0..encoder_len {
            names.push(format!("enc.{i}"));
        }
        for head in Head::ALL {
            let mut cin = arch.bottleneck_channels;
            for j in 0..arch.downsamples {
                let cout = arch.stage_channels(arch.downsamples - 1 - j);
                layers.push(Layer { kind: LayerKind::TConv, cin, cout, k: 4 });
                cin = cout;
            }
            layers.push(Layer { kind: LayerKind::Conv, cin, cout: head.out_channels(), k: 3 });
            for j in 0..=arch.downsamples {
                names.push(format!("{}.{j}", head.prefix()));
            }
        }
        let decoder_len = arch.downsamples + 1;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(2 * layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let is_head = i >= encoder_len && (i - encoder_len) % decoder_len == decoder_len - 1;
            // Heads are linear, so they get the smaller LeCun-style bound.
            let gain = if is_head { 3.0 } else { 6.0 };
            let bound = (gain / layer.fan_in() as f64).sqrt();
            let shape = layer.weight_shape();
            let n: usize = shape.iter().product();
            // Drawn at f32 precision so an untrained model survives a checkpoint round trip.
            let w = (0..n).map(|_| rng.random_range(-bound..bound) as f32 as f64).collect();
            params.push(Tensor::new(shape, w)?);
            params.push(Tensor::zeros(&[layer.cout]));
        }
        let names = names.iter().flat_map(|n| [format!("{n}.w"), format!("{n}.b")]).collect();
        Ok(Self { arch, layers, encoder_len, decoder_len, names, params })
    }

    pub fn arch(&self) -> ModelArch {
        self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`, as trainable leaves if `trainable`.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect() }
    }

    fn layer(&self, tape: &Tape, bound: &Bound, index: usize, x: Var, relu: bool) -> Result<Var> {
        let (w, b) = (bound.vars[2 * index], bound.vars[2 * index + 1]);
        let y = match self.layers[index].kind {
            LayerKind::Conv => tape.conv2d(x, w, Some(b))?,
            LayerKind::TConv => tape.conv_transpose2d(x, w, Some(b))?,
        };
        if relu {
            tape.relu(y)
        } else {
            Ok(y)
        }
    }

    /// `[3, 64, 64]` image to the non-negative `[C, H, W]` bottleneck.
    pub fn encode(&self, tape: &Tape, bound: &Bound, image: Var) -> Result<Var> {
        let mut x = image;
        for i in 0..self.encoder_len {
            x = self.layer(tape, bound, i, x, true)?;
            if i + 1 < self.encoder_len {
                x = tape.avg_pool2(x)?;
            }
        }
        Ok(x)
    }

    /// Bottleneck to the task output at input resolution.
    pub fn decode(&self, tape: &Tape, bound: &Bound, head: Head, features: Var) -> Result<Var> {
        let start = self.encoder_len + self.decoder_len * Head::ALL.iter().position(|&h| h == head).unwrap();
        let mut x = features;
        for j in 0..self.decoder_len {
            x = self.layer(tape, bound, start + j, x, j + 1 < self.decoder_len)?;
        }
        Ok(x)
    }

    /// Bottleneck of one image, computed without recording gradients.
    pub fn features(&self, image: &Tensor) -> Result<FeatureTensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(image.clone());
        let f = self.encode(&tape, &bound, x)?;
        FeatureTensor::from_tensor(&tape.value(f))
    }

    /// All three task outputs for a bottleneck tensor.
    pub fn heads(&self, features: &FeatureTensor) -> Result<[Tensor; 3]> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let f = tape.constant(features.to_tensor());
        let mut out = Vec::with_capacity(3);
        for head in Head::ALL {
            let y = self.decode(&tape, &bound, head, f)?;
            out.push(tape.value(y));
        }
        Ok(out.try_into().unwrap())
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Trained model plus task weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ToyModel,
    pub weights: TaskWeights,
}

fn tensor_to_ften(t: &Tensor) -> Result<FeatureTensor> {
    let (h, w, c) = match *t.shape() {
        [a, b, k1, k2] => (k1, k2, a * b),
        [c, h, w] => (h, w, c),
        [n] => (1, n, 1),
        [] => (1, 1, 1),
        ref s => return Err(Error::shape(format!("cannot store tensor of shape {s:?}"))),
    };
    FeatureTensor::new(h, w, c, t.data().to_vec())
}

fn write_entry<W: Write>(w: &mut W, name: &str, t: &FeatureTensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::contract("entry name too long"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    t.write_ften(w)
}

fn read_entry<R: BufRead>(r: &mut R) -> Result<Option<(String, FeatureTensor)>> {
    if r.fill_buf()?.is_empty() {
        return Ok(None);
    }
    let mut len = [0u8; 2];
    r.read_exact(&mut len).map_err(|_| Error::Data("truncated checkpoint entry".into()))?;
    let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
    r.read_exact(&mut name).map_err(|_| Error::Data("truncated checkpoint entry name".into()))?;
    let name = String::from_utf8(name).map_err(|_| Error::Data("checkpoint entry name is not UTF-8".into()))?;
    let t = FeatureTensor::read_ften(r)?;
    Ok(Some((name, t)))
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let a = self.model.arch;
        let arch = FeatureTensor::new(
            1,
            3,
            1,
            vec![a.width as f64, a.bottleneck_channels as f64, a.downsamples as f64],
        )?;
        write_entry(&mut w, "arch", &arch)?;
        for (name, p) in self.model.names.iter().zip(&self.model.params) {
            write_entry(&mut w, name, &tensor_to_ften(p)?)?;
        }
        let s = FeatureTensor::new(1, 4, 1, self.weights.log_weights.to_vec())?;
        write_entry(&mut w, "task_log_weights", &s)?;
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let (name, arch) = read_entry(&mut r)?.ok_or_else(|| Error::Data("empty checkpoint".into()))?;
        if name != "arch" || arch.len() != 3 {
            return Err(Error::Data("checkpoint must start with an `arch` entry of 3 values".into()));
        }
        let v = arch.data();
        let arch = ModelArch { width: v[0] as usize, bottleneck_channels: v[1] as usize, downsamples: v[2] as usize };
        let mut model = ToyModel::new(arch, 0)?;
        for i in 0..model.params.len() {
            let (name, t) = read_entry(&mut r)?
                .ok_or_else(|| Error::Data(format!("checkpoint ends before `{}`", model.names[i])))?;
            if name != model.names[i] || t.len() != model.params[i].len() {
                return Err(Error::Data(format!(
                    "checkpoint entry `{name}` ({} values) does not match `{}` ({} values)",
                    t.len(),
                    model.names[i],
                    model.params[i].len()
                )));
            }
            model.params[i] = Tensor::new(model.params[i].shape().to_vec(), t.into_data())?;
        }
        let (name, s) = read_entry(&mut r)?.ok_or_else(|| Error::Data("checkpoint lacks task weights".into()))?;
        if name != "task_log_weights" || s.len() != 4 {
            return Err(Error::Data("bad `task_log_weights` entry".into()));
        }
        if read_entry(&mut r)?.is_some() {
            return Err(Error::Data("unexpected trailing checkpoint entries".into()));
        }
        let log_weights = s.data().try_into().unwrap();
        Ok(Self { model, weights: TaskWeights { log_weights } })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}
