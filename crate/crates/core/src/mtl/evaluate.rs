//! Coded-feature evaluation: quantize, tile, code, decode, run the task heads.

use super::config::Config;
use super::data::{SyntheticSample, NUM_CLASSES};
use super::model::Checkpoint;
use crate::autodiff::Tape;
use crate::error::Result;
use crate::eval::{irmse, miou, psnr, MetricKind, RdPoint};
use crate::featcodec::{bpfe, bpfe_from_bytes, decode_levels, encode_levels, tile, untile, Bitstream, ExternalCodec};
use crate::quantizer::{dequantize, quantize, LevelTensor, QuantParams};
use crate::tensor::{FeatureTensor, Tensor};

/// Label of the internal lossless codec in RD output.
pub const LOSSLESS_LABEL: &str = "cifb";
/// Label of the external codec in RD output.
pub const EXTERNAL_LABEL: &str = "external";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecSetting {
    Lossless,
    External(u32),
}

/// Predictions collected over a test set for one codec setting.
#[derive(Default)]
struct Accum {
    bpfe: f64,
    seg_pred: Vec<usize>,
    seg_gt: Vec<usize>,
    disp_pred: Vec<f64>,
    disp_gt: Vec<f64>,
    rec_pred: Vec<f64>,
    rec_gt: Vec<f64>,
    losses: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SettingResult {
    pub setting: CodecSetting,
    pub mean_bpfe: f64,
    pub miou: f64,
    pub irmse: f64,
    pub psnr: f64,
    /// Mean cross-entropy, MSE and MAE of the heads on the decoded features.
    pub task_losses: [f64; 3],
}

impl SettingResult {
    pub fn task_loss_sum(&self) -> f64 {
        self.task_losses.iter().sum()
    }

    pub fn rd_points(&self) -> Vec<RdPoint> {
        let (codec, quality) = match self.setting {
            CodecSetting::Lossless => (LOSSLESS_LABEL, None),
            CodecSetting::External(q) => (EXTERNAL_LABEL, Some(q)),
        };
        [(MetricKind::MIoU, self.miou), (MetricKind::Irmse, self.irmse), (MetricKind::Psnr, self.psnr)]
            .into_iter()
            .map(|(kind, metric)| RdPoint { codec: codec.to_string(), quality, bpfe: self.mean_bpfe, kind, metric })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// The lossless setting first, then one entry per external quality.
    pub settings: Vec<SettingResult>,
}

impl EvalReport {
    pub fn lossless(&self) -> &SettingResult {
        &self.settings[0]
    }

    pub fn rd_points(&self) -> Vec<RdPoint> {
        self.settings.iter().flat_map(SettingResult::rd_points).collect()
    }
}

fn argmax_labels(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[0];
    let n = logits.len() / k;
    let x = logits.data();
    (0..n)
        .map(|p| (0..k).fold(0, |best, c| if x[c * n + p] > x[best * n + p] { c } else { best }))
        .collect()
}

fn head_losses(outputs: &[Tensor; 3], sample: &SyntheticSample) -> Result<[f64; 3]> {
    let tape = Tape::new();
    let seg = tape.constant(outputs[0].clone());
    let disp = tape.constant(outputs[1].clone());
    let rec = tape.constant(outputs[2].clone());
    let l1 = tape.softmax_cross_entropy(seg, &sample.labels)?;
    let l2 = tape.mse(disp, tape.constant(sample.disparity.clone()))?;
    let l3 = tape.mae(rec, tape.constant(sample.image.clone()))?;
    Ok([l1, l2, l3].map(|v| tape.item(v)))
}

impl Accum {
    fn add(&mut self, ck: &Checkpoint, features: &FeatureTensor, bits: f64, sample: &SyntheticSample) -> Result<()> {
        let outputs = ck.model.heads(features)?;
        self.bpfe += bits;
        self.seg_pred.extend(argmax_labels(&outputs[0]));
        self.seg_gt.extend_from_slice(&sample.labels);
        self.disp_pred.extend_from_slice(outputs[1].data());
        self.disp_gt.extend_from_slice(sample.disparity.data());
        self.rec_pred.extend(outputs[2].data().iter().map(|v| v.clamp(0.0, 1.0)));
        self.rec_gt.extend_from_slice(sample.image.data());
        for (acc, l) in self.losses.iter_mut().zip(head_losses(&outputs, sample)?) {
            *acc += l;
        }
        Ok(())
    }

    fn finish(self, setting: CodecSetting, n: usize) -> Result<SettingResult> {
        let n = n as f64;
        Ok(SettingResult {
            setting,
            mean_bpfe: self.bpfe / n,
            miou: miou(&self.seg_pred, &self.seg_gt, NUM_CLASSES)?,
            irmse: irmse(&self.disp_pred, &self.disp_gt)?,
            psnr: psnr(&self.rec_pred, &self.rec_gt, 1.0)?,
            task_losses: self.losses.map(|l| l / n),
        })
    }
}

/// Quantized bottleneck of one sample with the Q-layer parameters used.
pub fn quantized_features(ck: &Checkpoint, cfg: &Config, sample: &SyntheticSample) -> Result<(LevelTensor, QuantParams)> {
    let f = ck.model.features(&sample.image)?;
    let q = cfg.quant_range.params(cfg.bits, &f)?;
    Ok((quantize(&f, &q), q))
}

/// Runs the internal lossless codec and, when `external` is given, the
/// external codec at every configured quality.
pub fn evaluate(
    ck: &Checkpoint,
    data: &[SyntheticSample],
    cfg: &Config,
    external: Option<&ExternalCodec>,
) -> Result<EvalReport> {
    let mut settings = vec![CodecSetting::Lossless];
    if external.is_some() {
        settings.extend(cfg.qualities.iter().map(|&q| CodecSetting::External(q)));
    }
    let mut accums: Vec<Accum> = settings.iter().map(|_| Accum::default()).collect();

    for sample in data {
        let (levels, q) = quantized_features(ck, cfg, sample)?;
        let (h, w, c) = (levels.height(), levels.width(), levels.channels());

        let stream = encode_levels(&levels, cfg.grid, &q)?;
        let decoded = decode_levels(&Bitstream::from_bytes(&stream.to_bytes())?)?;
        let features = dequantize(&decoded, &q)?;
        accums[0].add(ck, &features, bpfe(stream.total_bits(), h, w, c), sample)?;

        if let Some(codec) = external {
            let img = tile(&levels, cfg.grid)?;
            for (i, &quality) in cfg.qualities.iter().enumerate() {
                let out = codec.run(&img, cfg.bits, Some(quality))?;
                let features = dequantize(&untile(&out.decoded, c)?, &q)?;
                accums[i + 1].add(ck, &features, bpfe_from_bytes(out.coded_bytes, h, w, c), sample)?;
            }
        }
    }

    let settings = settings
        .into_iter()
        .zip(accums)
        .map(|(s, a)| a.finish(s, data.len()))
        .collect::<Result<_>>()?;
    Ok(EvalReport { settings })
}
