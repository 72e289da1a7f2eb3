//! End-to-end training of the toy model with the noise-emulated Q-layer.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::Config;
use super::data::{derive_seed, make_dataset, SyntheticSample};
use super::loss::{loss_disp, loss_recon, loss_seg, total_loss_grad, weighted_task_sum, TaskWeights};
use super::model::{Checkpoint, Head, ToyModel};
use super::optim::{poly_lr, Adam};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::eval::entropy_bits;
use crate::quantizer::{noise_emulation, quantize};
use crate::rateloss::RateLossConfig;
use crate::tensor::{FeatureTensor, Tensor};

pub const LOG_HEADER: &str = "epoch,L1,L2,L3,Lr,w1,w2,w3,wr,entropy_bits";

/// Epoch means of the losses and quantized-feature entropy, with the task
/// weights that were in effect during the epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: [f64; 4],
    pub weights: [f64; 4],
    pub entropy_bits: f64,
}

pub fn format_log(log: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for e in log {
        write!(s, "{}", e.epoch).unwrap();
        for v in e.losses.iter().chain(&e.weights) {
            write!(s, ",{v}").unwrap();
        }
        writeln!(s, ",{}", e.entropy_bits).unwrap();
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

pub fn train_set(cfg: &Config) -> Result<Vec<SyntheticSample>> {
    make_dataset(cfg.data_seed, cfg.train_samples)
}

pub fn test_set(cfg: &Config) -> Result<Vec<SyntheticSample>> {
    make_dataset(derive_seed(cfg.data_seed, u64::MAX), cfg.test_samples)
}

struct StepOut {
    grads: Vec<Tensor>,
    losses: [f64; 4],
    entropy: f64,
}

fn sample_step(
    model: &ToyModel,
    weights: &TaskWeights,
    cfg: &Config,
    sample: &SyntheticSample,
    rng: &mut ChaCha8Rng,
) -> Result<StepOut> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let image = tape.constant(sample.image.clone());
    let features = model.encode(&tape, &bound, image)?;

    let detached = FeatureTensor::from_tensor(&tape.value(features))
        .map_err(|e| Error::Diverged(format!("bottleneck is not finite: {e}")))?;
    let q = cfg.quant_range.params(cfg.bits, &detached)?;
    let entropy = entropy_bits(quantize(&detached, &q).data());
    let rate = tape.rate_loss(features, RateLossConfig::default())?;

    let noisy = noise_emulation(&tape, features, &q, rng, true)?;
    let seg = model.decode(&tape, &bound, Head::Seg, noisy)?;
    let disp = model.decode(&tape, &bound, Head::Disp, noisy)?;
    let rec = model.decode(&tape, &bound, Head::Recon, noisy)?;
    let l1 = loss_seg(&tape, seg, &sample.labels)?;
    let l2 = loss_disp(&tape, disp, tape.constant(sample.disparity.clone()))?;
    let l3 = loss_recon(&tape, rec, image)?;

    let mut terms = vec![l1, l2, l3];
    if cfg.include_rate {
        terms.push(rate);
    }
    let losses = [l1, l2, l3, rate].map(|v| tape.item(v));
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::Diverged(format!("non-finite loss {losses:?}")));
    }
    let root = weighted_task_sum(&tape, &terms, weights)?;
    let mut g = tape.backward(root)?;
    let grads = bound
        .vars()
        .iter()
        .zip(model.params())
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(StepOut { grads, losses, entropy })
}

/// The untrained model that [`train`] starts from.
pub fn initial_model(cfg: &Config) -> Result<ToyModel> {
    ToyModel::new(cfg.encoder, derive_seed(cfg.seed, 0))
}

/// Trains from a fresh initialisation seeded by `cfg.seed`.
///
/// The model gets one Adam step per batch with polynomially decaying learning
/// rate; the task weights get one Adam step per epoch from the epoch-mean
/// losses. Results depend only on the config and data, not on thread count.
pub fn train(cfg: &Config, data: &[SyntheticSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut model = initial_model(cfg)?;
    let mut weights = TaskWeights::default();
    let mut adam = Adam::new(model.params().iter().map(Tensor::len));
    let mut weight_adam = Adam::new([4]);

    let batches_per_epoch = data.len().div_ceil(cfg.batch);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, 1 + epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut sums = [0.0; 4];
        let mut entropy = 0.0;

        for batch in order.chunks(cfg.batch) {
            let outs: Vec<StepOut> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, i as u64));
                    sample_step(&model, &weights, cfg, &data[i], &mut rng)
                })
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::Diverged(m) => Error::Diverged(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;

            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
            for out in &outs {
                for (acc, g) in grads.iter_mut().zip(&out.grads) {
                    for (a, v) in acc.iter_mut().zip(g.data()) {
                        *a += scale * v;
                    }
                }
                for (s, l) in sums.iter_mut().zip(out.losses) {
                    *s += l;
                }
                entropy += out.entropy;
            }
            let lr = poly_lr(cfg.lr, step, total_steps);
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut param_refs: Vec<&mut [f64]> = model.params_mut().iter_mut().map(Tensor::data_mut).collect();
            adam.step(lr, &mut param_refs, &grad_refs);
            step += 1;
        }

        let n = data.len() as f64;
        let means = sums.map(|s| s / n);
        log.push(EpochLog { epoch: epoch + 1, losses: means, weights: weights.weights(), entropy_bits: entropy / n });
        let g = total_loss_grad(means, &weights, cfg.include_rate)?;
        weight_adam.step(cfg.weight_lr, &mut [&mut weights.log_weights], &[&g]);
        if model.params().iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged(format!("epoch {}: non-finite parameters", epoch + 1)));
        }
    }

    model.round_to_f32();
    weights.log_weights = weights.log_weights.map(|v| v as f32 as f64);
    Ok(TrainOutcome { checkpoint: Checkpoint { model, weights }, log })
}
