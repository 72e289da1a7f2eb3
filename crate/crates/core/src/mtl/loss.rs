//! Task losses and the uncertainty-weighted total objective.

use std::f64::consts::LN_2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of each term in a loss or weight quadruple.
pub const SEG: usize = 0;
pub const DISP: usize = 1;
pub const RECON: usize = 2;
pub const RATE: usize = 3;

/// Trainable task weights, stored as logs: `w = exp(s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskWeights {
    pub log_weights: [f64; 4],
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self { log_weights: [0.0; 4] }
    }
}

impl TaskWeights {
    pub fn weights(&self) -> [f64; 4] {
        self.log_weights.map(f64::exp)
    }
}

/// Per-sample task losses: cross-entropy, MSE and MAE.
pub fn loss_seg(tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

pub fn loss_disp(tape: &Tape, pred: Var, target: Var) -> Result<Var> {
    tape.mse(pred, target)
}

pub fn loss_recon(tape: &Tape, pred: Var, target: Var) -> Result<Var> {
    tape.mae(pred, target)
}

fn check_finite(losses: &[f64; 4], include_rate: bool) -> Result<()> {
    let used = if include_rate { 4 } else { 3 };
    if let Some(bad) = losses[..used].iter().find(|l| !l.is_finite()) {
        return Err(Error::contract(format!("non-finite loss {bad}")));
    }
    Ok(())
}

/// The weighted objective
///
/// `w₁L₁ + w₂L₂ + w₃L₃ + w_r·L_r + log√(1/w₁) + Σᵢ₌₂,₃ log√(1/(2wᵢ)) + log√(1/(2w_r))`.
///
/// With `include_rate = false` the `w_r` term and its log barrier are dropped.
pub fn total_loss(losses: [f64; 4], w: &TaskWeights, include_rate: bool) -> Result<f64> {
    check_finite(&losses, include_rate)?;
    let s = w.log_weights;
    let ws = w.weights();
    let mut total = ws[SEG] * losses[SEG] - 0.5 * s[SEG];
    for i in [DISP, RECON] {
        total += ws[i] * losses[i] - 0.5 * (LN_2 + s[i]);
    }
    if include_rate {
        total += ws[RATE] * losses[RATE] - 0.5 * (LN_2 + s[RATE]);
    }
    Ok(total)
}

/// Gradient of [`total_loss`] with respect to the log-weights: `wᵢLᵢ − ½`.
pub fn total_loss_grad(losses: [f64; 4], w: &TaskWeights, include_rate: bool) -> Result<[f64; 4]> {
    check_finite(&losses, include_rate)?;
    let ws = w.weights();
    let mut g = [0.0; 4];
    for i in 0..4 {
        if i != RATE || include_rate {
            g[i] = ws[i] * losses[i] - 0.5;
        }
    }
    Ok(g)
}

/// [`total_loss`] recorded on a tape, with scalar loss and log-weight nodes.
pub fn total_loss_var(tape: &Tape, losses: [Var; 4], log_weights: [Var; 4], include_rate: bool) -> Result<Var> {
    let terms = if include_rate { 4 } else { 3 };
    let mut total = tape.constant(Tensor::scalar(-0.5 * LN_2 * (terms - 1) as f64));
    for i in 0..terms {
        let weighted = tape.mul(tape.exp(log_weights[i])?, losses[i])?;
        total = tape.add(total, weighted)?;
        total = tape.add(total, tape.scale(log_weights[i], -0.5)?)?;
    }
    Ok(total)
}

/// Weighted sum of task losses seen by the model parameters. The log barrier
/// terms are constant with respect to the model and omitted.
pub fn weighted_task_sum(tape: &Tape, losses: &[Var], w: &TaskWeights) -> Result<Var> {
    let ws = w.weights();
    let mut total = tape.scale(losses[0], ws[0])?;
    for (i, &l) in losses.iter().enumerate().skip(1) {
        total = tape.add(total, tape.scale(l, ws[i])?)?;
    }
    Ok(total)
}
