//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! walks the record once in reverse and returns the gradient of a scalar root
//! with respect to every leaf created with `requires_grad = true`.
//!
//! A tape is single-use: after one backward pass further recording or a second
//! backward pass is rejected with [`Error::Contract`].
//!
//! ```
//! use cift_core::autodiff::Tape;
//! use cift_core::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![1], vec![3.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.mean(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rateloss::{self, sign_with, RateLossConfig};
use crate::tensor::{FeatureTensor, Tensor};

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Conv2d { input: usize, weight: usize, bias: Option<usize> },
    ConvTranspose2d { input: usize, weight: usize, bias: Option<usize> },
    AvgPool2(usize),
    Relu(usize),
    Abs(usize, f64),
    Mean(usize),
    Sum(usize),
    Log(usize),
    Exp(usize),
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize> },
    Mse(usize, usize),
    Mae(usize, usize),
    StraightThrough(usize),
    RateLoss(usize, RateLossConfig),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    /// Some leaf upstream of this node requires a gradient.
    needs_grad: bool,
    op: Op,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Recorded computation graph. Confined to one thread (`!Sync`).
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a backward pass, keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v.id)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.map.remove(&v.id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.check(v).expect("var from another tape");
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.check(v).expect("var from another tape");
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.check(v).expect("var from another tape");
        self.nodes.borrow()[v.id].value.item()
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op, needs_grad: bool) -> Var {
        assert!(!self.consumed.get(), "recording on a consumed tape");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, needs_grad, op });
        Var { tape: self.id, id: nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id {
            return Err(Error::contract("variable belongs to a different tape"));
        }
        if self.consumed.get() {
            return Err(Error::contract("tape already consumed by backward()"));
        }
        Ok(())
    }

    /// Runs `f` over the input values, then records the returned value with `op`.
    fn record(
        &self,
        inputs: &[Var],
        op: Op,
        f: impl FnOnce(&[&Tensor]) -> Result<Tensor>,
    ) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let (value, needs_grad) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            let needs = inputs.iter().any(|v| nodes[v.id].needs_grad);
            (f(&vals)?, needs)
        };
        Ok(self.push(value, false, op, needs_grad))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.record(&[a, b], Op::Add(a.id, b.id), |v| zip(v[0], v[1], "add", |x, y| x + y))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.record(&[a, b], Op::Sub(a.id, b.id), |v| zip(v[0], v[1], "sub", |x, y| x - y))
    }

    /// Elementwise product of equally shaped operands.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.record(&[a, b], Op::Mul(a.id, b.id), |v| zip(v[0], v[1], "mul", |x, y| x * y))
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        self.record(&[a], Op::Scale(a.id, s), |v| Ok(v[0].map(|x| x * s)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.record(&[a, b], Op::MatMul(a.id, b.id), |v| {
            Ok(v[0].as_matrix()?.matmul(&v[1].as_matrix()?)?.into())
        })
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.record(&[a], Op::Transpose(a.id), |v| Ok(v[0].as_matrix()?.transpose().into()))
    }

    /// Stride-1 convolution with "same" zero padding.
    ///
    /// `input` is `[Cin, H, W]`, `weight` is `[Cout, Cin, k, k]` with odd `k`,
    /// `bias` (optional) is `[Cout]`. Output is `[Cout, H, W]`.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let mut ins = vec![input, weight];
        ins.extend(bias);
        let op = Op::Conv2d { input: input.id, weight: weight.id, bias: bias.map(|b| b.id) };
        self.record(&ins, op, |v| {
            let g = ConvGeom::conv(v[0].shape(), v[1].shape(), v.get(2).map(|b| b.shape()))?;
            let mut out = vec![0.0; g.cout * g.h * g.w];
            g.conv_forward(v[0].data(), v[1].data(), &mut out);
            if let Some(b) = v.get(2) {
                add_channel_bias(&mut out, b.data(), g.h * g.w);
            }
            Tensor::new(vec![g.cout, g.h, g.w], out)
        })
    }

    /// Stride-2 transposed convolution doubling the spatial size.
    ///
    /// `input` is `[Cin, H, W]`, `weight` is `[Cin, Cout, k, k]` with even `k`
    /// (padding `(k − 2) / 2`), `bias` is `[Cout]`. Output is `[Cout, 2H, 2W]`.
    pub fn conv_transpose2d(&self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let mut ins = vec![input, weight];
        ins.extend(bias);
        let op = Op::ConvTranspose2d { input: input.id, weight: weight.id, bias: bias.map(|b| b.id) };
        self.record(&ins, op, |v| {
            let g = ConvGeom::tconv(v[0].shape(), v[1].shape(), v.get(2).map(|b| b.shape()))?;
            let (oh, ow) = (2 * g.h, 2 * g.w);
            let mut out = vec![0.0; g.cout * oh * ow];
            g.tconv_forward(v[0].data(), v[1].data(), &mut out);
            if let Some(b) = v.get(2) {
                add_channel_bias(&mut out, b.data(), oh * ow);
            }
            Tensor::new(vec![g.cout, oh, ow], out)
        })
    }

    /// 2×2 average pooling with stride 2 on a `[C, H, W]` tensor with even H, W.
    pub fn avg_pool2(&self, a: Var) -> Result<Var> {
        self.record(&[a], Op::AvgPool2(a.id), |v| {
            let (c, h, w) = chw(v[0].shape(), "avg_pool2")?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(format!("avg_pool2 needs even H, W, got {h}x{w}")));
            }
            let (oh, ow) = (h / 2, w / 2);
            let x = v[0].data();
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let base = ch * h * w + 2 * y * w + 2 * xx;
                        out[(ch * oh + y) * ow + xx] =
                            0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
                    }
                }
            }
            Tensor::new(vec![c, oh, ow], out)
        })
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.record(&[a], Op::Relu(a.id), |v| Ok(v[0].map(|x| x.max(0.0))))
    }

    /// Elementwise `|x|`; the derivative at 0 is `+1`.
    pub fn abs(&self, a: Var) -> Result<Var> {
        self.abs_with(a, 1.0)
    }

    pub fn abs_with(&self, a: Var, grad_at_zero: f64) -> Result<Var> {
        self.record(&[a], Op::Abs(a.id, grad_at_zero), |v| Ok(v[0].map(f64::abs)))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.record(&[a], Op::Mean(a.id), |v| {
            Ok(Tensor::scalar(v[0].data().iter().sum::<f64>() / v[0].len() as f64))
        })
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.record(&[a], Op::Sum(a.id), |v| Ok(Tensor::scalar(v[0].data().iter().sum())))
    }

    /// Natural log; every input element must be positive.
    pub fn log(&self, a: Var) -> Result<Var> {
        self.record(&[a], Op::Log(a.id), |v| {
            if v[0].data().iter().any(|&x| x <= 0.0 || !x.is_finite()) {
                return Err(Error::contract("log of a non-positive or non-finite value"));
            }
            Ok(v[0].map(f64::ln))
        })
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.record(&[a], Op::Exp(a.id), |v| Ok(v[0].map(f64::exp)))
    }

    /// Mean per-pixel softmax cross-entropy of `[K, H, W]` logits against
    /// `H·W` class labels (row-major).
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let op = Op::SoftmaxCrossEntropy { logits: logits.id, labels: labels.to_vec() };
        self.record(&[logits], op, |v| {
            let (k, h, w) = chw(v[0].shape(), "softmax_cross_entropy")?;
            let n = h * w;
            if labels.len() != n {
                return Err(Error::shape(format!("{} labels for {n} pixels", labels.len())));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::shape(format!("label {bad} out of range for {k} classes")));
            }
            let x = v[0].data();
            let mut total = 0.0;
            for (p, &label) in labels.iter().enumerate() {
                let max = (0..k).map(|c| x[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..k).map(|c| (x[c * n + p] - max).exp()).sum::<f64>().ln();
                total += lse - x[label * n + p];
            }
            Ok(Tensor::scalar(total / n as f64))
        })
    }

    /// Mean squared difference.
    pub fn mse(&self, pred: Var, target: Var) -> Result<Var> {
        self.record(&[pred, target], Op::Mse(pred.id, target.id), |v| {
            let d = zip(v[0], v[1], "mse", |a, b| a - b)?;
            Ok(Tensor::scalar(d.data().iter().map(|x| x * x).sum::<f64>() / d.len() as f64))
        })
    }

    /// Mean absolute difference; the derivative at equality is `+1`.
    pub fn mae(&self, pred: Var, target: Var) -> Result<Var> {
        self.record(&[pred, target], Op::Mae(pred.id, target.id), |v| {
            let d = zip(v[0], v[1], "mae", |a, b| a - b)?;
            Ok(Tensor::scalar(d.data().iter().map(|x| x.abs()).sum::<f64>() / d.len() as f64))
        })
    }

    /// Adds i.i.d. `Uniform(−amplitude/2, +amplitude/2)` noise. The backward
    /// pass treats the noise as a constant, so the Jacobian is the identity.
    pub fn add_uniform_noise<R: Rng + ?Sized>(&self, x: Var, amplitude: f64, rng: &mut R) -> Result<Var> {
        if !(amplitude >= 0.0) || !amplitude.is_finite() {
            return Err(Error::contract(format!("noise amplitude must be finite and >= 0, got {amplitude}")));
        }
        self.record(&[x], Op::StraightThrough(x.id), |v| {
            if amplitude == 0.0 {
                return Ok(v[0].clone());
            }
            let data = v[0].data().iter().map(|&x| x + amplitude * (rng.random::<f64>() - 0.5)).collect();
            Tensor::new(v[0].shape().to_vec(), data)
        })
    }

    /// Compressibility loss of a `[C, H, W]` node (see [`crate::rateloss`]).
    pub fn rate_loss(&self, features: Var, cfg: RateLossConfig) -> Result<Var> {
        self.record(&[features], Op::RateLoss(features.id, cfg), |v| {
            let f = FeatureTensor::from_tensor(v[0])?;
            Ok(Tensor::scalar(rateloss::rate_loss(&f)))
        })
    }

    /// Computes gradients of the scalar `root` and consumes the tape.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        self.consumed.set(true);
        let nodes = self.nodes.borrow();
        if !nodes[root.id].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward() needs a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            let mut acc = |target: usize, contrib: Tensor| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => {
                        for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, zip(&g, val(*b), "", |x, y| x * y)?);
                    acc(*b, zip(&g, val(*a), "", |x, y| x * y)?);
                }
                Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
                Op::MatMul(a, b) => {
                    let gm = g.as_matrix()?;
                    let am = val(*a).as_matrix()?;
                    let bm = val(*b).as_matrix()?;
                    acc(*a, gm.matmul(&bm.transpose())?.into());
                    acc(*b, am.transpose().matmul(&gm)?.into());
                }
                Op::Transpose(a) => acc(*a, g.as_matrix()?.transpose().into()),
                Op::Conv2d { input, weight, bias } => {
                    let geom = ConvGeom::conv(val(*input).shape(), val(*weight).shape(), None)?;
                    let mut gin = vec![0.0; val(*input).len()];
                    let mut gw = vec![0.0; val(*weight).len()];
                    geom.conv_backward(val(*input).data(), val(*weight).data(), g.data(), &mut gin, &mut gw);
                    if let Some(b) = bias {
                        acc(*b, channel_sums(&g, geom.cout)?);
                    }
                    acc(*input, Tensor::new(val(*input).shape().to_vec(), gin)?);
                    acc(*weight, Tensor::new(val(*weight).shape().to_vec(), gw)?);
                }
                Op::ConvTranspose2d { input, weight, bias } => {
                    let geom = ConvGeom::tconv(val(*input).shape(), val(*weight).shape(), None)?;
                    let mut gin = vec![0.0; val(*input).len()];
                    let mut gw = vec![0.0; val(*weight).len()];
                    geom.tconv_backward(val(*input).data(), val(*weight).data(), g.data(), &mut gin, &mut gw);
                    if let Some(b) = bias {
                        acc(*b, channel_sums(&g, geom.cout)?);
                    }
                    acc(*input, Tensor::new(val(*input).shape().to_vec(), gin)?);
                    acc(*weight, Tensor::new(val(*weight).shape().to_vec(), gw)?);
                }
                Op::AvgPool2(a) => {
                    let (c, h, w) = chw(val(*a).shape(), "avg_pool2")?;
                    let (oh, ow) = (h / 2, w / 2);
                    let mut gin = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                gin[(ch * h + y) * w + x] = 0.25 * g.data()[(ch * oh + y / 2) * ow + x / 2];
                            }
                        }
                    }
                    acc(*a, Tensor::new(vec![c, h, w], gin)?);
                }
                Op::Relu(a) => acc(*a, zip(&g, val(*a), "", |gy, x| if x > 0.0 { gy } else { 0.0 })?),
                Op::Abs(a, at_zero) => {
                    acc(*a, zip(&g, val(*a), "", |gy, x| gy * sign_with(x, *at_zero))?)
                }
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    acc(*a, Tensor::full(val(*a).shape(), g.item() / n));
                }
                Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::Log(a) => acc(*a, zip(&g, val(*a), "", |gy, x| gy / x)?),
                Op::Exp(a) => acc(*a, zip(&g, &node.value, "", |gy, y| gy * y)?),
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let lv = val(*logits);
                    let (k, h, w) = chw(lv.shape(), "softmax_cross_entropy")?;
                    let n = h * w;
                    let x = lv.data();
                    let scale = g.item() / n as f64;
                    let mut gl = vec![0.0; k * n];
                    for (p, &label) in labels.iter().enumerate() {
                        let max = (0..k).map(|c| x[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = (0..k).map(|c| (x[c * n + p] - max).exp()).sum();
                        for c in 0..k {
                            let prob = (x[c * n + p] - max).exp() / z;
                            let target = if c == label { 1.0 } else { 0.0 };
                            gl[c * n + p] = scale * (prob - target);
                        }
                    }
                    acc(*logits, Tensor::new(lv.shape().to_vec(), gl)?);
                }
                Op::Mse(a, b) => {
                    let n = val(*a).len() as f64;
                    let k = 2.0 * g.item() / n;
                    let d = zip(val(*a), val(*b), "", |x, y| k * (x - y))?;
                    acc(*b, d.map(|x| -x));
                    acc(*a, d);
                }
                Op::Mae(a, b) => {
                    let n = val(*a).len() as f64;
                    let k = g.item() / n;
                    let d = zip(val(*a), val(*b), "", |x, y| k * sign_with(x - y, 1.0))?;
                    acc(*b, d.map(|x| -x));
                    acc(*a, d);
                }
                Op::StraightThrough(a) => acc(*a, g),
                Op::RateLoss(a, cfg) => {
                    let f = FeatureTensor::from_tensor(val(*a))?;
                    let k = g.item();
                    let grad = rateloss::rate_loss_backward(&f, *cfg);
                    let data = grad.into_data().into_iter().map(|x| x * k).collect();
                    acc(*a, Tensor::new(val(*a).shape().to_vec(), data)?);
                }
            }
        }

        let map = grads
            .into_iter()
            .enumerate()
            .filter_map(|(id, g)| match (g, nodes[id].requires_grad) {
                (Some(g), true) => Some((id, g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { map })
    }
}

fn zip(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn chw(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!("{what} expects [C, H, W], got {shape:?}"))),
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, &b) in out.chunks_exact_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &Tensor, channels: usize) -> Result<Tensor> {
    let plane = g.len() / channels;
    let sums = g.data().chunks_exact(plane).map(|c| c.iter().sum()).collect();
    Tensor::new(vec![channels], sums)
}

/// Shapes shared by the convolution kernels. `h`, `w` are the input plane size.
struct ConvGeom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl ConvGeom {
    fn conv(input: &[usize], weight: &[usize], bias: Option<&[usize]>) -> Result<Self> {
        let (cin, h, w) = chw(input, "conv2d input")?;
        let &[cout, wcin, k, k2] = weight else {
            return Err(Error::shape(format!("conv2d weight must be 4-D, got {weight:?}")));
        };
        if wcin != cin || k != k2 || k % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d weight {weight:?} incompatible with input {input:?} (square odd kernel required)"
            )));
        }
        check_bias(bias, cout)?;
        Ok(Self { cin, cout, h, w, k, pad: k / 2 })
    }

    fn tconv(input: &[usize], weight: &[usize], bias: Option<&[usize]>) -> Result<Self> {
        let (cin, h, w) = chw(input, "conv_transpose2d input")?;
        let &[wcin, cout, k, k2] = weight else {
            return Err(Error::shape(format!("conv_transpose2d weight must be 4-D, got {weight:?}")));
        };
        if wcin != cin || k != k2 || k % 2 != 0 || k == 0 {
            return Err(Error::shape(format!(
                "conv_transpose2d weight {weight:?} incompatible with input {input:?} (square even kernel required)"
            )));
        }
        check_bias(bias, cout)?;
        Ok(Self { cin, cout, h, w, k, pad: (k - 2) / 2 })
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `kk`:
    /// output `o` reads input `o + kk − pad`.
    #[inline]
    fn conv_span(&self, kk: usize, n: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kk);
        let hi = (n + self.pad).saturating_sub(kk).min(n);
        (lo, hi.max(lo))
    }

    fn conv_forward(&self, x: &[f64], wt: &[f64], out: &mut [f64]) {
        let (h, w, k) = (self.h, self.w, self.k);
        for oc in 0..self.cout {
            let out_c = &mut out[oc * h * w..(oc + 1) * h * w];
            for ic in 0..self.cin {
                let x_c = &x[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    let (y0, y1) = self.conv_span(ky, h);
                    for kx in 0..k {
                        let wv = wt[((oc * self.cin + ic) * k + ky) * k + kx];
                        let (x0, x1) = self.conv_span(kx, w);
                        for y in y0..y1 {
                            let iy = y + ky - self.pad;
                            let src = &x_c[iy * w + x0 + kx - self.pad..iy * w + x1 + kx - self.pad];
                            let dst = &mut out_c[y * w + x0..y * w + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }

    fn conv_backward(&self, x: &[f64], wt: &[f64], g: &[f64], gin: &mut [f64], gw: &mut [f64]) {
        let (h, w, k) = (self.h, self.w, self.k);
        for oc in 0..self.cout {
            let g_c = &g[oc * h * w..(oc + 1) * h * w];
            for ic in 0..self.cin {
                let x_c = &x[ic * h * w..(ic + 1) * h * w];
                let gin_c = &mut gin[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    let (y0, y1) = self.conv_span(ky, h);
                    for kx in 0..k {
                        let widx = ((oc * self.cin + ic) * k + ky) * k + kx;
                        let wv = wt[widx];
                        let (x0, x1) = self.conv_span(kx, w);
                        let mut dw = 0.0;
                        for y in y0..y1 {
                            let iy = y + ky - self.pad;
                            let src = iy * w + x0 + kx - self.pad;
                            let len = x1 - x0;
                            let gs = &g_c[y * w + x0..y * w + x1];
                            let xs = &x_c[src..src + len];
                            let gis = &mut gin_c[src..src + len];
                            for ((gi, &gv), &xv) in gis.iter_mut().zip(gs).zip(xs) {
                                *gi += wv * gv;
                                dw += gv * xv;
                            }
                        }
                        gw[widx] += dw;
                    }
                }
            }
        }
    }

    /// Input row `i` and kernel tap `kk` land on output row `2i + kk − pad`.
    #[inline]
    fn tconv_span(&self, kk: usize, n: usize) -> (usize, usize) {
        // Need 0 <= 2i + kk - pad < 2n.
        let lo = if kk >= self.pad { 0 } else { (self.pad - kk).div_ceil(2) };
        let hi = ((2 * n + self.pad - kk).div_ceil(2)).min(n);
        (lo, hi.max(lo))
    }

    fn tconv_forward(&self, x: &[f64], wt: &[f64], out: &mut [f64]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let (oh, ow) = (2 * h, 2 * w);
        for ic in 0..self.cin {
            let x_c = &x[ic * h * w..(ic + 1) * h * w];
            for oc in 0..self.cout {
                let out_c = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
                for ky in 0..k {
                    let (y0, y1) = self.tconv_span(ky, h);
                    for kx in 0..k {
                        let wv = wt[((ic * self.cout + oc) * k + ky) * k + kx];
                        let (x0, x1) = self.tconv_span(kx, w);
                        for iy in y0..y1 {
                            let oy = 2 * iy + ky - self.pad;
                            let row = &mut out_c[oy * ow..(oy + 1) * ow];
                            for ix in x0..x1 {
                                row[2 * ix + kx - self.pad] += wv * x_c[iy * w + ix];
                            }
                        }
                    }
                }
            }
        }
    }

    fn tconv_backward(&self, x: &[f64], wt: &[f64], g: &[f64], gin: &mut [f64], gw: &mut [f64]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let (oh, ow) = (2 * h, 2 * w);
        for ic in 0..self.cin {
            let x_c = &x[ic * h * w..(ic + 1) * h * w];
            let gin_c = &mut gin[ic * h * w..(ic + 1) * h * w];
            for oc in 0..self.cout {
                let g_c = &g[oc * oh * ow..(oc + 1) * oh * ow];
                for ky in 0..k {
                    let (y0, y1) = self.tconv_span(ky, h);
                    for kx in 0..k {
                        let widx = ((ic * self.cout + oc) * k + ky) * k + kx;
                        let wv = wt[widx];
                        let (x0, x1) = self.tconv_span(kx, w);
                        let mut dw = 0.0;
                        for iy in y0..y1 {
                            let oy = 2 * iy + ky - self.pad;
                            let row = &g_c[oy * ow..(oy + 1) * ow];
                            for ix in x0..x1 {
                                let gv = row[2 * ix + kx - self.pad];
                                gin_c[iy * w + ix] += wv * gv;
                                dw += gv * x_c[iy * w + ix];
                            }
                        }
                        gw[widx] += dw;
                    }
                }
            }
        }
    }
}

fn check_bias(bias: Option<&[usize]>, cout: usize) -> Result<()> {
    match bias {
        Some(s) if s != [cout] => Err(Error::shape(format!("bias shape {s:?}, expected [{cout}]"))),
        _ => Ok(()),
    }
}
