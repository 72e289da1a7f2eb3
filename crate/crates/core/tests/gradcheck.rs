//! Every autodiff primitive against central finite differences.

use cift_core::autodiff::{Tape, Var};
use cift_core::rateloss::RateLossConfig;
use cift_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

/// Uniform values in `±scale`, pushed at least `gap` away from zero so that
/// kinks at the origin are never straddled by the difference stencil.
fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64, gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-scale..scale);
            if v.abs() < gap { v.signum() * gap + v } else { v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.2..3.0)).collect()).unwrap()
}

type Build<'a> = dyn Fn(&Tape, &[Var]) -> Result<Var> + 'a;

/// Reduces a non-scalar node to a scalar with a fixed random projection.
fn project(tape: &Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let r = tape.constant(random(&mut rng, &shape, 1.0, 0.0));
    tape.sum(tape.mul(out, r)?)
}

fn forward(inputs: &[Tensor], build: &Build) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let root = build(&tape, &vars).unwrap();
    tape.item(root)
}

fn check(name: &str, seed: u64, inputs: Vec<Tensor>, build: &Build) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&tape, &vars).unwrap();
    let grads = tape.backward(root).unwrap();

    for (k, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(*var).expect("gradient for every input");
        assert_eq!(analytic.shape(), input.shape());
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            let fd = (forward(&plus, build) - forward(&minus, build)) / (2.0 * STEP);
            let a = analytic.data()[i];
            let err = (fd - a).abs();
            assert!(
                err <= REL_TOL * a.abs().max(fd.abs()) + 1e-9,
                "{name} seed {seed} input {k} elem {i}: analytic {a}, finite difference {fd}"
            );
        }
    }
}

fn for_seeds(name: &str, mut case: impl FnMut(&mut ChaCha8Rng, u64)) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        case(&mut rng, seed);
    }
}

#[test]
fn elementwise_arithmetic() {
    for_seeds("add", |rng, s| {
        let ins = vec![random(rng, &[3, 4], 2.0, 0.0), random(rng, &[3, 4], 2.0, 0.0)];
        check("add", s, ins, &|t, v| project(t, t.add(v[0], v[1])?, s));
    });
    for_seeds("sub", |rng, s| {
        let ins = vec![random(rng, &[2, 5], 2.0, 0.0), random(rng, &[2, 5], 2.0, 0.0)];
        check("sub", s, ins, &|t, v| project(t, t.sub(v[0], v[1])?, s));
    });
    for_seeds("mul", |rng, s| {
        let ins = vec![random(rng, &[4, 3], 2.0, 0.0), random(rng, &[4, 3], 2.0, 0.0)];
        check("mul", s, ins, &|t, v| project(t, t.mul(v[0], v[1])?, s));
    });
    for_seeds("scale", |rng, s| {
        let k = rng.random_range(-3.0..3.0);
        let ins = vec![random(rng, &[6], 2.0, 0.0)];
        check("scale", s, ins, &|t, v| project(t, t.scale(v[0], k)?, s));
    });
}

#[test]
fn matmul_and_transpose() {
    for_seeds("matmul", |rng, s| {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let ins = vec![random(rng, &[m, k], 2.0, 0.0), random(rng, &[k, n], 2.0, 0.0)];
        check("matmul", s, ins, &|t, v| project(t, t.matmul(v[0], v[1])?, s));
    });
    for_seeds("transpose", |rng, s| {
        let ins = vec![random(rng, &[3, 5], 2.0, 0.0)];
        check("transpose", s, ins, &|t, v| project(t, t.transpose(v[0])?, s));
    });
}

#[test]
fn convolutions_and_pooling() {
    for_seeds("conv2d", |rng, s| {
        let k = if s % 2 == 0 { 3 } else { 1 };
        let ins = vec![random(rng, &[2, 5, 4], 1.0, 0.0), random(rng, &[3, 2, k, k], 1.0, 0.0), random(rng, &[3], 1.0, 0.0)];
        check("conv2d", s, ins, &|t, v| project(t, t.conv2d(v[0], v[1], Some(v[2]))?, s));
    });
    for_seeds("conv_transpose2d", |rng, s| {
        let k = if s % 2 == 0 { 4 } else { 2 };
        let ins = vec![random(rng, &[2, 3, 2], 1.0, 0.0), random(rng, &[2, 3, k, k], 1.0, 0.0), random(rng, &[3], 1.0, 0.0)];
        check("conv_transpose2d", s, ins, &|t, v| project(t, t.conv_transpose2d(v[0], v[1], Some(v[2]))?, s));
    });
    for_seeds("avg_pool2", |rng, s| {
        let ins = vec![random(rng, &[2, 4, 6], 1.0, 0.0)];
        check("avg_pool2", s, ins, &|t, v| project(t, t.avg_pool2(v[0])?, s));
    });
}

#[test]
fn pointwise_nonlinearities() {
    for_seeds("relu", |rng, s| {
        let ins = vec![random(rng, &[10], 2.0, 1e-3)];
        check("relu", s, ins, &|t, v| project(t, t.relu(v[0])?, s));
    });
    for_seeds("abs", |rng, s| {
        let ins = vec![random(rng, &[10], 2.0, 1e-3)];
        check("abs", s, ins, &|t, v| project(t, t.abs(v[0])?, s));
    });
    for_seeds("log", |rng, s| {
        let ins = vec![positive(rng, &[8])];
        check("log", s, ins, &|t, v| project(t, t.log(v[0])?, s));
    });
    for_seeds("exp", |rng, s| {
        let ins = vec![random(rng, &[8], 2.0, 0.0)];
        check("exp", s, ins, &|t, v| project(t, t.exp(v[0])?, s));
    });
}

#[test]
fn reductions_and_losses() {
    for_seeds("mean", |rng, s| {
        let ins = vec![random(rng, &[3, 3], 2.0, 0.0)];
        check("mean", s, ins, &|t, v| t.mean(v[0]));
    });
    for_seeds("sum", |rng, s| {
        let ins = vec![random(rng, &[2, 7], 2.0, 0.0)];
        check("sum", s, ins, &|t, v| t.sum(v[0]));
    });
    for_seeds("softmax_cross_entropy", |rng, s| {
        let labels: Vec<usize> = (0..12).map(|_| rng.random_range(0..4)).collect();
        let ins = vec![random(rng, &[4, 3, 4], 3.0, 0.0)];
        check("softmax_cross_entropy", s, ins, &|t, v| t.softmax_cross_entropy(v[0], &labels));
    });
    for_seeds("mse", |rng, s| {
        let ins = vec![random(rng, &[1, 4, 4], 2.0, 0.0), random(rng, &[1, 4, 4], 2.0, 0.0)];
        check("mse", s, ins, &|t, v| t.mse(v[0], v[1]));
    });
    for_seeds("mae", |rng, s| {
        // Offsetting the target keeps every difference away from zero.
        let pred = random(rng, &[3, 4], 2.0, 0.0);
        let offset = random(rng, &[3, 4], 1.0, 1e-2);
        let target = Tensor::new(vec![3, 4], pred.data().iter().zip(offset.data()).map(|(p, o)| p + o).collect()).unwrap();
        check("mae", s, vec![pred, target], &|t, v| t.mae(v[0], v[1]));
    });
}

#[test]
fn uniform_noise_is_straight_through() {
    for_seeds("add_uniform_noise", |rng, s| {
        let amp = rng.random_range(0.0..0.5);
        let ins = vec![random(rng, &[2, 3, 3], 2.0, 0.0)];
        // A fresh generator per evaluation keeps the noise fixed across the stencil.
        check("add_uniform_noise", s, ins, &|t, v| {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(s);
            project(t, t.add_uniform_noise(v[0], amp, &mut noise_rng)?, s)
        });
    });
}

#[test]
fn rate_loss_primitive() {
    for_seeds("rate_loss", |rng, s| {
        let ins = vec![random(rng, &[2, 4, 5], 2.0, 0.0)];
        let f = cift_core::FeatureTensor::from_tensor(&ins[0]).unwrap();
        let kinked = (0..f.channels()).any(|c| {
            let t = cift_core::rateloss::transformed_residual(&f.channel(c).unwrap()).unwrap();
            t.data().iter().any(|v| v.abs() < 1e-4)
        });
        if kinked {
            return;
        }
        check("rate_loss", s, ins, &|t, v| t.rate_loss(v[0], RateLossConfig::default()));
    });
}

#[test]
fn composed_graph() {
    for_seeds("composed", |rng, s| {
        let ins = vec![random(rng, &[1, 4, 4], 1.0, 0.0), random(rng, &[2, 1, 3, 3], 1.0, 0.0), random(rng, &[2, 1, 2, 2], 1.0, 0.0)];
        let target = random(rng, &[1, 4, 4], 1.0, 0.0);
        check("composed", s, ins, &|t, v| {
            let h = t.exp(t.scale(t.conv2d(v[0], v[1], None)?, 0.5)?)?;
            let p = t.avg_pool2(h)?;
            let up = t.conv_transpose2d(p, v[2], None)?;
            let mse = t.mse(up, t.constant(target.clone()))?;
            t.add(mse, t.mean(t.log(t.add(h, t.constant(Tensor::full(&[2, 4, 4], 1.0)))?)?)?)
        });
    });
}
