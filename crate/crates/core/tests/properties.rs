use cift_core::autodiff::Tape;
use cift_core::eval::{bd_rate, entropy_bits, MetricKind, RdCurve};
use cift_core::featcodec::{bpfe, decode_levels, encode_levels, tile, untile, Bitstream};
use cift_core::mtl::{total_loss, total_loss_grad, Config, TaskWeights};
use cift_core::quantizer::{dequantize, quantize};
use cift_core::rateloss::{
    horizontal_diff, horizontal_diff_matmul, rate_loss, rate_loss_backward, residual, residual_matmul,
    vertical_diff, vertical_diff_matmul, RateLossConfig,
};
use cift_core::{FeatureTensor, LevelTensor, Matrix, QuantParams};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn features() -> impl Strategy<Value = FeatureTensor> {
    (1usize..7, 1usize..7, 1usize..4).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(-5.0f64..5.0, h * w * c).prop_map(move |d| FeatureTensor::new(h, w, c, d).unwrap())
    })
}

fn levels() -> impl Strategy<Value = (LevelTensor, u8)> {
    (1usize..9, 1usize..9, 1usize..20, 1u8..=16).prop_flat_map(|(h, w, c, bits)| {
        let top = ((1u32 << bits) - 1) as u16;
        prop::collection::vec(0..=top, h * w * c).prop_map(move |d| (LevelTensor::new(h, w, c, d).unwrap(), bits))
    })
}

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    let scale = a.frobenius_norm().max(b.frobenius_norm()).max(1.0);
    a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matmul_is_associative(a in matrix(8, 8), b in matrix(8, 8), c in matrix(8, 8)) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(close(&left, &right, 1e-10));
    }

    #[test]
    fn transpose_of_product(a in matrix(5, 3), b in matrix(3, 6)) {
        let lhs = a.matmul(&b).unwrap().transpose();
        let rhs = b.transpose().matmul(&a.transpose()).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn channel_round_trip(f in features()) {
        let chans: Vec<Matrix> = (0..f.channels()).map(|i| f.channel(i).unwrap()).collect();
        prop_assert_eq!(FeatureTensor::from_channels(&chans).unwrap(), f.clone());
        let mut g = FeatureTensor::zeros(f.height(), f.width(), f.channels());
        for (i, m) in chans.iter().enumerate() {
            g.set_channel(i, m).unwrap();
        }
        prop_assert_eq!(g, f);
    }

    #[test]
    fn matmul_differencing_is_exact(f in (1usize..10, 1usize..10).prop_flat_map(|(h, w)| matrix(h, w))) {
        prop_assert_eq!(horizontal_diff_matmul(&f).unwrap(), horizontal_diff(&f));
        prop_assert_eq!(vertical_diff_matmul(&f).unwrap(), vertical_diff(&f));
        prop_assert_eq!(residual_matmul(&f).unwrap(), residual(&f));
        prop_assert_eq!(vertical_diff(&f), horizontal_diff(&f.transpose()).transpose());
    }

    #[test]
    fn rate_loss_is_nonnegative_and_zero_only_for_zero_residual(
        f in features(),
        zero_mask in prop::collection::vec(any::<bool>(), 3),
    ) {
        // Zero out some channels so both sides of the equivalence are exercised.
        let mut f = f;
        let (h, w) = (f.height(), f.width());
        for c in 0..f.channels() {
            if zero_mask[c] {
                f.set_channel(c, &Matrix::zeros(h, w)).unwrap();
            }
        }
        let l = rate_loss(&f);
        prop_assert!(l >= 0.0);
        let z_is_zero = (0..f.channels()).all(|c| residual(&f.channel(c).unwrap()).data().iter().all(|&v| v == 0.0));
        prop_assert_eq!(l == 0.0, z_is_zero);
    }

    #[test]
    fn rate_loss_is_positively_homogeneous(f in features(), alpha in 0.0f64..20.0) {
        let scaled = rate_loss(&f.scale(alpha));
        let expect = alpha * rate_loss(&f);
        prop_assert!((scaled - expect).abs() <= 1e-12 * expect.max(1.0));
    }

    #[test]
    fn rate_loss_shrinks_towards_channel_means(f in features()) {
        let (h, w, c) = (f.height(), f.width(), f.channels());
        let means: Vec<f64> = (0..c)
            .map(|i| f.channel_slice(i).unwrap().iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let interp = |lambda: f64| {
            let mut g = f.clone();
            for i in 0..c {
                let m = f.channel(i).unwrap().map(|v| (1.0 - lambda) * v + lambda * means[i]);
                g.set_channel(i, &m).unwrap();
            }
            g
        };
        let centred = |g: &FeatureTensor| {
            let mut out = g.clone();
            for i in 0..c {
                out.set_channel(i, &g.channel(i).unwrap().map(|v| v - means[i])).unwrap();
            }
            out
        };
        // Interior residual entries carry no contribution from the constant mean.
        let interior = |g: &FeatureTensor| -> f64 {
            (0..c)
                .map(|i| {
                    let z = residual(&g.channel(i).unwrap());
                    let mut s = 0.0;
                    for r in 1..h {
                        for col in 1..w {
                            s += z.get(r, col).abs();
                        }
                    }
                    s
                })
                .sum()
        };
        let mut prev_rate = f64::INFINITY;
        let mut prev_interior = f64::INFINITY;
        for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let g = interp(lambda);
            let rate = rate_loss(&centred(&g));
            let int = interior(&g);
            prop_assert!(rate <= prev_rate * (1.0 + 1e-12) + 1e-15);
            prop_assert!(int <= prev_interior * (1.0 + 1e-12) + 1e-15);
            prev_rate = rate;
            prev_interior = int;
        }
        prop_assert!(prev_rate < 1e-12 && prev_interior < 1e-12);
    }

    #[test]
    fn rate_loss_primitive_matches_closed_form_gradient(f in features()) {
        let tape = Tape::new();
        let x = tape.param(f.to_tensor());
        let root = tape.rate_loss(x, RateLossConfig::default()).unwrap();
        let g = tape.backward(root).unwrap();
        let expect = rate_loss_backward(&f, RateLossConfig::default());
        let expect = expect.to_tensor();
        prop_assert_eq!(g.get(x).unwrap().data(), expect.data());
    }

    #[test]
    fn quantize_is_monotone(bits in 1u8..=16, lo in -5.0f64..0.0, span in 0.01f64..10.0, mut vs in prop::collection::vec(-20.0f64..20.0, 2..64)) {
        let q = QuantParams::new(bits, lo, lo + span).unwrap();
        vs.sort_by(f64::total_cmp);
        let ls: Vec<u16> = vs.iter().map(|&v| q.quantize_value(v)).collect();
        prop_assert!(ls.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(ls.iter().all(|&l| l <= q.max_level()));
    }

    #[test]
    fn fitted_quantization_round_trips_within_half_step(f in features(), bits in 1u8..=16) {
        let q = QuantParams::fitted(bits, &f).unwrap();
        let back = dequantize(&quantize(&f, &q), &q).unwrap();
        let bound = q.step() / 2.0 + 1e-12 * q.max().abs().max(q.min().abs()).max(1.0);
        prop_assert!(f.data().iter().zip(back.data()).all(|(a, b)| (a - b).abs() <= bound));
    }

    #[test]
    fn tile_untile_is_a_bijection((l, _) in levels(), extra_rows in 0usize..3, extra_cols in 0usize..3) {
        let c = l.channels();
        let cols = (c as f64).sqrt().ceil() as usize + extra_cols;
        let rows = c.div_ceil(cols) + extra_rows;
        for grid in [None, Some((rows, cols)), Some((1, c)), Some((c, 1))] {
            let img = tile(&l, grid).unwrap();
            prop_assert!(img.grid_rows() * img.grid_cols() >= c);
            prop_assert_eq!(untile(&img, c).unwrap(), l.clone());
        }
        if c > 1 {
            prop_assert!(tile(&l, Some((1, c - 1))).is_err());
        }
    }

    #[test]
    fn codec_is_lossless_and_bounded((l, bits) in levels()) {
        let q = QuantParams::new(bits, -1.0, 1.0).unwrap();
        let b = encode_levels(&l, None, &q).unwrap();
        let bytes = b.to_bytes();
        let back = Bitstream::from_bytes(&bytes).unwrap();
        prop_assert_eq!(decode_levels(&back).unwrap(), l.clone());
        let raw_bits = (l.len() * bits as usize) as u64;
        prop_assert!(b.payload_bit_count() <= raw_bits.div_ceil(8) * 8);
        prop_assert_eq!(bytes.len() as u64 * 8, b.total_bits());
    }

    #[test]
    fn codec_bpfe_bound_on_payload_dominated_tensors(bits in 1u8..=16, c in 41usize..64, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (8, 10);
        let top = ((1u32 << bits) - 1) as u16;
        let data = (0..h * w * c).map(|_| rng.random_range(0..=top)).collect();
        let l = LevelTensor::new(h, w, c, data).unwrap();
        let b = encode_levels(&l, None, &QuantParams::new(bits, 0.0, 1.0).unwrap()).unwrap();
        prop_assert!(bpfe(b.total_bits(), h, w, c) <= bits as f64 + 0.1);
    }

    #[test]
    fn entropy_never_exceeds_bit_depth((l, bits) in levels()) {
        prop_assert!(entropy_bits(l.data()) <= bits as f64 + 1e-12);
    }

    #[test]
    fn bd_rate_identities(
        rates in prop::collection::vec(0.5f64..8.0, 5),
        start in 20.0f64..30.0,
        steps in prop::collection::vec(0.5f64..3.0, 5),
        shift in prop::collection::vec(-0.2f64..0.2, 5),
        alpha in 0.3f64..3.0,
    ) {
        let mut rates = rates;
        rates.sort_by(f64::total_cmp);
        rates.dedup();
        prop_assume!(rates.len() == 5 && rates.windows(2).all(|w| w[1] / w[0] > 1.05));
        let mut q = start;
        let a: Vec<(f64, f64)> = rates.iter().zip(&steps).map(|(&r, &s)| { q += s; (r, q) }).collect();
        let b: Vec<(f64, f64)> = a.iter().zip(&shift).map(|(&(r, m), &d)| (r * (1.0 + d * 0.5), m + d)).collect();
        let ca = RdCurve::from_pairs(MetricKind::Psnr, &a).unwrap();
        let cb = RdCurve::from_pairs(MetricKind::Psnr, &b).unwrap();

        prop_assert_eq!(bd_rate(&ca, &ca).unwrap(), 0.0);
        if let (Ok(ab), Ok(ba)) = (bd_rate(&ca, &cb), bd_rate(&cb, &ca)) {
            prop_assert!(((1.0 + ab / 100.0) * (1.0 + ba / 100.0) - 1.0).abs() <= 1e-9);
            let scaled: Vec<(f64, f64)> = b.iter().map(|&(r, m)| (alpha * r, m)).collect();
            let cs = RdCurve::from_pairs(MetricKind::Psnr, &scaled).unwrap();
            let expect = (alpha * (1.0 + ab / 100.0) - 1.0) * 100.0;
            prop_assert!((bd_rate(&ca, &cs).unwrap() - expect).abs() <= 1e-9 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn task_weights_stay_positive(s in prop::array::uniform4(-700.0f64..700.0)) {
        let w = TaskWeights { log_weights: s }.weights();
        prop_assert!(w.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences(
        losses in prop::array::uniform4(0.01f64..5.0),
        s in prop::array::uniform4(-2.0f64..2.0),
        include_rate in any::<bool>(),
    ) {
        let w = TaskWeights { log_weights: s };
        let g = total_loss_grad(losses, &w, include_rate).unwrap();
        let h = 1e-5;
        for i in 0..4 {
            let (mut up, mut down) = (w, w);
            up.log_weights[i] += h;
            down.log_weights[i] -= h;
            let fd = (total_loss(losses, &up, include_rate).unwrap() - total_loss(losses, &down, include_rate).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()) + 1e-9, "s{}: fd {} vs {}", i, fd, g[i]);
        }
    }
}

#[test]
fn benchmark_and_proposed_configs_differ_in_one_key() {
    let base = Config::default();
    let mut bench = base.clone();
    bench.include_rate = false;
    let mut prop = base;
    prop.include_rate = true;
    let (a, b) = (bench.to_text(), prop.to_text());
    let diff: Vec<_> = a.lines().zip(b.lines()).filter(|(x, y)| x != y).collect();
    assert_eq!(a.lines().count(), b.lines().count());
    assert_eq!(diff, vec![("include_rate = false", "include_rate = true")]);
}

#[test]
fn noise_model_matches_quantization_error_moments() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let q = QuantParams::new(6, -1.0, 1.0).unwrap();
    let n = 1_000_000;
    // Quantization error of smooth-density inputs well inside the range.
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-0.9..0.9)).collect();
    let f = FeatureTensor::new(1, n, 1, xs.clone()).unwrap();
    let back = dequantize(&quantize(&f, &q), &q).unwrap();
    let qerr: Vec<f64> = back.data().iter().zip(&xs).map(|(b, x)| b - x).collect();

    let tape = Tape::new();
    let x = tape.constant(f.to_tensor());
    let noisy = tape.value(tape.add_uniform_noise(x, q.step(), &mut rng).unwrap());
    let nerr: Vec<f64> = noisy.data().iter().zip(&xs).map(|(a, x)| a - x).collect();

    let moments = |e: &[f64]| {
        let m1 = e.iter().sum::<f64>() / e.len() as f64;
        let m2 = e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64;
        (m1, m2)
    };
    let (qm1, qm2) = moments(&qerr);
    let (nm1, nm2) = moments(&nerr);
    let var = q.step() * q.step() / 12.0;
    // First moments are both ~0; compare them on the scale of the standard deviation.
    assert!((qm1 - nm1).abs() <= 0.02 * var.sqrt(), "means {qm1} vs {nm1}");
    assert!((qm2 - nm2).abs() <= 0.02 * nm2, "second moments {qm2} vs {nm2}");
    assert!((nm2 - var).abs() <= 0.02 * var);
}
