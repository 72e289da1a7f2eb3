//! Differentiable feature-compressibility loss.
//!
//! Each channel `F` of an H×W×C tensor is spatially predicted with DPCM along
//! rows and columns, the two difference images are averaged into a residual
//! `Z = ½(D_Hᵀ·F + F·D_W)`, the residual is transformed with a separable
//! orthonormal DCT `T = M_H·Z·M_Wᵀ`, and the loss is the entrywise ℓ1 norm of
//! all `T` averaged over H·W·C.
//!
//! The loss is piecewise linear in `F`; the subgradient of `|t|` at `t = 0` is
//! taken from [`RateLossConfig::abs_grad_at_zero`] (default `+1`).

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use crate::error::{Error, Result};
use crate::tensor::{FeatureTensor, Matrix};

/// `n×n` first-difference matrix: ones on the main diagonal, minus ones on the
/// superdiagonal. Right-multiplying a row vector by it replaces every entry
/// after the first with its difference from the previous one.
#[derive(Debug, Clone, PartialEq)]
pub struct DpcmMatrix {
    matrix: Matrix,
}

impl DpcmMatrix {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract("DPCM matrix size must be at least 1"));
        }
        let matrix = Matrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else if j == i + 1 {
                -1.0
            } else {
                0.0
            }
        });
        Ok(Self { matrix })
    }

    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

/// Orthonormal type-II DCT basis; row `k` holds the `k`-th scaled cosine.
#[derive(Debug, Clone, PartialEq)]
pub struct DctBasis {
    matrix: Matrix,
}

impl DctBasis {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract("DCT basis size must be at least 1"));
        }
        let nf = n as f64;
        let matrix = Matrix::from_fn(n, n, |k, i| {
            let alpha = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            alpha * (PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * nf)).cos()
        });
        Ok(Self { matrix })
    }

    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateLossConfig {
    /// Value used for `d|t|/dt` at `t = 0`. Must lie in `[-1, 1]`.
    pub abs_grad_at_zero: f64,
}

impl RateLossConfig {
    pub fn new(abs_grad_at_zero: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&abs_grad_at_zero) {
            return Err(Error::contract(format!(
                "abs_grad_at_zero must lie in [-1, 1], got {abs_grad_at_zero}"
            )));
        }
        Ok(Self { abs_grad_at_zero })
    }
}

impl Default for RateLossConfig {
    fn default() -> Self {
        Self { abs_grad_at_zero: 1.0 }
    }
}

/// DPCM and DCT operators for one side length.
#[derive(Debug)]
pub struct Operators {
    pub dpcm: DpcmMatrix,
    pub dct: DctBasis,
    dpcm_t: Matrix,
    dct_t: Matrix,
}

/// Returns the shared operators for side length `n`, building them on first use.
pub fn operators(n: usize) -> Result<Arc<Operators>> {
    static CACHE: OnceLock<RwLock<HashMap<usize, Arc<Operators>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(ops) = cache.read().unwrap().get(&n) {
        return Ok(ops.clone());
    }
    let dpcm = DpcmMatrix::new(n)?;
    let dct = DctBasis::new(n)?;
    let ops = Arc::new(Operators {
        dpcm_t: dpcm.matrix().transpose(),
        dct_t: dct.matrix().transpose(),
        dpcm,
        dct,
    });
    Ok(cache.write().unwrap().entry(n).or_insert(ops).clone())
}

/// Horizontal differencing: column 0 is copied, column `j ≥ 1` becomes `f[:,j] − f[:,j−1]`.
pub fn horizontal_diff(f: &Matrix) -> Matrix {
    Matrix::from_fn(f.rows(), f.cols(), |i, j| {
        if j == 0 {
            f.get(i, 0)
        } else {
            f.get(i, j) - f.get(i, j - 1)
        }
    })
}

/// Vertical differencing: row 0 is copied, row `i ≥ 1` becomes `f[i,:] − f[i−1,:]`.
pub fn vertical_diff(f: &Matrix) -> Matrix {
    Matrix::from_fn(f.rows(), f.cols(), |i, j| {
        if i == 0 {
            f.get(0, j)
        } else {
            f.get(i, j) - f.get(i - 1, j)
        }
    })
}

/// Spatial prediction residual: the mean of the vertical and horizontal differences.
pub fn residual(f: &Matrix) -> Matrix {
    let dx = horizontal_diff(f);
    let dy = vertical_diff(f);
    dy.add(&dx).expect("same shape").scale(0.5)
}

/// `F·D_W`, the horizontal difference in matrix form.
pub fn horizontal_diff_matmul(f: &Matrix) -> Result<Matrix> {
    f.matmul(&operators(f.cols())?.dpcm.matrix)
}

/// `D_Hᵀ·F`, the vertical difference in matrix form.
pub fn vertical_diff_matmul(f: &Matrix) -> Result<Matrix> {
    operators(f.rows())?.dpcm_t.matmul(f)
}

/// `½(D_Hᵀ·F + F·D_W)`.
pub fn residual_matmul(f: &Matrix) -> Result<Matrix> {
    Ok(vertical_diff_matmul(f)?.add(&horizontal_diff_matmul(f)?)?.scale(0.5))
}

/// Separable 2-D DCT `M_H·Z·M_Wᵀ`.
pub fn dct2(z: &Matrix, basis_h: &DctBasis, basis_w: &DctBasis) -> Result<Matrix> {
    if basis_h.size() != z.rows() || basis_w.size() != z.cols() {
        return Err(Error::shape(format!(
            "DCT bases {}x{} do not fit a {}x{} matrix",
            basis_h.size(),
            basis_w.size(),
            z.rows(),
            z.cols()
        )));
    }
    basis_h.matrix().matmul(z)?.matmul(&basis_w.matrix().transpose())
}

/// Transformed prediction residual `T` of one channel.
pub fn transformed_residual(f: &Matrix) -> Result<Matrix> {
    let oh = operators(f.rows())?;
    let ow = operators(f.cols())?;
    let z = residual_matmul(f)?;
    oh.dct.matrix().matmul(&z)?.matmul(&ow.dct_t)
}

pub fn rate_loss(f: &FeatureTensor) -> f64 {
    let mut total = 0.0;
    for i in 0..f.channels() {
        let t = transformed_residual(&f.channel(i).unwrap()).expect("operators match channel shape");
        total += t.l1_norm();
    }
    total / f.len() as f64
}

/// Gradient of [`rate_loss`] with respect to every element of `f`.
pub fn rate_loss_backward(f: &FeatureTensor, cfg: RateLossConfig) -> FeatureTensor {
    let (h, w) = (f.height(), f.width());
    let oh = operators(h).expect("positive height");
    let ow = operators(w).expect("positive width");
    let norm = 1.0 / f.len() as f64;
    let mut grad = FeatureTensor::zeros(h, w, f.channels());
    for i in 0..f.channels() {
        let t = transformed_residual(&f.channel(i).unwrap()).unwrap();
        let g_t = t.map(|v| norm * sign_with(v, cfg.abs_grad_at_zero));
        let g_z = oh.dct_t.matmul(&g_t).unwrap().matmul(ow.dct.matrix()).unwrap();
        let g_f = oh
            .dpcm
            .matrix()
            .matmul(&g_z)
            .unwrap()
            .add(&g_z.matmul(&ow.dpcm_t).unwrap())
            .unwrap()
            .scale(0.5);
        grad.set_channel(i, &g_f).unwrap();
    }
    grad
}

#[inline]
pub(crate) fn sign_with(v: f64, at_zero: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        at_zero
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn dpcm_small_sizes() {
        assert_eq!(DpcmMatrix::new(1).unwrap().matrix(), &Matrix::from_rows(&[[1.0]]));
        assert_eq!(
            DpcmMatrix::new(3).unwrap().matrix(),
            &Matrix::from_rows(&[[1.0, -1.0, 0.0], [0.0, 1.0, -1.0], [0.0, 0.0, 1.0]])
        );
        assert!(matches!(DpcmMatrix::new(0), Err(Error::Contract(_))));
    }

    #[test]
    fn dpcm_column_sums_telescope() {
        for n in 1..12 {
            let d = DpcmMatrix::new(n).unwrap();
            for j in 0..n {
                let s: f64 = (0..n).map(|i| d.matrix().get(i, j)).sum();
                assert_eq!(s, if j == 0 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn dct_is_orthonormal_with_constant_first_row() {
        for n in [1, 2, 3, 4, 7, 8, 16] {
            let b = DctBasis::new(n).unwrap();
            let p = b.matrix().matmul(&b.matrix().transpose()).unwrap();
            let id = Matrix::identity(n);
            assert!(p.sub(&id).unwrap().data().iter().all(|d| d.abs() < 1e-10));
            let c = 1.0 / (n as f64).sqrt();
            assert!((0..n).all(|j| (b.matrix().get(0, j) - c).abs() < 1e-15));
        }
    }

    #[test]
    fn horizontal_diff_examples() {
        let c = Matrix::from_fn(3, 4, |_, _| 2.5);
        let d = horizontal_diff(&c);
        for i in 0..3 {
            assert_eq!(d.get(i, 0), 2.5);
            assert!((1..4).all(|j| d.get(i, j) == 0.0));
        }
        let f = Matrix::from_rows(&[[1.0, 2.0, 4.0]]);
        assert_eq!(horizontal_diff(&f), Matrix::from_rows(&[[1.0, 1.0, 2.0]]));
    }

    #[test]
    fn vertical_diff_examples() {
        let f = Matrix::from_rows(&[[1.0], [3.0], [6.0]]);
        assert_eq!(vertical_diff(&f), Matrix::from_rows(&[[1.0], [2.0], [3.0]]));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_matrix(&mut rng, 4, 6);
        assert_eq!(vertical_diff(&g), horizontal_diff(&g.transpose()).transpose());
        let c = Matrix::from_fn(3, 2, |_, _| -1.0);
        let d = vertical_diff(&c);
        assert_eq!(d.get(0, 1), -1.0);
        assert!((1..3).all(|i| d.get(i, 0) == 0.0 && d.get(i, 1) == 0.0));
    }

    #[test]
    fn matmul_differencing_equals_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (h, w) = (rng.random_range(1..10), rng.random_range(1..10));
            let f = random_matrix(&mut rng, h, w);
            assert_eq!(horizontal_diff_matmul(&f).unwrap(), horizontal_diff(&f));
            assert_eq!(vertical_diff_matmul(&f).unwrap(), vertical_diff(&f));
            assert_eq!(residual_matmul(&f).unwrap(), residual(&f));
        }
    }

    #[test]
    fn residual_of_constant_and_ramp() {
        let c = 3.0;
        let z = residual(&Matrix::from_fn(4, 5, |_, _| c));
        for i in 0..4 {
            for j in 0..5 {
                let expected = match (i, j) {
                    (0, 0) => c,
                    (0, _) | (_, 0) => c / 2.0,
                    _ => 0.0,
                };
                assert_eq!(z.get(i, j), expected, "({i},{j})");
            }
        }
        assert_eq!(residual(&Matrix::zeros(3, 3)), Matrix::zeros(3, 3));
        let ramp = residual(&Matrix::from_fn(5, 5, |i, j| (i + j) as f64));
        for i in 1..5 {
            for j in 1..5 {
                assert_eq!(ramp.get(i, j), 1.0);
            }
        }
    }

    #[test]
    fn dct2_constant_and_parseval() {
        let b4 = DctBasis::new(4).unwrap();
        assert_eq!(dct2(&Matrix::zeros(4, 4), &b4, &b4).unwrap(), Matrix::zeros(4, 4));
        let t = dct2(&Matrix::from_fn(4, 4, |_, _| 1.5), &b4, &b4).unwrap();
        assert!((t.get(0, 0) - 6.0).abs() < 1e-12);
        assert!(t.data()[1..].iter().all(|v| v.abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random_matrix(&mut rng, 6, 8);
        let t = dct2(&z, &DctBasis::new(6).unwrap(), &DctBasis::new(8).unwrap()).unwrap();
        assert!((t.frobenius_norm() - z.frobenius_norm()).abs() < 1e-10);
        assert!(matches!(dct2(&z, &b4, &b4), Err(Error::Shape(_))));
    }

    #[test]
    fn rate_loss_simple_cases() {
        assert_eq!(rate_loss(&FeatureTensor::zeros(4, 4, 3)), 0.0);
        // A single impulse at the origin: Z = [[1, ½], [½, 0]] on a 2×2 plane.
        let f = FeatureTensor::new(2, 2, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let z = residual(&f.channel(0).unwrap());
        assert_eq!(z, Matrix::from_rows(&[[1.0, -0.5], [-0.5, 0.0]]));
        // 2-point DCT rows are (1, 1)/√2 and (1, −1)/√2.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let m = Matrix::from_rows(&[[s, s], [s, -s]]);
        let t = m.matmul(&z).unwrap().matmul(&m.transpose()).unwrap();
        let expected = t.l1_norm() / 4.0;
        assert!((rate_loss(&f) - expected).abs() < 1e-15);
        assert!((expected - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_on_zero_tensor_uses_positive_sign() {
        let g = rate_loss_backward(&FeatureTensor::zeros(3, 3, 2), RateLossConfig::default());
        assert!(g.data().iter().all(|v| v.is_finite()));
        assert!(g.data().iter().any(|&v| v != 0.0));
        let g0 = rate_loss_backward(&FeatureTensor::zeros(3, 3, 2), RateLossConfig::new(0.0).unwrap());
        assert!(g0.data().iter().all(|&v| v == 0.0));
        assert!(RateLossConfig::new(1.5).is_err());
    }
}
