//! Adam with polynomial learning-rate decay.

pub const POLY_POWER: f64 = 0.9;

/// `lr₀ · (1 − step/total)^0.9`, reaching 0 at `step = total`.
pub fn poly_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 - step.min(total) as f64 / total as f64).powf(POLY_POWER)
}

/// Adam state for a fixed list of parameter buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v, t: 0 }
    }

    /// One update of every buffer. `params[i]` and `grads[i]` must match the
    /// sizes given at construction.
    pub fn step(&mut self, lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.len(), self.m[i].len(), "parameter {i} resized");
            for (j, (pv, &gv)) in p.iter_mut().zip(g.iter()).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                *pv -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}
