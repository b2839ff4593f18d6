use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
        }
    }

    /// Applies one update. `params[i]` is skipped when `frozen[i]` is set.
    pub fn step(&mut self, params: Vec<&mut Mat>, grads: &[Mat], frozen: &[bool]) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let mut scale = 1.0;
        if self.cfg.clip_norm > 0.0 {
            let norm = grads
                .iter()
                .zip(frozen)
                .filter(|(_, &f)| !f)
                .map(|(g, _)| g.iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > self.cfg.clip_norm {
                scale = self.cfg.clip_norm / norm;
            }
        }
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = self.cfg.lr;
        let eps = self.cfg.eps;
        for (i, p) in params.into_iter().enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

pub fn init_normal<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f64) -> Mat {
    let normal = Normal::new(0.0, std).expect("valid std");
    Mat::from_shape_fn(shape, |_| normal.sample(rng))
}
