use serde::{Deserialize, Serialize};

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to 0 at `total`.
pub fn lr_at(step: usize, base: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Distillation weight, linear from `max` at step 0 to `min` at `total`;
/// steps outside `[0, total]` are clamped.
pub fn lambda_soft(step: usize, max: f64, min: f64, total: usize) -> f64 {
    let t = step.min(total) as f64 / total.max(1) as f64;
    (1.0 - t) * max + t * min
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Adam { cfg, m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of every parameter in `params` with `grads`.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.cfg.eps * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_endpoints() {
        assert_eq!(lr_at(0, 1e-4, 1000, 200_000), 0.0);
        assert_eq!(lr_at(1000, 1e-4, 1000, 200_000), 1e-4);
        assert!(lr_at(200_000, 1e-4, 1000, 200_000).abs() < 1e-18);
        assert!(lr_at(199_999, 1e-4, 1000, 200_000) < 1e-12);
        assert!((lr_at(500, 1e-4, 1000, 200_000) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn lambda_soft_schedule() {
        assert_eq!(lambda_soft(0, 0.5, 0.05, 1000), 0.5);
        assert_eq!(lambda_soft(1000, 0.5, 0.05, 1000), 0.05);
        assert!((lambda_soft(500, 0.5, 0.05, 1000) - 0.275).abs() < 1e-15);
        assert_eq!(lambda_soft(5000, 0.5, 0.05, 1000), 0.05);
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            let l = lambda_soft(t, 0.5, 0.05, 100);
            assert!(l <= prev);
            prev = l;
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut adam = Adam::new(AdamConfig::default(), [3]);
        let mut w = vec![0.5f32, -1.0, 2.0];
        let before = w.clone();
        adam.step(&mut [&mut w], &[vec![0.0; 3]], 1e-2);
        assert_eq!(w, before);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias correction makes the first update ±lr for any nonzero gradient
        let mut adam = Adam::new(AdamConfig::default(), [2]);
        let mut w = vec![0.0f32, 0.0];
        adam.step(&mut [&mut w], &[vec![3.0, -0.01]], 1e-2);
        assert!((w[0] + 1e-2).abs() < 1e-6 && (w[1] - 1e-2).abs() < 1e-5);
    }
}
