//! Optimizers: Adam for the EBM, SGD with momentum and weight decay for the
//! encoder. State is flat per-tensor moment buffers, serialized into the
//! checkpoint container so that resumed runs are bit-exact.

use crate::num::{real, Real};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<F: Real> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update; `lr_scale` multiplies the configured rate (warmup).
    pub fn step(&mut self, params: &mut [&mut [F]], grads: &[&[F]], lr_scale: f64) {
        assert_eq!(params.len(), grads.len(), "param/grad slot mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
            self.v = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
        }
        self.t += 1;
        let b1 = real::<F>(self.cfg.beta1);
        let b2 = real::<F>(self.cfg.beta2);
        let one = F::one();
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let lr = real::<F>(self.cfg.lr * lr_scale);
        let eps = real::<F>(self.cfg.eps);
        let inv_bc1 = real::<F>(1.0 / bc1);
        let inv_bc2 = real::<F>(1.0 / bc2);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] * inv_bc1;
                let vh = v[i] * inv_bc2;
                p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 3e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SgdMomentum<F: Real> {
    pub cfg: SgdConfig,
    pub buf: Vec<Vec<F>>,
}

impl<F: Real> SgdMomentum<F> {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            buf: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [F]], grads: &[&[F]], lr_scale: f64) {
        assert_eq!(params.len(), grads.len(), "param/grad slot mismatch");
        if self.buf.is_empty() {
            self.buf = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
        }
        let mu = real::<F>(self.cfg.momentum);
        let wd = real::<F>(self.cfg.weight_decay);
        let lr = real::<F>(self.cfg.lr * lr_scale);
        for ((p, g), b) in params.iter_mut().zip(grads.iter()).zip(self.buf.iter_mut()) {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                let grad = g[i] + wd * p[i];
                b[i] = mu * b[i] + grad;
                p[i] = p[i] - lr * b[i];
            }
        }
    }
}

/// Linear learning-rate warmup factor: base · min(1, iter / warmup).
pub fn warmup_lr(base_lr: f64, iteration: u64, warmup_iters: u64) -> f64 {
    if warmup_iters == 0 {
        return base_lr;
    }
    base_lr * (iteration as f64 / warmup_iters as f64).min(1.0)
}

/// shadow' = decay · shadow + (1 − decay) · live, elementwise.
pub fn update_ema<F: Real>(shadow: &mut [&mut [F]], live: &[&[F]], decay: f64) {
    assert_eq!(shadow.len(), live.len(), "EMA slot mismatch");
    let d = real::<F>(decay);
    let one = F::one();
    for (s, l) in shadow.iter_mut().zip(live.iter()) {
        assert_eq!(s.len(), l.len(), "EMA shape mismatch");
        for i in 0..s.len() {
            s[i] = d * s[i] + (one - d) * l[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_closed_forms() {
        assert_eq!(warmup_lr(1e-4, 0, 2000), 0.0);
        assert_eq!(warmup_lr(1e-4, 2000, 2000), 1e-4);
        assert!((warmup_lr(1e-4, 1000, 2000) - 5e-5).abs() < 1e-20);
        assert_eq!(warmup_lr(1e-4, 5000, 2000), 1e-4);
    }

    #[test]
    fn ema_closed_forms() {
        let mut shadow = vec![0.0f64];
        let live = vec![1.0f64];
        update_ema(&mut [&mut shadow], &[&live], 0.999);
        assert!((shadow[0] - 0.001).abs() < 1e-15);

        let mut s = vec![0.3f64];
        update_ema(&mut [&mut s], &[&live], 0.0);
        assert_eq!(s[0], 1.0);

        let mut s = vec![0.3f64];
        update_ema(&mut [&mut s], &[&live], 1.0);
        assert_eq!(s[0], 0.3);
    }

    #[test]
    fn ema_stays_in_history_envelope() {
        // shadow remains inside [min, max] of the live history for any decay
        let history = [0.5f64, 2.0, -1.0, 0.7, 0.0];
        for &decay in &[0.0, 0.3, 0.9, 0.999, 1.0] {
            let mut shadow = vec![history[0]];
            let (mut lo, mut hi) = (history[0], history[0]);
            for &h in &history {
                lo = lo.min(h);
                hi = hi.max(h);
                let live = vec![h];
                update_ema(&mut [&mut shadow], &[&live], decay);
                assert!(shadow[0] >= lo - 1e-12 && shadow[0] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn adam_descends_quadratic() {
        // minimize ½x² with Adam(β₁=0): sign of update follows the gradient
        let mut adam: Adam<f64> = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        let mut x = vec![3.0f64];
        for _ in 0..200 {
            let g = x.clone();
            adam.step(&mut [&mut x], &[&g], 1.0);
        }
        assert!(x[0].abs() < 0.05, "x = {}", x[0]);
    }

    #[test]
    fn sgd_momentum_matches_hand_rollout() {
        let mut sgd: SgdMomentum<f64> = SgdMomentum::new(SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        });
        let mut x = vec![1.0f64];
        // g = x; buf₁ = 1; x₁ = 1 − 0.1 = 0.9
        // buf₂ = 0.9·1 + 0.9 = 1.8; x₂ = 0.9 − 0.18 = 0.72
        let g = x.clone();
        sgd.step(&mut [&mut x], &[&g], 1.0);
        assert!((x[0] - 0.9).abs() < 1e-15);
        let g = x.clone();
        sgd.step(&mut [&mut x], &[&g], 1.0);
        assert!((x[0] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut adam: Adam<f32> = Adam::new(AdamConfig::default());
        let mut x = vec![1.5f32, -2.0];
        let g = vec![0.3f32, 0.4];
        adam.step(&mut [&mut x], &[&g], 0.0);
        assert_eq!(x, vec![1.5, -2.0]);
    }
}
