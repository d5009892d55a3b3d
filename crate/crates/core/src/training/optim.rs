use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            eps: default_eps(),
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let decay = (1.0 - c.lr * c.weight_decay) as f32;
        let step = c.lr / bc1;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let denom = ((*vi as f64 / bc2).sqrt() + c.eps) as f32;
                *w = *w * decay - (step as f32) * *mi / denom;
            }
        }
        Ok(())
    }
}

/// `ema ← λ·ema + (1−λ)·w`, elementwise.
pub fn ema_update(ema: &mut [Tensor], weights: &[Tensor], lambda: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) && lambda != 1.0 {
        return Err(Error::InvalidValue(format!("ema lambda {lambda} outside [0, 1]")));
    }
    if ema.len() != weights.len() || ema.iter().zip(weights).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::Shape("EMA and model parameters are not congruent".into()));
    }
    let (l, r) = (lambda as f32, (1.0 - lambda) as f32);
    for (e, w) in ema.iter_mut().zip(weights) {
        for (a, &b) in e.data_mut().iter_mut().zip(w.data()) {
            *a = l * *a + r * b;
        }
    }
    Ok(())
}

/// Decay actually applied at optimizer step `step` (1-based) when warm-up
/// is enabled: `min(λ, (1 + step)/(10 + step))`.
pub fn warmup_decay(lambda: f64, step: u64) -> f64 {
    lambda.min((1.0 + step as f64) / (10.0 + step as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec())
    }

    #[test]
    fn ema_examples() {
        let mut e = vec![t(&[0.0])];
        ema_update(&mut e, &[t(&[1.0])], 0.999).unwrap();
        assert!((e[0].data()[0] - 0.001).abs() < 1e-7);

        let mut fixed = vec![t(&[0.3, -0.2])];
        ema_update(&mut fixed, &[t(&[0.3, -0.2])], 0.999).unwrap();
        assert_eq!(fixed[0].data(), &[0.3, -0.2]);

        let mut e = vec![t(&[0.0])];
        for _ in 0..100 {
            ema_update(&mut e, &[t(&[1.0])], 0.9).unwrap();
        }
        let closed = 0.9f64.powi(100);
        assert!(((1.0 - e[0].data()[0] as f64) - closed).abs() < 1e-5);

        assert!(ema_update(&mut e, &[t(&[1.0, 2.0])], 0.9).is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = vec![t(&[1.0, -1.0])];
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[t(&[0.5, -2.0])]).unwrap();
        // First bias-corrected step is lr·sign(g) up to eps.
        assert!((p[0].data()[0] - (1.0 - 1e-4)).abs() < 1e-7);
        assert!((p[0].data()[1] - (-1.0 + 1e-4)).abs() < 1e-7);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut p = vec![t(&[2.0])];
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[t(&[0.0])]).unwrap();
        assert!((p[0].data()[0] - 2.0 * 0.95).abs() < 1e-6);
    }

    #[test]
    fn warmup_is_capped() {
        assert!((warmup_decay(0.999, 0) - 0.1).abs() < 1e-12);
        assert_eq!(warmup_decay(0.999, 1_000_000), 0.999);
    }
}
