use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with moment buffers keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update over every `requires_grad` parameter. A parameter without
    /// a gradient buffer is treated as having a zero gradient. Gradients are
    /// validated before anything is written, so a non-finite gradient leaves
    /// both parameters and state untouched.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        let params: Vec<(&str, &mut Tensor)> = params.into_iter().filter(|(_, t)| t.requires_grad()).collect();
        for (name, t) in &params {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(name.to_string()));
                }
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.t as i32);
        for (name, t) in params {
            let n = t.numel();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(Error::DataLength {
                    shape: t.shape().to_vec(),
                    len: m.len(),
                });
            }
            let grad = t.grad().map(<[f32]>::to_vec);
            let data = t.data_mut();
            for i in 0..n {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                data[i] -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f32]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap().with_requires_grad(true)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = param(&[0.5, -1.0]);
        p.accumulate_grad(&[0.0, 0.0]).unwrap();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
        adam.step([("p", &mut p)]).unwrap();
        assert_eq!(p.data(), &[0.5, -1.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_matches_scalar_formula() {
        let (lr, b1, b2, eps) = (0.01f64, 0.9f64, 0.999f64, 1e-8f64);
        let (p0, g) = (0.3f64, -0.25f64);
        // m1 = (1-b1) g, v1 = (1-b2) g², mhat = g, vhat = g²
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let expected = p0 - lr * (m / (1.0 - b1)) / ((v / (1.0 - b2)).sqrt() + eps);
        let mut p = param(&[p0 as f32]);
        p.accumulate_grad(&[g as f32]).unwrap();
        let mut adam = AdamState::new(AdamConfig::with_lr(lr as f32));
        adam.step([("p", &mut p)]).unwrap();
        assert!((p.data()[0] as f64 - expected).abs() < 1e-7);
        // ≈ p0 + lr since sign(g) < 0
        assert!((p.data()[0] as f64 - (p0 + lr)).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut p = param(&[1.0]);
        p.accumulate_grad(&[f32::NAN]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        let err = adam.step([("w", &mut p)]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut p = Tensor::new(vec![1], vec![2.0]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step([("frozen", &mut p)]).unwrap();
        assert!(adam.moments("frozen").is_none());
    }

    #[test]
    fn trajectories_are_bit_identical() {
        let run = || {
            let mut p = param(&[0.1, 0.2, -0.3]);
            let mut adam = AdamState::new(AdamConfig::with_lr(0.05));
            for step in 0..20 {
                p.zero_grad();
                let g: Vec<f32> = p.data().iter().map(|x| x * 2.0 + step as f32 * 0.01).collect();
                p.accumulate_grad(&g).unwrap();
                adam.step([("p", &mut p)]).unwrap();
            }
            p.into_data()
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
