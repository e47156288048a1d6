//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::param::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// First and second moment buffers for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One Adam update over every trainable parameter, in name order. A
/// parameter without a gradient buffer is treated as having zero gradient.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one_m_b1 = T::from_f64(1.0 - cfg.beta1);
    let one_m_b2 = T::from_f64(1.0 - cfg.beta2);
    let bc1 = T::from_f64(1.0 / (1.0 - cfg.beta1.powi(t)));
    let bc2 = T::from_f64(1.0 / (1.0 - cfg.beta2.powi(t)));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);

    for p in params.iter_mut().filter(|p| p.trainable) {
        let len = p.value.len();
        let mom = state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| Moments {
                m: vec![T::zero(); len],
                v: vec![T::zero(); len],
            });
        let grad = p.value.grad().map(<[T]>::to_vec);
        let data = p.value.data_mut();
        for i in 0..len {
            let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
            mom.m[i] = b1 * mom.m[i] + one_m_b1 * g;
            mom.v[i] = b2 * mom.v[i] + one_m_b2 * g * g;
            let m_hat = mom.m[i] * bc1;
            let v_hat = mom.v[i] * bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Adam optimizer: hyperparameters plus state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>) {
        adam_step(params, &mut self.state, &self.config);
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn store(values: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(
            "theta",
            Tensor::new(vec![values.len()], values).unwrap(),
            true,
        )
        .unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store(vec![1.0, 1.0, 1.0]);
        s.get_mut("theta")
            .unwrap()
            .value
            .accumulate_grad(&[0.5, -2.0, 1e-2]);
        let mut opt = Adam::<f64>::new(AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        });
        opt.step(&mut s);
        let got = s.get("theta").unwrap().value.data().to_vec();
        for (g, want) in got.iter().zip([0.99, 1.01, 0.99]) {
            assert!((g - want).abs() < 1e-8, "{g} vs {want}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter_and_decays_moments() {
        let mut s = store(vec![2.0, -1.0]);
        let mut opt = Adam::<f64>::new(AdamConfig::default());
        s.get_mut("theta")
            .unwrap()
            .value
            .accumulate_grad(&[0.0, 0.0]);
        opt.step(&mut s);
        assert_eq!(s.get("theta").unwrap().value.data(), &[2.0, -1.0]);

        s.get_mut("theta")
            .unwrap()
            .value
            .accumulate_grad(&[1.0, -3.0]);
        opt.step(&mut s);
        let before = opt.state.moments["theta"].clone();
        s.zero_grad();
        opt.step(&mut s);
        let after = &opt.state.moments["theta"];
        for i in 0..2 {
            assert_eq!(after.m[i], 0.9 * before.m[i]);
            assert_eq!(after.v[i], 0.999 * before.v[i]);
        }
    }

    #[test]
    fn quadratic_descent_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let target: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let init: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut s = store(init);
        let mut opt = Adam::<f64>::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..100 {
            s.zero_grad();
            let theta = s.get("theta").unwrap().value.data().to_vec();
            let g: Vec<f64> = theta
                .iter()
                .zip(&target)
                .map(|(t, c)| 2.0 * (t - c))
                .collect();
            s.get_mut("theta").unwrap().value.accumulate_grad(&g);
            opt.step(&mut s);
        }
        let theta = s.get("theta").unwrap().value.data();
        let dist: f64 = theta
            .iter()
            .zip(&target)
            .map(|(t, c)| (t - c).powi(2))
            .sum::<f64>()
            .sqrt();
        eprintln!("adam quadratic distance {dist:e}");
        assert!(dist < 1e-2, "distance {dist}");
    }

    #[test]
    fn frozen_parameters_are_not_updated() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::full(vec![2], 1.0), false).unwrap();
        s.get_mut("a").unwrap().value.accumulate_grad(&[1.0, 1.0]);
        let mut opt = Adam::<f32>::new(AdamConfig::default());
        opt.step(&mut s);
        assert_eq!(s.get("a").unwrap().value.data(), &[1.0, 1.0]);
        assert!(opt.state.moments.is_empty());
    }
}
