use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;

use super::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

/// Adaptive-moment optimizer state for every tensor of one store.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let first: Vec<Vec<T>> = store
            .iter()
            .map(|(_, _, t)| vec![T::zero(); t.numel()])
            .collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable tensor and zeroes all
    /// gradients. Fails before touching any value if a gradient is not
    /// finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Training(format!(
                "optimizer tracks {} tensors, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for (_, name, t) in store.iter() {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Training(format!("non-finite gradient in {name}")));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bias1 = T::one() - T::of(c.beta1.powi(self.step as i32));
        let bias2 = T::one() - T::of(c.beta2.powi(self.step as i32));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            if !t.requires_grad() {
                t.zero_grad();
                continue;
            }
            let g = t.grad().map(<[T]>::to_vec).unwrap_or_default();
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let data = t.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            t.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Graph, Tensor};

    fn one_param(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = one_param(3.0);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(store.id("x").unwrap()).data(), &[3.0]);
    }

    #[test]
    fn first_step_on_square_moves_by_lr() {
        let mut store = one_param(1.0);
        let id = store.id("x").unwrap();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &store,
        );
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut store).unwrap();
        opt.step(&mut store).unwrap();
        let x1 = store.get(id).data()[0];
        // m_hat / sqrt(v_hat) = 2 / 2 up to eps
        assert!((x1 - 0.9).abs() < 1e-8, "{x1}");
        assert_eq!(store.get(id).grad().unwrap(), &[0.0]);
    }

    #[test]
    fn nan_gradient_fails_fast() {
        let mut store = one_param(1.0);
        let id = store.id("x").unwrap();
        store.get_mut(id).accumulate_grad(&[f64::NAN]);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        assert!(matches!(opt.step(&mut store), Err(Error::Training(_))));
        assert_eq!(store.get(id).data(), &[1.0]);
    }

    #[test]
    fn frozen_tensors_do_not_move() {
        let mut store = one_param(1.0);
        let id = store.id("x").unwrap();
        store.get_mut(id).accumulate_grad(&[5.0]);
        store.set_trainable("x", false);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(id).data(), &[1.0]);
    }
}
