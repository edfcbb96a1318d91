//! Adam and a reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam over the trainable tensors of a store. Moments are kept per
/// parameter and allocated on first update.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub lr: f64,
    /// Number of updates applied so far.
    pub t: u64,
    m: Vec<Option<Vec<f32>>>,
    v: Vec<Option<Vec<f32>>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { config: AdamConfig::default(), lr, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>) {
        self.step_scaled(store, grads, |_| 1.0)
    }

    /// One update with the learning rate of each parameter multiplied by
    /// `scale(name)`.
    pub fn step_scaled(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>, scale: impl Fn(&str) -> f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let step = (self.lr / bc1) as f32;
        let (b1, b2, eps) = (beta1 as f32, beta2 as f32, eps as f32);
        let bc2_sqrt = bc2.sqrt() as f32;
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let step = step * scale(&store.get(id).name) as f32;
            let g = grads.param(id).data();
            let len = g.len();
            let m = self.m[id.index()].get_or_insert_with(|| vec![0.0; len]);
            let v = self.v[id.index()].get_or_insert_with(|| vec![0.0; len]);
            let w = store.tensor_mut(id).data_mut();
            for i in 0..len {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                w[i] -= step * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
    }

    /// Moment tensors named `optim.m.<param>` / `optim.v.<param>`.
    pub fn state_tensors(&self, store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (id, p) in store.iter() {
            for (prefix, moments) in [("optim.m.", &self.m), ("optim.v.", &self.v)] {
                if let Some(Some(data)) = moments.get(id.index()) {
                    let t = Tensor::new(p.tensor.shape(), data.clone()).expect("moment matches parameter");
                    out.push((format!("{prefix}{}", p.name), t));
                }
            }
        }
        out
    }

    pub fn restore(
        lr: f64,
        t: u64,
        store: &ParamStore<f32>,
        tensors: &std::collections::BTreeMap<String, Tensor<f32>>,
    ) -> Result<Self> {
        let mut adam = Adam::new(lr);
        adam.t = t;
        adam.m = vec![None; store.len()];
        adam.v = vec![None; store.len()];
        for (id, p) in store.iter() {
            for (prefix, is_m) in [("optim.m.", true), ("optim.v.", false)] {
                if let Some(t) = tensors.get(&format!("{prefix}{}", p.name)) {
                    if t.shape() != p.tensor.shape() {
                        return Err(Error::Checkpoint(format!("optimizer state for {} has the wrong shape", p.name)));
                    }
                    let slot = if is_m { &mut adam.m } else { &mut adam.v };
                    slot[id.index()] = Some(t.data().to_vec());
                }
            }
        }
        Ok(adam)
    }
}

/// Halves the learning rate after `patience` epochs without a relative
/// improvement of at least `threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub threshold: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize) -> Self {
        PlateauScheduler { patience, factor: 0.5, threshold: 1e-4, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Records an epoch's monitored loss and returns the new learning rate.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn first_adam_step_moves_by_lr() {
        // after one step m_hat = g and v_hat = g^2, so the update is lr * sign(g)
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::new(&[3], vec![1.0, -1.0, 0.5]).unwrap(), true).unwrap();
        let frozen = store.add("f", Tensor::new(&[1], vec![2.0]).unwrap(), false).unwrap();
        let mut g = Graph::new();
        let (wv, fv) = (g.param(&store, w), g.param(&store, frozen));
        let x = g.input(Tensor::new(&[3], vec![3.0, -2.0, 0.0]).unwrap());
        let p = g.mul(wv, x).unwrap();
        let s = g.sum(p);
        let fs = g.sum(fv);
        let l = g.add(s, fs).unwrap();
        let grads = g.backward(l, &store).unwrap();
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, &grads);
        let d = store.tensor(w).data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6 && d[2] == 0.5);
        assert_eq!(store.tensor(frozen).data(), [2.0]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::new(&[2], vec![3.0, -4.0]).unwrap(), true).unwrap();
        let mut adam = Adam::new(0.05);
        for _ in 0..500 {
            let mut g = Graph::new();
            let wv = g.param(&store, w);
            let sq = g.mul(wv, wv).unwrap();
            let l = g.sum(sq);
            let grads = g.backward(l, &store).unwrap();
            adam.step(&mut store, &grads);
        }
        assert!(store.tensor(w).data().iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn state_round_trip() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::new(&[2], vec![3.0, -4.0]).unwrap(), true).unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let l = g.sum(wv);
        let grads = g.backward(l, &store).unwrap();
        let mut adam = Adam::new(0.05);
        adam.step(&mut store, &grads);
        let map = adam.state_tensors(&store).into_iter().collect();
        let back = Adam::restore(0.05, adam.t, &store, &map).unwrap();
        assert_eq!(back, adam);
    }

    #[test]
    fn plateau_halves_after_patience() {
        let mut s = PlateauScheduler::new(2);
        let mut lr = 1.0;
        for loss in [1.0, 0.9, 0.9, 0.9] {
            lr = s.observe(loss, lr);
        }
        assert_eq!(lr, 1.0);
        lr = s.observe(0.9, lr);
        assert_eq!(lr, 0.5);
        lr = s.observe(0.5, lr);
        assert_eq!(lr, 0.5);
        assert_eq!(s.best, 0.5);
    }
}
