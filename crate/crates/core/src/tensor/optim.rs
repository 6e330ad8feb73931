use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay.
///
/// Parameters without a gradient in a given step are left untouched and their
/// moments are not advanced.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First/second moment estimates of a parameter, if it has been updated.
    pub fn moments(&self, index: usize) -> Option<(&Tensor, &Tensor)> {
        match (self.first.get(index), self.second.get(index)) {
            (Some(Some(m)), Some(Some(v))) => Some((m, v)),
            _ => None,
        }
    }

    /// Applies one update. All gradients are validated before any parameter
    /// changes, so a non-finite gradient leaves the store untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: params.name(id).to_string(),
                });
            }
            if g.shape() != params.get(id).shape() {
                return Err(Error::InvalidArgument(format!(
                    "gradient shape {:?} does not match parameter `{}` {:?}",
                    g.shape(),
                    params.name(id),
                    params.get(id).shape()
                )));
            }
        }
        self.step += 1;
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (id, g) in grads.params() {
            let w = params.get_mut(id);
            let m = self.first[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (((w, m), v), &g) in w
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *w *= decay;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    /// Gradients for `loss = Σ w ⊙ c` are exactly `c`.
    fn grads_for(store: &ParamStore, id: crate::tensor::ParamId, c: Vec<f32>) -> Gradients {
        let mut g = Graph::new();
        let w = g.param(store, id);
        let k = g.constant(Tensor::row(c));
        let l = g.dot(w, k).unwrap();
        g.backward(l).unwrap()
    }

    #[test]
    fn zero_gradient_applies_decoupled_decay_only() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![2.0, -4.0]));
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg);
        let grads = grads_for(&store, id, vec![0.0, 0.0]);
        opt.step(&mut store, &grads).unwrap();
        let f = 1.0 - 0.1 * 0.5;
        assert_eq!(store.get(id).data(), &[2.0 * f, -4.0 * f]);
    }

    #[test]
    fn two_step_transcript() {
        // Scalar hand computation: w0 = 1, g = 0.5 then -0.25,
        // lr 0.1, betas (0.9, 0.999), eps 1e-8, wd 0.01.
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![1.0]));
        let cfg = AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
        let mut opt = AdamW::new(cfg);
        let g1 = grads_for(&store, id, vec![0.5]);
        opt.step(&mut store, &g1).unwrap();
        assert!((store.get(id).item() - 0.899_000_002).abs() < 1e-6);
        let g2 = grads_for(&store, id, vec![-0.25]);
        opt.step(&mut store, &g2).unwrap();
        assert!((store.get(id).item() - 0.871_467_298_7).abs() < 1e-6);
        let (m, v) = opt.moments(id.index()).unwrap();
        assert!((m.item() - 0.02).abs() < 1e-7);
        assert!((v.item() - 0.000_312_25).abs() < 1e-4 * 0.000_312_25);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![0.3, 0.7]));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() });
        for _ in 0..3 {
            let grads = grads_for(&store, id, vec![1.0, -2.0]);
            opt.step(&mut store, &grads).unwrap();
        }
        assert_eq!(store.get(id).data(), &[0.3, 0.7]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        let id = store.add("encoder.w0", Tensor::row(vec![1.0]));
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = grads_for(&store, id, vec![f32::NAN]);
        let err = opt.step(&mut store, &grads).unwrap_err();
        assert!(err.to_string().contains("encoder.w0"), "{err}");
        assert_eq!(store.get(id).item(), 1.0);
        assert_eq!(opt.step_count(), 0);
    }
}
