//! AdamW with decoupled weight decay.

use crate::params::ParamStore;
use crate::tensor::Float;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that holds a gradient.
    /// Frozen parameters and parameters without a gradient are skipped.
    /// Moment estimates are kept in 64-bit regardless of parameter precision.
    pub fn step<T: Float>(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else {
                continue;
            };
            let n = grad.numel();
            let m = self.first[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let v = self.second[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let grad = grad.data().iter().map(|g| g.as_f64()).collect::<Vec<_>>();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mut x = w.as_f64();
                x -= self.lr * self.weight_decay * x;
                x -= self.lr * (m[j] / bias1) / ((v[j] / bias2).sqrt() + self.eps);
                *w = T::c(x);
            }
        }
    }
}
