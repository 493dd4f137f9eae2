use std::collections::HashMap;

use crate::autograd::{Gradients, ParamKey};
use crate::models::{ModelBundle, GENERATOR};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with a learning rate decaying linearly to zero over `total_steps`.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: usize,
    step: usize,
    moments: HashMap<ParamKey, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, total_steps: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, total_steps: total_steps.max(1), step: 0, moments: HashMap::new() }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.lr * (1.0 - self.step as f64 / self.total_steps as f64).max(0.0)
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, bundle: &mut ModelBundle<S>, grads: &Gradients<S>) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::from_f64_lossy(self.beta1), S::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let step_size = S::from_f64_lossy(lr / c1);
        let inv_c2 = S::from_f64_lossy(1.0 / c2);
        let eps = S::from_f64_lossy(self.eps);
        let mut keys: Vec<&ParamKey> = grads.keys().collect();
        keys.sort();
        for key in keys {
            assert!(
                !(key.group == GENERATOR && bundle.generator_frozen),
                "gradient for the frozen generator reached the optimizer"
            );
            let g = grads.get(key).expect("key from iteration");
            let param = bundle.params_mut(key.group).get_mut(key.index);
            let (m, v) = self
                .moments
                .entry(*key)
                .or_insert_with(|| (Tensor::zeros(g.rows(), g.cols()), Tensor::zeros(g.rows(), g.cols())));
            for (((p, &gi), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *p -= step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
    }
}
