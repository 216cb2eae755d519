use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Adam hyperparameters. The learning rate is constant; there is no schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one pair of moment buffers per parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Option<Tensor<T>>>,
    second_moment: Vec<Option<Tensor<T>>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, index: usize) -> Option<&Tensor<T>> {
        self.first_moment.get(index).and_then(|m| m.as_ref())
    }

    pub fn second_moment(&self, index: usize) -> Option<&Tensor<T>> {
        self.second_moment.get(index).and_then(|m| m.as_ref())
    }

    /// Applies one update to every trainable parameter that holds a gradient.
    /// The step counter advances by one regardless.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of_f64(c.beta1), T::of_f64(c.beta2));
        let (one_b1, one_b2) = (T::of_f64(1.0 - c.beta1), T::of_f64(1.0 - c.beta2));
        let lr = T::of_f64(c.learning_rate);
        let (inv_bias1, inv_bias2) = (T::of_f64(1.0 / bias1), T::of_f64(1.0 / bias2));
        let eps = T::of_f64(c.epsilon);

        if self.first_moment.len() < store.len() {
            self.first_moment.resize(store.len(), None);
            self.second_moment.resize(store.len(), None);
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let param = store.get_mut(id);
            if !param.requires_grad() {
                continue;
            }
            let (value, grad) = param.value_and_grad();
            let Some(grad) = grad else { continue };
            if grad.shape() != value.shape() {
                return Err(shape_err("adam_step", value.shape(), grad.shape()));
            }
            let i = id.index();
            let m = self.first_moment[i].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.second_moment[i].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            for (((p, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m * inv_bias1;
                let v_hat = *v * inv_bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over every trainable gradient.
pub fn grad_norm<T: Float>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .filter(|(_, p)| p.requires_grad())
        .filter_map(|(_, p)| p.grad())
        .flat_map(|g| g.data().iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Float>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm && norm.is_finite() {
        let scale = T::of_f64(max_norm / norm);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if let Some(g) = store.get_mut(id).grad_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
    norm
}
