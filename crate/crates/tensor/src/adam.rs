use crate::{ParamStore, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// One bias-corrected Adam update. Weight decay enters the gradient as
    /// `g + weight_decay·θ`. Every trainable parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<(), TensorError> {
        if self.first_moment.len() != store.len() {
            return Err(TensorError::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                store.len()
            )));
        }
        for (id, p) in store.iter() {
            if p.requires_grad && p.grad.is_none() {
                return Err(TensorError::Contract(format!("parameter {} has no gradient", p.name)));
            }
            if p.value.len() != self.first_moment[id.index()].len() {
                return Err(TensorError::Contract(format!("moment shape mismatch for {}", p.name)));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.get(id).requires_grad {
                continue;
            }
            let grad = store.get_mut(id).grad.take().expect("checked above");
            let m = &mut self.first_moment[id.index()];
            let v = &mut self.second_moment[id.index()];
            let theta = store.value_mut(id).data_mut();
            for i in 0..theta.len() {
                let g = grad.data()[i] + weight_decay * theta[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            store.get_mut(id).grad = Some(grad);
        }
        Ok(())
    }
}
