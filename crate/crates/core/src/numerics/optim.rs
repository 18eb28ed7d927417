use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// Adam with bias-corrected moments. Moment buffers follow the store's
/// insertion order, so one optimizer belongs to one store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step_index: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step_index: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_index
    }

    /// Applies one update using the gradients currently held by `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        if self.first.len() != store.len() {
            self.first = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.second = self.first.clone();
        }
        self.step_index += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_index as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad.as_ref().expect("checked above");
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        for p in s.iter_mut() {
            p.grad = Some(Tensor::scalar(g));
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(0.7);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            set_grad(&mut s, 0.0);
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.value("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr / (1 + eps).
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        set_grad(&mut s, 1.0);
        adam.step(&mut s).unwrap();
        let w = s.value("w").unwrap().data()[0];
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        // Independent scalar Adam, written out longhand.
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let g = 0.3;
        let mut w = 2.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - f64::powi(b1, t));
            let vh = v / (1.0 - f64::powi(b2, t));
            w -= lr * mh / (vh.sqrt() + eps);
        }

        let mut s = scalar_store(2.0);
        let mut adam = Adam::new(AdamConfig { lr, beta1: b1, beta2: b2, eps });
        for _ in 0..2 {
            set_grad(&mut s, g);
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.value("w").unwrap().data()[0], w);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut s = scalar_store(1.0);
        s.insert("other", Tensor::scalar(0.0)).unwrap();
        s.get_mut(s.id("w").unwrap()).grad = Some(Tensor::scalar(1.0));
        let err = Adam::new(AdamConfig::default()).step(&mut s).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "other"));
    }
}
