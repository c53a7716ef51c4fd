use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Linear warm-up from 0 to `base_lr` over `warmup_steps`, then linear decay
/// to 0 at `total_steps`.
pub fn lr_schedule(step: usize, base_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<f64> {
    if total_steps <= warmup_steps {
        return Err(Error::Config(format!("total_steps ({total_steps}) must exceed warmup_steps ({warmup_steps})")));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond total_steps {total_steps}")));
    }
    let lr = if step < warmup_steps {
        base_lr * step as f64 / warmup_steps as f64
    } else {
        base_lr * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64
    };
    Ok(lr)
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with a single learning rate for every parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.step_with(store, |_| lr)
    }

    /// One update where `lr_for(name)` picks each parameter's rate.
    pub fn step_with(&mut self, store: &mut ParamStore<T>, lr_for: impl Fn(&str) -> f64) -> Result<()> {
        for e in store.entries() {
            if e.grad.is_none() {
                return Err(Error::MissingGradient(e.name.clone()));
            }
        }
        if self.first.len() != store.len() {
            self.first = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let eps = T::of(self.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let lr = T::of(lr_for(store.name(id)));
            let grad = store.grad(id).expect("checked above").clone();
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let value = store.value_mut(id);
            for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert!((lr_schedule(500, 1e-5, 500, 2000).unwrap() - 1e-5).abs() < 1e-20);
        assert!((lr_schedule(250, 1e-5, 500, 2000).unwrap() - 5e-6).abs() < 1e-20);
        assert_eq!(lr_schedule(2000, 1e-5, 500, 2000).unwrap(), 0.0);
        assert_eq!(lr_schedule(0, 1e-5, 500, 2000).unwrap(), 0.0);
        assert!(lr_schedule(0, 1e-5, 500, 500).is_err());
        assert!(lr_schedule(2001, 1e-5, 500, 2000).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::row_vector(vec![0.25, -1.5])).unwrap();
        s.zero_grads();
        let before = s.clone();
        let mut adam = Adam::new();
        adam.step(&mut s, 0.1).unwrap();
        assert!(s.bit_equal(&before));
    }

    #[test]
    fn single_scalar_step_closed_form() {
        // After one step m̂ = g and v̂ = g², so the update is lr * g / (|g| + eps).
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::scalar(2.0)).unwrap();
        s.zero_grads();
        s.accumulate_grad(id, &Tensor::scalar(0.5)).unwrap();
        let mut adam = Adam::new();
        adam.step(&mut s, 0.01).unwrap();
        let want = 2.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((s.value(id).item() - want).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_named() {
        let mut s = ParamStore::<f32>::new();
        s.add_zeros("classifier.bias", &[1]).unwrap();
        let err = Adam::new().step(&mut s, 0.1).unwrap_err();
        assert!(err.to_string().contains("classifier.bias"));
    }
}
