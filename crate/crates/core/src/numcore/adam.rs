use crate::error::{Error, Result};

use super::{Scalar, Tensor};

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
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam moments for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments matching each parameter's shape.
    pub fn new<'p>(config: AdamConfig, params: impl IntoIterator<Item = &'p Tensor<T>>) -> Self {
        let first: Vec<_> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second = first.clone();
        Self {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn num_params(&self) -> usize {
        self.first.len()
    }

    /// One bias-corrected Adam update, in place. `grads[i]` belongs to
    /// `params[i]`; a missing entry is a usage error and nothing is updated.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Usage(format!(
                "adam tracks {} params, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or_else(|| Error::Usage(format!("missing gradient for parameter {i}")))?;
            if g.shape() != p.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::Usage(format!(
                    "parameter {i}: shape {:?}, gradient {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    self.first[i].shape()
                )));
            }
        }

        self.step += 1;
        let c = &self.config;
        let beta1 = T::from_f64_lossy(c.beta1);
        let beta2 = T::from_f64_lossy(c.beta2);
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        let bias1 = T::one() - beta1.powi(self.step as i32);
        let bias2 = T::one() - beta2.powi(self.step as i32);

        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].expect("checked above");
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (T::one() - beta1) * gi;
                *vi = beta2 * *vi + (T::one() - beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut p = Tensor::vector(vec![0.5f64]);
        let g = Tensor::vector(vec![1.0]);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.01), [&p]);
        adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
        let expected = 0.5 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::vector(vec![0.25f64, -3.0]);
        let before = p.clone();
        let g = Tensor::zeros(&[2]);
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        for _ in 0..10 {
            adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.steps(), 10);
    }

    #[test]
    fn only_param_with_gradient_moves() {
        let mut a = Tensor::vector(vec![1.0f64]);
        let mut b = Tensor::vector(vec![1.0f64]);
        let ga = Tensor::vector(vec![0.0]);
        let gb = Tensor::vector(vec![2.0]);
        let mut adam = AdamState::new(AdamConfig::default(), [&a, &b]);
        adam.step(&mut [&mut a, &mut b], &[Some(&ga), Some(&gb)]).unwrap();
        assert_eq!(a.data()[0], 1.0);
        assert!(b.data()[0] < 1.0);
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut a = Tensor::vector(vec![1.0f64]);
        let mut adam = AdamState::new(AdamConfig::default(), [&a]);
        let err = adam.step(&mut [&mut a], &[None]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert_eq!(adam.steps(), 0);
    }
}
