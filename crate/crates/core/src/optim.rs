//! Adam with bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::nn::{Gradients, Network};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self::with_hyperparameters(lr, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
    }

    pub fn with_hyperparameters(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }

    /// One update over a list of parameter tensors and their gradients.
    ///
    /// Moments are zero-initialized on the first call and must keep the same
    /// shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "parameter {i} has shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::Shape("parameter shapes changed between Adam steps".into()));
        }

        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one_m_b1 = T::from_f64_lossy(1.0 - self.beta1);
        let one_m_b2 = T::from_f64_lossy(1.0 - self.beta2);
        let correct1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let correct2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((theta, &grad), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_m_b1 * grad;
                *vi = b2 * *vi + one_m_b2 * grad * grad;
                let m_hat = *mi / correct1;
                let v_hat = *vi / correct2;
                let delta = lr * m_hat / (v_hat.sqrt() + eps);
                if delta != T::zero() {
                    *theta = *theta - delta;
                }
            }
        }
        Ok(())
    }

    /// Applies `grads` to every trainable tensor of `net`.
    pub fn step_network(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<()> {
        let grads = grads.tensors();
        let mut params = net.params_mut().tensors_mut();
        self.step(&mut params, &grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut adam = AdamState::<f64>::new(1e-3);
        let mut p = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_hand_evaluated() {
        let mut adam = AdamState::<f64>::new(1e-4);
        let mut theta = scalar(0.0);
        adam.step(&mut [&mut theta], &[&scalar(1.0)]).unwrap();
        let expected = -1e-4 * (1.0 / (1.0 + 1e-7));
        assert!((theta.data()[0] - expected).abs() < 1e-18, "{}", theta.data()[0]);
        assert!((theta.data()[0] - -9.9999990e-5).abs() < 1e-12);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        for g in [1e-3, 1.0, 1e3, -5.0] {
            let mut adam = AdamState::<f64>::new(1e-4);
            let mut theta = scalar(1.0);
            adam.step(&mut [&mut theta], &[&scalar(g)]).unwrap();
            let delta = (theta.data()[0] - 1.0).abs();
            assert!(delta <= 1e-4 && delta >= 0.99e-4, "g={g} delta={delta}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut adam = AdamState::<f64>::new(1e-3);
        let mut p = Tensor::zeros(&[2]);
        assert!(adam.step(&mut [&mut p], &[&Tensor::zeros(&[3])]).is_err());
        adam.step(&mut [&mut p], &[&Tensor::zeros(&[2])]).unwrap();
        let mut q = Tensor::zeros(&[4]);
        assert!(adam.step(&mut [&mut q], &[&Tensor::zeros(&[4])]).is_err());
    }

    #[test]
    fn second_moment_stays_nonnegative() {
        let mut adam = AdamState::<f64>::new(1e-2);
        let mut p = Tensor::zeros(&[4]);
        for i in 0..50 {
            let g = Tensor::from_fn(&[4], |j| ((i * 7 + j * 3) as f64).sin() * 10f64.powi(j as i32 - 2));
            adam.step(&mut [&mut p], &[&g]).unwrap();
            assert!(adam.second_moments()[0].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_learning_rate_is_bitwise_noop() {
        let mut adam = AdamState::<f32>::new(0.0);
        let mut p = Tensor::from_vec(&[3], vec![0.0f32, -0.25, 1e-30]).unwrap();
        let before: Vec<u32> = p.data().iter().map(|v| v.to_bits()).collect();
        adam.step(&mut [&mut p], &[&Tensor::from_vec(&[3], vec![-1.0, 2.0, 3.0]).unwrap()]).unwrap();
        let after: Vec<u32> = p.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }
}
