//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for s in shapes {
            m.push(Tensor::zeros(s)?);
            v.push(Tensor::zeros(s)?);
        }
        Ok(Self { config, step: 0, m, v })
    }

    /// One update of every parameter from its gradient.
    pub fn step<'p>(&mut self, params: impl IntoIterator<Item = &'p mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} optimizer slots",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let mut seen = 0;
        for (i, p) in params.into_iter().enumerate() {
            let g = grads.get(i).ok_or_else(|| Error::shape("more parameters than gradients"))?;
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(format!(
                    "parameter {i}: shape {:?}, gradient {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            seen += 1;
        }
        if seen != grads.len() {
            return Err(Error::shape(format!("{seen} parameters for {} gradients", grads.len())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig { eps: 0.0, ..AdamConfig::default() };
        let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::<f64>::from_f64(&[3], &[0.3, -7.0, 1e-4]).unwrap();
        let mut st = AdamState::new(cfg, [p.shape()]).unwrap();
        st.step([&mut p], &[g]).unwrap();
        let want = [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f32>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), [p.shape()]).unwrap();
        st.step([&mut p], &[Tensor::zeros(&[2]).unwrap()]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::<f32>::zeros(&[2]).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), [p.shape()]).unwrap();
        assert!(st.step([&mut p], &[Tensor::zeros(&[3]).unwrap()]).is_err());
        assert!(st.step([&mut p], &[]).is_err());
    }
}
