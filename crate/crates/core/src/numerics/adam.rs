// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam moments for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize], lr: f64) -> Self {
        let n = shape.iter().product();
        Self {
            step: 0,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    /// Applies one update in place and clears `grad`.
    pub fn step(&mut self, param: &mut Tensor<T>, grad: &mut Option<Tensor<T>>) -> Result<()> {
        let g = grad
            .take()
            .ok_or_else(|| Error::Contract("adam step without a gradient".into()))?;
        if g.len() != param.len() || self.m.len() != param.len() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?}, grad {:?}", param.shape(), g.shape()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let c1 = T::from_f64(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        let one = T::one();
        for (((p, &gi), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * gi;
            *v = b2 * *v + (one - b2) * gi * gi;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut p = Tensor::<f64>::new(vec![2], vec![0.5, -1.5]).unwrap();
        let mut st = AdamState::new(&[2], 1e-3);
        st.step(&mut p, &mut Some(Tensor::zeros(&[2]))).unwrap();
        assert_eq!(p.data(), &[0.5, -1.5]);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut st = AdamState::new(&[1], 0.001);
        let mut g = Some(Tensor::scalar(1.0));
        st.step(&mut p, &mut g).unwrap();
        assert!(g.is_none());
        // m_hat = 1, v_hat = 1 after bias correction
        let expected = 1.0 - 0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut a = Tensor::<f32>::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let mut b = a.clone();
        let mut sa = AdamState::new(&[3], 0.01);
        let mut sb = AdamState::new(&[3], 0.01);
        for k in 0..5 {
            let g = Tensor::new(vec![3], vec![0.3 * k as f32, -1.0, 2.0]).unwrap();
            sa.step(&mut a, &mut Some(g.clone())).unwrap();
            sb.step(&mut b, &mut Some(g)).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut p = Tensor::<f32>::scalar(1.0);
        let mut st = AdamState::new(&[1], 0.001);
        assert!(matches!(st.step(&mut p, &mut None), Err(Error::Contract(_))));
    }
}
