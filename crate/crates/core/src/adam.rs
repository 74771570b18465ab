//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        Ok(AdamState {
            config,
            first: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[T] {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &[T] {
        &self.second[i]
    }

    /// Applies one update in place using each parameter's stored gradient.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::invalid(format!(
                "adam_step: {} parameters but state tracks {}",
                params.len(),
                self.first.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            match p.grad() {
                None => return Err(Error::MissingGrad(i)),
                Some(g) if g.len() != self.first[i].len() => {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        left: p.shape().dims(),
                        right: vec![self.first[i].len()],
                    })
                }
                Some(_) => {}
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as f64;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let correction1 = T::of(1.0 - c.beta1.powf(t));
        let correction2 = T::of(1.0 - c.beta2.powf(t));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);

        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (data, grad) = p.parts_mut();
            let grad = grad.expect("checked above");
            for (((x, &g), m), v) in data
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn param(values: &[f64], grad: &[f64]) -> Tensor<f64> {
        let mut t = Tensor::from_vec(Shape::new(1, 1, values.len(), 1), values.to_vec()).unwrap();
        t.set_grad(grad.to_vec()).unwrap();
        t
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = vec![param(&[1.0, -2.0, 0.5], &[3.0, -0.01, 1e3])];
        let mut st = AdamState::new(AdamConfig::with_lr(1e-5), &ps).unwrap();
        let before = ps[0].data().to_vec();
        st.step(&mut ps).unwrap();
        for ((a, b), g) in ps[0].data().iter().zip(before).zip([3.0, -0.01, 1e3]) {
            let delta = b - a;
            assert!((delta.abs() - 1e-5).abs() < 1e-9, "{delta}");
            assert_eq!(delta.signum(), f64::signum(g));
        }
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut ps = vec![param(&[1.0, 2.0], &[0.0, 0.0])];
        let mut st = AdamState::new(AdamConfig::default(), &ps).unwrap();
        st.step(&mut ps).unwrap();
        assert_eq!(ps[0].data(), &[1.0, 2.0]);
        assert_eq!(st.first_moment(0), &[0.0, 0.0]);
        assert_eq!(st.second_moment(0), &[0.0, 0.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn missing_grad_rejected() {
        let mut ps = vec![Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1))];
        let mut st = AdamState::new(AdamConfig::default(), &ps).unwrap();
        assert!(matches!(st.step(&mut ps), Err(Error::MissingGrad(0))));
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn descends_scalar_quadratic() {
        // minimize (x - 3)^2 from x = 0
        let mut ps = vec![param(&[0.0], &[0.0])];
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &ps).unwrap();
        let mut prev_gap = 3.0f64;
        for _ in 0..10 {
            let x = ps[0].data()[0];
            ps[0].set_grad(vec![2.0 * (x - 3.0)]).unwrap();
            st.step(&mut ps).unwrap();
            let gap = (3.0 - ps[0].data()[0]).abs();
            assert!(gap < prev_gap);
            assert!(ps[0].data()[0] < 3.0);
            prev_gap = gap;
        }
    }

    #[test]
    fn non_positive_lr_rejected() {
        assert!(AdamState::<f64>::new(AdamConfig::with_lr(0.0), &[]).is_err());
    }
}
