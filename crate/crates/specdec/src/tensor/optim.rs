//! SGD and Adam parameter updates over named tensors.

use super::{Real, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

struct AdamSlot<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

pub struct Optimizer<T: Real> {
    kind: OptKind,
    lr: T,
    slots: HashMap<String, AdamSlot<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn sgd(lr: T) -> Result<Self> {
        Self::new(OptKind::Sgd, lr)
    }

    pub fn adam(lr: T) -> Result<Self> {
        Self::new(OptKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }, lr)
    }

    pub fn new(kind: OptKind, lr: T) -> Result<Self> {
        if lr <= T::zero() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if let OptKind::Adam { beta1, beta2, eps } = kind {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::Config(format!(
                    "adam hyperparameters out of range: beta1={beta1} beta2={beta2} eps={eps}"
                )));
            }
        }
        Ok(Self { kind, lr, slots: HashMap::new() })
    }

    pub fn kind(&self) -> OptKind {
        self.kind
    }

    /// Apply one update to every parameter, then clear gradients.
    /// Errors if any parameter is missing its gradient.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<T>)]) -> Result<()> {
        for (name, p) in params.iter() {
            if p.grad().is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }
        for (name, p) in params.iter_mut() {
            let g = p.grad().unwrap().to_vec();
            match self.kind {
                OptKind::Sgd => {
                    let lr = self.lr;
                    for (w, gv) in p.data_mut().iter_mut().zip(&g) {
                        *w = *w - lr * *gv;
                    }
                }
                OptKind::Adam { beta1, beta2, eps } => {
                    let b1 = T::from_f64(beta1);
                    let b2 = T::from_f64(beta2);
                    let eps = T::from_f64(eps);
                    let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
                        m: vec![T::zero(); g.len()],
                        v: vec![T::zero(); g.len()],
                        step: 0,
                    });
                    slot.step += 1;
                    let bc1 = T::one() - b1.powi(slot.step as i32);
                    let bc2 = T::one() - b2.powi(slot.step as i32);
                    let lr = self.lr;
                    for ((w, gv), (m, v)) in p
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
                    {
                        *m = b1 * *m + (T::one() - b1) * *gv;
                        *v = b2 * *v + (T::one() - b2) * *gv * *gv;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            p.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_basic_update() {
        let mut p = Tensor::<f64>::from_vec(&[1], vec![1.0]).unwrap().with_grad();
        p.accumulate_grad(&[2.0], 1.0);
        let mut opt = Optimizer::sgd(0.1).unwrap();
        opt.step(&mut [("p".to_string(), &mut p)]).unwrap();
        assert_eq!(p.data(), &[0.8]);
        assert!(p.grad().is_none(), "grads are cleared after a step");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        for mut opt in [Optimizer::sgd(0.1).unwrap(), Optimizer::adam(0.1).unwrap()] {
            let mut p = Tensor::<f64>::from_vec(&[2], vec![1.5, -0.5]).unwrap().with_grad();
            p.accumulate_grad(&[0.0, 0.0], 1.0);
            opt.step(&mut [("p".to_string(), &mut p)]).unwrap();
            assert_eq!(p.data(), &[1.5, -0.5]);
        }
    }

    #[test]
    fn adam_first_step_moves_by_about_lr() {
        // From zero state with g = 1: m_hat = 1, v_hat = 1, so the step is
        // lr / (1 + eps), i.e. within 1e-9 of lr at f64.
        let mut p = Tensor::<f64>::from_vec(&[1], vec![0.0]).unwrap().with_grad();
        p.accumulate_grad(&[1.0], 1.0);
        let mut opt = Optimizer::adam(1e-3).unwrap();
        opt.step(&mut [("p".to_string(), &mut p)]).unwrap();
        let delta = -p.data()[0];
        assert!((delta - 1e-3).abs() < 1e-9, "delta {delta}");
    }

    #[test]
    fn missing_grad_names_the_parameter() {
        let mut p = Tensor::<f64>::zeros(&[1]).with_grad();
        let mut opt = Optimizer::sgd(0.1).unwrap();
        let err = opt.step(&mut [("w_qkv".to_string(), &mut p)]).unwrap_err();
        assert!(err.to_string().contains("w_qkv"), "{err}");
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        assert!(Optimizer::<f32>::sgd(0.0).is_err());
        assert!(Optimizer::<f32>::new(OptKind::Adam { beta1: 1.0, beta2: 0.999, eps: 1e-8 }, 0.1).is_err());
        assert!(Optimizer::<f32>::new(OptKind::Adam { beta1: 0.9, beta2: 0.999, eps: 0.0 }, 0.1).is_err());
    }
}
