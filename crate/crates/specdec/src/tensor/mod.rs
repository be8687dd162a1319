//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Storage is row-major and contiguous; no views or strides. Training and
//! inference run at `f32`, while gradient-check and oracle tests instantiate
//! the same code at `f64`.

pub mod graph;
pub mod kernels;
pub mod optim;

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Scalar element type for tensors and graphs.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense multi-dimensional array. `grad` is populated by copying gradients
/// out of a [`graph::Graph`] after a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Normal(0, std) initialization from a seeded stream.
    pub fn randn(shape: &[usize], std: T, rng: &mut ChaCha8Rng) -> Self {
        let mut t = Self::zeros(shape);
        for v in t.data.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = T::from_f64(z) * std;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, v: bool) {
        self.requires_grad = v;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Accumulate a gradient contribution (e.g. copied out of a graph).
    pub fn accumulate_grad(&mut self, g: &[T], scale: T) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => {
                for (dst, &src) in buf.iter_mut().zip(g) {
                    *dst += src * scale;
                }
            }
            None => {
                self.grad = Some(g.iter().map(|&v| v * scale).collect());
            }
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Interpret as a 2D matrix: `[n]` becomes `[1, n]`, `[r, c]` stays.
    pub fn as_2d(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::ShapeMismatch {
                op: "as_2d",
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }
}

/// Convert an f32 tensor's contents into f64 (for oracle paths).
pub fn to_f64_vec(data: &[f32]) -> Vec<f64> {
    data.iter().map(|&v| v as f64).collect()
}
