//! A named trainable tensor and its initialization rules.

use crate::autodiff::{Tape, TensorId};
use crate::error::Result;
use crate::rng::SeededRng;
use rand::Rng;

/// A trainable buffer living outside any tape. Each training step binds it
/// onto a fresh tape as a named leaf and pulls the gradient back out.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

impl Param {
    /// I.i.d. uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)) where
    /// fan_in is the leading extent (the input dimension of `x * W`).
    pub fn uniform_fan_in(name: &'static str, shape: &[usize], rng: &mut SeededRng) -> Self {
        let fan_in = shape[0] as f64;
        let bound = 1.0 / fan_in.sqrt();
        let n: usize = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Self { name, shape: shape.to_vec(), value }
    }

    pub fn zeros(name: &'static str, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { name, shape: shape.to_vec(), value: vec![0.0; n] }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<TensorId> {
        tape.leaf_named(self.name, &self.shape, self.value.clone())
    }
}
