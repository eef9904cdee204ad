//! Dense row-major `f64` tensors.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A dense tensor that may participate in gradient computation.
///
/// Tensors stored in models are *parameters*: the tape reads their data when
/// they are bound as leaves and the computed gradient is written back into
/// `grad`. Tensors with `requires_grad == false` never carry a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) || n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    /// No-op for tensors that do not require gradients.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        if !self.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let mut t = self.clone();
        t.data.iter_mut().for_each(|x| *x *= c);
        t.grad = None;
        t
    }

    /// Little-endian byte image of the data, as stored in checkpoints.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    /// SHA-256 over shape and data bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for &s in &self.shape {
            h.update((s as u64).to_le_bytes());
        }
        h.update(self.to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Anything that owns named parameter tensors in a fixed order.
///
/// The order is part of the contract: optimizers, checkpoints and gradient
/// checks all rely on it being deterministic.
pub trait Parameterized {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn trainable_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(_, t)| t.len())
            .sum()
    }

    fn frozen_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, t)| !t.requires_grad)
            .map(|(_, t)| t.len())
            .sum()
    }

    fn zero_grads(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }
}

impl Parameterized for Vec<Tensor> {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.iter().enumerate().map(|(i, t)| (i.to_string(), t)).collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.iter_mut()
            .enumerate()
            .map(|(i, t)| (i.to_string(), t))
            .collect()
    }
}

/// Combined checksum over a named parameter list, order-sensitive.
pub fn checksum_all<'a>(params: impl IntoIterator<Item = (String, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update(t.checksum().as_bytes());
    }
    hex::encode(h.finalize())
}
