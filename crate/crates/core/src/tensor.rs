//! Dense row-major `f32` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// An n-dimensional array with an optional gradient slot.
///
/// The shape is fixed at construction. Values may be updated in place by an
/// optimizer, but every differentiable op produces a fresh tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f32>,
    #[serde(skip)]
    grad: Option<Vec<f32>>,
    #[serde(skip)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(invalid(
                "Tensor::new",
                format!(
                    "shape {shape:?} holds {expected} values, got {}",
                    values.len()
                ),
            ));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: (0..n).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `grad` into the gradient slot, creating it if absent.
    pub fn accumulate_grad(&mut self, grad: &[f32]) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![grad.len()],
            });
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => self.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Returns a copy reshaped to `shape`; the element count must agree.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Self::new(shape.to_vec(), self.values.clone())
    }

    /// Gathers entries along `axis` at the listed indices.
    pub fn select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(invalid(
                "select",
                format!("axis {axis} out of range for {:?}", self.shape),
            ));
        }
        let extent = self.shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(invalid(
                "select",
                format!("index {bad} out of range for extent {extent}"),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut values = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * extent + i) * inner;
                values.extend_from_slice(&self.values[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Self::new(shape, values)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = *self.shape.last().unwrap_or(&1);
        self.values
            .chunks(cols.max(1))
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}
