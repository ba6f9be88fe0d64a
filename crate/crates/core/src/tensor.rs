//! Dense tensor values with shape metadata.
//!
//! Data is stored row-major (last axis fastest). Feature maps follow the
//! N x C x H x W convention, vectors N x D.

use crate::error::{Result, SeidError};

/// Ordered list of positive extents.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(SeidError::shape(format!(
                "every extent must be >= 1, got {dims:?}"
            )));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn elem_count(&self) -> usize {
        self.0.iter().product()
    }

    /// Shapes concatenate along `axis` iff all other extents match.
    pub fn concat_with(&self, other: &Shape, axis: usize) -> Result<Shape> {
        if self.rank() != other.rank() || axis >= self.rank() {
            return Err(SeidError::shape(format!(
                "cannot concat {:?} with {:?} along axis {axis}",
                self.0, other.0
            )));
        }
        for (i, (&a, &b)) in self.0.iter().zip(&other.0).enumerate() {
            if i != axis && a != b {
                return Err(SeidError::shape(format!(
                    "cannot concat {:?} with {:?} along axis {axis}: extent {i} differs",
                    self.0, other.0
                )));
            }
        }
        let mut dims = self.0.clone();
        dims[axis] += other.0[axis];
        Shape::new(dims)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// Dense N-dimensional real array in 64-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.elem_count() {
            return Err(SeidError::shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.elem_count()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_dims(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, data)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let shape = Shape::new(dims).expect("zeros: invalid dims");
        let n = shape.elem_count();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let shape = Shape::new(dims).expect("full: invalid dims");
        let n = shape.elem_count();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn ones(dims: &[usize]) -> Self {
        Tensor::full(dims, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape(vec![1]),
            data: vec![value],
        }
    }

    pub fn elem_count(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(SeidError::contract(format!(
                "expected scalar tensor, got shape {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, dims: &[usize]) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if shape.elem_count() != self.elem_count() {
            return Err(SeidError::shape(format!(
                "cannot reshape {} into {}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }
}
