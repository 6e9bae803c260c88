//! Dense row-major tensors.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dimensions of a tensor. Feature maps are rank 4 `(N, C, H, W)`;
/// parameters may be rank 1 (bias, BN vectors) or rank 4 (conv kernels).
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        Shape(dims.into())
    }

    pub fn nchw(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape(vec![n, c, h, w])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    /// `(N, C, H, W)` of a rank-4 shape.
    pub fn nchw_dims(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.0.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::shape(op, format!("expected rank-4 (N,C,H,W), got {other:?}"))),
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("×"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(shape);
        if shape.numel() != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = Shape::new(shape);
        let data = vec![value; shape.numel()];
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    /// Converts from an `f32` buffer, used by image loading and checkpoints.
    pub fn from_f32(shape: impl Into<Vec<usize>>, data: &[f32]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.as_f64() as f32).collect()
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Element at `(n, c, h, w)`; panics if the tensor is not rank 4.
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let d = self.shape.dims();
        assert_eq!(d.len(), 4, "at() needs a rank-4 tensor");
        self.data[((n * d[1] + c) * d[2] + h) * d[3] + w]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Converts element type, rounding when narrowing.
    pub fn cast<S: Scalar>(&self) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| S::from_f64_lossy(v.as_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies out sample `n` of a rank-4 tensor as a `1×C×H×W` tensor.
    pub fn sample(&self, n: usize) -> Result<Self> {
        let (bn, c, h, w) = self.shape.nchw_dims("sample")?;
        if n >= bn {
            return Err(Error::shape("sample", format!("index {n} out of batch {bn}")));
        }
        let len = c * h * w;
        Ok(Tensor { shape: Shape::nchw(1, c, h, w), data: self.data[n * len..(n + 1) * len].to_vec() })
    }

    /// Stacks `1×C×H×W` (or `Nᵢ×C×H×W`) tensors along the batch axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("stack", "no tensors"))?;
        let (_, c, h, w) = first.shape.nchw_dims("stack")?;
        let mut n = 0;
        let mut data = Vec::new();
        for (i, p) in parts.iter().enumerate() {
            let (pn, pc, ph, pw) = p.shape.nchw_dims("stack")?;
            if (pc, ph, pw) != (c, h, w) {
                return Err(Error::shape(
                    "stack",
                    format!("input {i} has shape {:?}, expected [_, {c}, {h}, {w}]", p.shape),
                ));
            }
            n += pn;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: Shape::nchw(n, c, h, w), data })
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(8).collect();
        write!(f, "Tensor{:?} {:?}", self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "…")?;
        }
        Ok(())
    }
}
