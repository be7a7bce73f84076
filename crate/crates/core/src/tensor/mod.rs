//! Dense rank-4 tensors in `(n, h, w, c)` layout, forward kernels, the
//! gradient tape and the tensor file format.

mod element;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod macs;
pub mod ops;
pub mod rng;

use std::fmt;

pub use element::{DType, Element};
pub use graph::{Gradients, Graph, Var};
pub use rng::Rng;

use crate::error::{dim_err, Error, Result};

/// Extents of a rank-4 tensor, always `(n, h, w, c)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape([n, h, w, c])
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.0[2]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Number of `c`-wide rows when the tensor is viewed as a matrix.
    pub fn rows(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    #[inline]
    pub fn offset(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.0[1] + y) * self.0[2] + x) * self.0[3] + c
    }

    pub fn with_c(&self, c: usize) -> Shape {
        Shape([self.0[0], self.0[1], self.0[2], c])
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.0.contains(&0) {
            return dim_err(format!("all extents must be >= 1, got {self}"));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, h, w, c] = self.0;
        write!(f, "({n}, {h}, {w}, {c})")
    }
}

impl From<[usize; 4]> for Shape {
    fn from(v: [usize; 4]) -> Self {
        Shape(v)
    }
}

/// Contiguous row-major tensor in `(n, h, w, c)` order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        if shape.numel() != data.len() {
            return dim_err(format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    /// Unchecked constructor for kernels whose output shape is derived from
    /// already-validated inputs.
    pub(crate) fn from_raw(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        assert!(shape.validate().is_ok(), "invalid shape {shape}");
        Tensor { data: vec![value; shape.numel()], shape }
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: Shape::new(1, 1, 1, 1), data: vec![v] }
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let shape = shape.into();
        assert!(shape.validate().is_ok(), "invalid shape {shape}");
        let [n, h, w, c] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for k in 0..c {
                        data.push(f([i, y, x, k]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Samples i.i.d. standard-normal-ish values, used by tests and examples.
    pub fn randn(shape: impl Into<Shape>, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel()).map(|_| T::from_f64(rng.normal())).collect();
        Tensor::from_raw(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.shape.offset(n, y, x, c)]
    }

    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, v: T) {
        let o = self.shape.offset(n, y, x, c);
        self.data[o] = v;
    }

    /// The single value of a `(1, 1, 1, 1)` tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        if shape.numel() != self.numel() {
            return dim_err(format!("cannot reshape {} into {shape}", self.shape));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
    }

    /// Splits along the batch axis into `n` tensors of batch 1.
    pub fn unbatch(&self) -> Vec<Self> {
        let per = self.numel() / self.shape.n();
        let s = Shape::new(1, self.shape.h(), self.shape.w(), self.shape.c());
        self.data.chunks(per).map(|c| Tensor::from_raw(s, c.to_vec())).collect()
    }

    /// Stacks batch-1 (or larger) tensors along the batch axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return dim_err("stack of zero tensors");
        };
        let [_, h, w, c] = first.shape.0;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.h() != h || p.shape.w() != w || p.shape.c() != c {
                return dim_err(format!("stack: {} vs {}", p.shape, first.shape));
            }
            n += p.shape.n();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_raw(Shape::new(n, h, w, c), data))
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(
            f,
            "Tensor<{}>{} {:?}{}",
            std::any::type_name::<T>(),
            self.shape,
            preview,
            if self.data.len() > 8 { " ..." } else { "" }
        )
    }
}
