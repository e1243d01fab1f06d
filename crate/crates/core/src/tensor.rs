//! Dense 4-axis arrays in (batch, channel, height, width) order.

use crate::error::{Error, Result};

/// Dims of a [`Tensor`]: `[batch, channels, height, width]`.
pub type Dims = [usize; 4];

/// A dense NCHW array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

pub(crate) fn numel(dims: Dims) -> usize {
    dims.iter().product()
}

impl Tensor {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Invalid(format!("tensor dims must be >= 1, got {dims:?}")));
        }
        if data.len() != numel(dims) {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {} values, got {}", numel(dims), data.len()),
            ));
        }
        Ok(Tensor { dims, data, requires_grad: false, grad: None })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: Dims, v: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "tensor dims must be >= 1, got {dims:?}");
        Tensor { dims, data: vec![v; numel(dims)], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self::full([1, 1, 1, 1], v)
    }

    /// Builds a tensor from a closure over `(b, c, y, x)`.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(numel(dims));
        for b in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Tensor { dims, data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.offset(b, c, y, x);
        self.data[i] = v;
    }

    /// One (height × width) plane.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let hw = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn reshape(self, dims: Dims) -> Result<Self> {
        if numel(dims) != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {dims:?}", self.dims)));
        }
        Ok(Tensor { dims, ..self })
    }

    /// The sub-tensor holding batch item `b`.
    pub fn batch_item(&self, b: usize) -> Tensor {
        let per = numel(self.dims) / self.dims[0];
        let data = self.data[b * per..(b + 1) * per].to_vec();
        Tensor { dims: [1, self.dims[1], self.dims[2], self.dims[3]], data, requires_grad: false, grad: None }
    }

    /// Stacks equally-shaped tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::Invalid("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::new();
        let mut batch = 0;
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return Err(Error::shape("stack", format!("{:?} vs {:?}", first.dims, t.dims)));
            }
            batch += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::new([batch, c, h, w], data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}
