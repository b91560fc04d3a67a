//! Differentiable primitives.
//!
//! Each op validates shapes, computes its output, and registers a backward
//! rule. All reductions accumulate in a fixed sequential order.

mod attention;
mod conv;
mod elementwise;
mod matmul;
mod norm;
mod pool;
mod reduce;
mod shape;

pub use attention::{attend, scaled_dot_product_attention, softmax, temporal_attention};
pub use conv::{conv2d, conv3d};
pub use elementwise::{add, mul, scale, silu, sub};
pub use matmul::{linear, matmul};
pub use norm::group_norm;
pub use pool::{avg_pool2x, upsample_nearest2x};
pub use reduce::{mean, sum};
pub use shape::{concat, narrow, permute, reshape};

use super::{Result, Tensor};

/// Method-call sugar over the free functions.
impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        add(self, other)
    }
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        sub(self, other)
    }
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        mul(self, other)
    }
    pub fn scale(&self, factor: f32) -> Tensor {
        scale(self, factor)
    }
    pub fn silu(&self) -> Tensor {
        silu(self)
    }
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        reshape(self, shape)
    }
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        permute(self, axes)
    }
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        narrow(self, axis, start, len)
    }
    pub fn sum(&self) -> Tensor {
        sum(self)
    }
    pub fn mean(&self) -> Tensor {
        mean(self)
    }
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }
    pub fn softmax(&self) -> Result<Tensor> {
        softmax(self)
    }
}

/// Row-major strides.
pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
