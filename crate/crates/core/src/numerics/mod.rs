//! A small reverse-mode differentiation engine over `f64` tensors.
//!
//! Only the operations the velocity network and its losses need are provided:
//! 3x3 convolution with replication padding, exact-erf GELU, dense affine maps,
//! mean squared error, 2x2 space-to-depth (and its inverse), channel
//! concatenation and row broadcasting. Everything runs single-threaded so that
//! forward values and gradients are bit-reproducible.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Eager 3x3 convolution outside of any training graph.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, k, b) = (
        g.leaf(input.clone()),
        g.leaf(kernel.clone()),
        g.leaf(bias.clone()),
    );
    let y = g.conv2d(x, k, b)?;
    Ok(g.value(y).clone())
}

pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| kernels::gelu(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, w, b) = (
        g.leaf(input.clone()),
        g.leaf(weight.clone()),
        g.leaf(bias.clone()),
    );
    let y = g.linear(x, w, b)?;
    Ok(g.value(y).clone())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (x, y) = (g.leaf(a.clone()), g.leaf(b.clone()));
    let l = g.mse(x, y)?;
    Ok(g.value(l).item())
}
