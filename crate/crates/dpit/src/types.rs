//! Shared domain types.
//!
//! Images and feature maps are [B, C, H, W] tensors with values nominally in
//! [0, 1]; the dual-stream currency of the network is a pair of equal-shape
//! feature maps.

use candle_core::Tensor;

use crate::error::Result;
use crate::invalid_arg;

/// Ordered pair of equal-shape feature maps (left stream, right stream).
#[derive(Clone)]
pub struct StreamPair {
    pub left: Tensor,
    pub right: Tensor,
}

impl StreamPair {
    pub fn new(left: Tensor, right: Tensor) -> Result<Self> {
        if left.dims() != right.dims() {
            invalid_arg!(
                "stream pair shapes differ: {:?} vs {:?}",
                left.dims(),
                right.dims()
            );
        }
        Ok(Self { left, right })
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.left.dims4()?)
    }

    pub fn channels(&self) -> Result<usize> {
        Ok(self.left.dims4()?.1)
    }

    /// Apply the same fallible transform to both streams.
    pub fn map(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Self> {
        StreamPair::new(f(&self.left)?, f(&self.right)?)
    }
}

/// Transmission, reflection and nonlinear-residual estimates, all shaped like
/// the input image.
#[derive(Clone)]
pub struct SeparationOutput {
    pub t_hat: Tensor,
    pub r_hat: Tensor,
    pub phi_hat: Tensor,
}

pub fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        invalid_arg!("{what}: shape mismatch {:?} vs {:?}", a.dims(), b.dims());
    }
    Ok(())
}
