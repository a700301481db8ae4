//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! The op set is deliberately narrow: what convolutional autoencoders and
//! their reconstruction losses need, plus a finite-difference checker
//! ([`grad_check`]) to verify every backward rule.

mod element;
mod error;
mod gradcheck;
pub mod ops;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use ops::conv::{conv2d, conv_transpose2d};
pub use ops::elementwise::{elementwise, ElementwiseKind};
pub use ops::linear::linear;
pub use ops::norm::{batchnorm, BatchNormState, NormMode};
pub use ops::shape::{narrow, reduce, reshape, ReduceKind};
pub use tensor::{Backward, Node, Tensor};

/// Named trainable tensor, e.g. `enc.conv1.weight`.
#[derive(Debug, Clone)]
pub struct Parameter<T: Element = f32> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self { name: name.into(), value }
    }
}
