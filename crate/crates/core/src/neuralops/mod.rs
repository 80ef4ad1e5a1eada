//! Differentiable numeric operators.
//!
//! Every operator comes as a `forward` function and a matching `*_backward`
//! function that takes the forward inputs plus the gradient of the output and
//! returns exact vector-Jacobian products. Tensors are generic over [`Real`] so
//! the same code runs in `f32` for training and inference and in `f64` for
//! finite-difference checks. Reductions accumulate in `f64` either way.

mod activation;
mod conv;
mod deform;
mod optim;
mod tensor;
mod upsample;

pub use activation::{pointwise, pointwise_backward, sigmoid, Activation};
pub use conv::{conv2d, conv2d_backward, conv_output_size, Conv2dGrads};
pub use deform::{deformable_conv2d, deformable_conv2d_backward, DeformConv2dGrads};
pub use optim::{sgd_step, ParamId, Parameter, ParameterSet};
pub use tensor::{FeatureMap, Real, Tensor};
pub use upsample::{bilinear_upsample, bilinear_upsample_backward};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("training diverged: non-finite gradient in parameter `{param}`")]
    Divergence { param: String },
}

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> OpError {
    OpError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
