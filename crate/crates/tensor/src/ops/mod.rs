//! Differentiable operations recorded on a [`Tape`](crate::Tape).

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;

pub use conv::{
    conv2d, conv2d_forward, conv_output_extent, conv_transpose2d, conv_transpose2d_forward,
    conv_transpose_output_extent, ConvGeometry,
};
pub use norm::{batch_norm2d_eval, batch_norm2d_train, BatchMoments};
