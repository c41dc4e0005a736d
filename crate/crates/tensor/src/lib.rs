//! Small reverse-mode automatic differentiation engine.
//!
//! Everything is computed in `f64`. The primitives cover what 1-D
//! convolutional autoencoders and bidirectional LSTMs need: strided
//! "same"-padded convolutions and their adjoints, batch normalization,
//! dense layers, fused LSTM scans, elementwise activations and the usual
//! regression and classification losses.

mod error;
mod gradcheck;
mod graph;
pub mod init;
mod kernels;
mod optim;
mod param;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{softmax_rows, Activation, BatchStats, BnMode, Graph, LeafGrads, Var};
pub use kernels::ConvGeom;
pub use optim::Adam;
pub use param::{ParamId, ParamSet, Parameter};
pub use tensor::Tensor;
