//! Minimal reverse-mode autodiff over dense tensors.
//!
//! One [`Tape`] owns every node of a computation; ops record boxed backward
//! closures, [`Tape::backward`] replays them from a scalar root, and leaf
//! gradients accumulate across calls. The op set is exactly what the
//! enhancement model needs: causal 2-D conv/deconv pairs, gated variants,
//! instance norm in offline and cumulative flavors, an LSTM, and the usual
//! elementwise/reduction glue.

pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod recurrent;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use conv::{conv_out_f, deconv_out_f, Conv2dCfg, Deconv2dCfg};
pub use norm::{NormCfg, NormMode};
pub use scalar::Scalar;
pub use tape::{GradSink, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}
