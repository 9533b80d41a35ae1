//! Double-precision tensors, a reverse-mode tape, parameter storage with
//! momentum SGD, and seeded random streams.

mod params;
pub mod rng;
mod tape;
mod tensor;

pub use params::{sgd_step, BoundParams, Group, Param, ParamGrads, ParamStore};
pub use tape::{
    leaky_softmax_rows, safe_log, softmax_rows, Gradients, Tape, Var, LEAKY_LOGIT_CLAMP,
};
pub use tensor::TensorValue;
