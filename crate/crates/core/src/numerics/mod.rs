//! Dense tensors, parameters and reverse-mode differentiation.

mod float;
mod gradcheck;
mod param;
mod tape;
mod tensor;


pub use float::{dtype_size, DType, Float};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use param::{ParamId, ParamKind, ParamStore, Parameter};
pub use tape::{CustomOp, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{matmul, matmul_nt, matmul_tn, softmax_in_place, Tensor};

/// The one random generator threaded through every stochastic operation.
pub type Rng = rand_chacha::ChaCha8Rng;
