//! Dense matrices, the differentiation tape, and the small set of numeric
//! operations the model stack is built from.

mod gradcheck;
mod matrix;
mod ops;
mod sinusoid;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::Matrix;
pub use ops::{gelu, layer_norm, matmul, scaled_dot_attention, softmax_rows};
pub use sinusoid::SinusoidalTable;
pub use tape::{taped_attention, taped_ffn, taped_split_head_attention, BufId, Tape};

/// Default layer-norm epsilon used across the model stack.
pub const LAYER_NORM_EPS: f64 = 1e-5;
