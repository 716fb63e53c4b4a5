//! Dense tensor arithmetic and optimisation primitives.

mod adam;
mod ops;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use ops::{l2_normalize_rows, matmul, matmul_nt, row_norms, softmax_cross_entropy, NORM_EPS};
pub(crate) use tensor::hex_digest;
pub use tensor::{Real, Tensor};
