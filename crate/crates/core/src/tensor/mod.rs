//! Dense tensors, the gradient tape, seeded sampling and parameter storage.

mod array;
pub mod gradcheck;
mod params;
mod rng;
mod tape;

pub use array::Tensor;
pub(crate) use array::{mm, mm_at, mm_bt, sigmoid, silu, silu_grad};
pub use gradcheck::{grad_check, grad_check_many, grad_check_params, relative_error, CoordCheck};
pub use params::{Bound, ParamId, ParamStore, TensorRecord};
pub use rng::{mix_seed, Dist, SeededRng};
pub use tape::{CustomBackward, Gradients, NodeId, Primitive, Tape, Var, LEAKY_SLOPE};

/// Variance guard used by every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-10;
