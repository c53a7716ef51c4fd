//! Dense tensors, a reverse-mode tape, Adam, and finite-difference checks.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{Graph, Segment, Var};
pub use optim::{lr_schedule, Adam};
pub use params::{ParamId, ParamStore};
pub use tensor::{log_sum_exp, softmax, Scalar, Tensor};

/// Uniform initialisation half-width for embeddings and weight matrices.
pub const INIT_SCALE: f64 = 0.05;
/// Global gradient-norm ceiling applied before each optimizer step.
pub const CLIP_NORM: f64 = 1.0;
