//! Detection of conical intersections in two-parameter symmetric definite
//! pencils `A(x, y) − λ B(x, y)` by tracking the smooth eigendecomposition
//! around closed loops and reading off the sign changes of the eigenvectors.

// `!(x > floor)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod census;
pub mod continuation;
pub mod detect;
pub mod linalg;
pub mod pencil;

pub use continuation::{
    trace_loop, trace_path, ContinuationConfig, ContinuationError, TraceResult,
};
pub use linalg::{gen_eig_ordered, SymMatrix};
pub use pencil::{LoopPath, ParametricPencil, PencilSpec, Rect};
