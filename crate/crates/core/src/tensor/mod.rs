//! Dense tensors with a small reverse-mode autodiff tape.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod value;

pub use checkpoint::{Checkpoint, ManifestEntry};
pub use gradcheck::grad_check;
pub use graph::{dot_slices, sigmoid, softmax_in_place, Graph, Var};
pub use params::{Bound, ParamId, ParamStore};
pub use value::Tensor;
