pub mod beam;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod memory_tree;
pub mod model;
pub mod ontology;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
