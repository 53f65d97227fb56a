//! Code hierarchy, description embeddings and the per-code preprocessed mapping.

mod codebook;
mod embedder;
mod hierarchy;

pub use codebook::{CodeBook, CodeInfo};
pub use embedder::{EmbedderSpec, EmbeddingTable, HashEmbedder, TextEmbedder};
pub use hierarchy::{Ontology, OntologyEntry, LEVELS};
