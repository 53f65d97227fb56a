//! Text embedders standing in for a pretrained clinical language model.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::tokenize;
use crate::error::{Error, Result};

/// Maps text to a fixed-size vector. The same text must always produce the
/// bitwise-identical vector.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Deterministic fallback: every token hashes to `dim` pseudo-random values in
/// `[-1, 1]`; a text is the element-wise max over its tokens, L2-normalized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        (0..self.dim).map(|_| rng.gen_range(-1.0..=1.0)).collect()
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::DegenerateInput(format!("no tokens in {text:?}")));
        }
        let mut pooled = vec![f64::NEG_INFINITY; self.dim];
        for tok in &tokens {
            for (p, v) in pooled.iter_mut().zip(self.token_vector(tok)) {
                *p = p.max(v);
            }
        }
        let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            pooled.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(pooled)
    }
}

/// Precomputed vectors keyed by exact text, typically produced offline by a
/// language model.
///
/// File format: UTF-8 TSV, one row per text: `text<TAB>v1 v2 ... v_n`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: HashMap<String, Vec<f64>>,
    order: Vec<String>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn insert(&mut self, text: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let text = text.into();
        if vector.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "vector for {text:?} has dimension {}, table has {}",
                vector.len(),
                self.dim
            )));
        }
        if self.rows.insert(text.clone(), vector).is_none() {
            self.order.push(text);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, text: &str) -> Option<&[f64]> {
        self.rows.get(text).map(Vec::as_slice)
    }

    pub fn parse(body: &str, origin: &str) -> Result<Self> {
        let mut table = Self::default();
        for (i, line) in body.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let row = i + 1;
            let (text, values) = line.split_once('\t').ok_or_else(|| {
                Error::format(origin, format!("row {row}: missing tab separator"))
            })?;
            let vector = values
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(origin, format!("row {row}: {e}")))?;
            if vector.is_empty() {
                return Err(Error::format(origin, format!("row {row}: empty vector")));
            }
            if table.dim == 0 {
                table.dim = vector.len();
            } else if vector.len() != table.dim {
                return Err(Error::format(
                    origin,
                    format!(
                        "row {row}: dimension {} differs from {} in earlier rows",
                        vector.len(),
                        table.dim
                    ),
                ));
            }
            table.insert(text, vector)?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&body, &path.display().to_string())
    }

    /// Writes rows in insertion order. Values use Rust's shortest round-trip
    /// float formatting, so reading the file back is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for text in &self.order {
            let values: Vec<String> = self.rows[text].iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{text}\t{}", values.join(" ")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl TextEmbedder for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.rows
            .get(text)
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding(vec![text.to_string()]))
    }
}

/// Serializable choice of embedder, stored alongside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbedderSpec {
    DeterministicHash { dim: usize, seed: u64 },
    Precomputed { path: PathBuf },
}

impl EmbedderSpec {
    pub fn build(&self) -> Result<Box<dyn TextEmbedder>> {
        Ok(match self {
            EmbedderSpec::DeterministicHash { dim, seed } => Box::new(HashEmbedder::new(*dim, *seed)),
            EmbedderSpec::Precomputed { path } => Box::new(EmbeddingTable::load(path)?),
        })
    }
}
