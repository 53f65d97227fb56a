use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use super::embedder::TextEmbedder;
use super::hierarchy::{Ontology, LEVELS};
use crate::data::Modality;
use crate::error::{Error, Result};

/// A code's four (description, embedding) pairs, broadest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeInfo {
    pub code_id: String,
    pub modality: Modality,
    pub pairs: [(String, Arc<Vec<f64>>); LEVELS],
}

impl CodeInfo {
    pub fn description(&self, level: usize) -> &str {
        &self.pairs[level].0
    }

    pub fn embedding(&self, level: usize) -> &[f64] {
        &self.pairs[level].1
    }
}

/// Ontology plus embedder, with memoized per-code and per-text lookups.
///
/// Lookups take a read lock; a miss computes the value and inserts it under
/// the write lock, so concurrent readers are safe.
pub struct CodeBook {
    ontology: Arc<Ontology>,
    embedder: Arc<dyn TextEmbedder>,
    codes: RwLock<HashMap<String, Arc<CodeInfo>>>,
    texts: RwLock<HashMap<String, Arc<Vec<f64>>>>,
}

impl CodeBook {
    pub fn new(ontology: Arc<Ontology>, embedder: Arc<dyn TextEmbedder>) -> Self {
        Self {
            ontology,
            embedder,
            codes: RwLock::default(),
            texts: RwLock::default(),
        }
    }

    pub fn ontology(&self) -> &Ontology {
        &self.ontology
    }

    pub fn embedder(&self) -> &dyn TextEmbedder {
        self.embedder.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    pub fn embed_text(&self, text: &str) -> Result<Arc<Vec<f64>>> {
        if let Some(v) = self.texts.read().unwrap().get(text) {
            return Ok(Arc::clone(v));
        }
        let v = Arc::new(self.embedder.embed(text)?);
        let mut cache = self.texts.write().unwrap();
        Ok(Arc::clone(cache.entry(text.to_string()).or_insert(v)))
    }

    pub fn code_info(&self, code: &str) -> Result<Arc<CodeInfo>> {
        if let Some(info) = self.codes.read().unwrap().get(code) {
            return Ok(Arc::clone(info));
        }
        let entry = self
            .ontology
            .get(code)
            .ok_or_else(|| Error::Lookup(format!("code {code} is not in the ontology")))?;

        let mut missing = Vec::new();
        let mut vectors = Vec::with_capacity(LEVELS);
        for d in &entry.descriptions {
            match self.embed_text(d) {
                Ok(v) => vectors.push(v),
                Err(Error::MissingEmbedding(m)) => missing.extend(m),
                Err(e) => return Err(e),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingEmbedding(missing));
        }
        let pairs: [(String, Arc<Vec<f64>>); LEVELS] = std::array::from_fn(|l| {
            (entry.descriptions[l].clone(), Arc::clone(&vectors[l]))
        });
        let info = Arc::new(CodeInfo {
            code_id: entry.code_id.clone(),
            modality: entry.modality,
            pairs,
        });
        let mut cache = self.codes.write().unwrap();
        Ok(Arc::clone(cache.entry(code.to_string()).or_insert(info)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{EmbeddingTable, HashEmbedder};

    fn ontology() -> Arc<Ontology> {
        Arc::new(
            Ontology::parse(
                "A1, diagnosis, eye|glaucoma|secondary glaucoma|glaucoma right eye\n\
                 A2, diagnosis, eye|glaucoma|secondary glaucoma|glaucoma left eye\n",
                "t",
            )
            .unwrap(),
        )
    }

    #[test]
    fn memoized_and_identical() {
        let book = CodeBook::new(ontology(), Arc::new(HashEmbedder::new(8, 1)));
        let a = book.code_info("A1").unwrap();
        let b = book.code_info("A1").unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(*a, *b);
    }

    #[test]
    fn siblings_differ_only_at_the_leaf() {
        let book = CodeBook::new(ontology(), Arc::new(HashEmbedder::new(8, 1)));
        let a = book.code_info("A1").unwrap();
        let b = book.code_info("A2").unwrap();
        for l in 0..3 {
            assert_eq!(a.pairs[l], b.pairs[l]);
        }
        assert_ne!(a.pairs[3], b.pairs[3]);
    }

    #[test]
    fn unknown_code_and_missing_rows() {
        let mut table = EmbeddingTable::new(2);
        table.insert("eye", vec![1.0, 0.0]).unwrap();
        table.insert("glaucoma", vec![0.0, 1.0]).unwrap();
        let book = CodeBook::new(ontology(), Arc::new(table));
        assert!(matches!(book.code_info("ZZ"), Err(Error::Lookup(_))));
        match book.code_info("A1") {
            Err(Error::MissingEmbedding(m)) => {
                assert_eq!(m, vec!["secondary glaucoma", "glaucoma right eye"])
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn concurrent_readers_agree() {
        let book = Arc::new(CodeBook::new(ontology(), Arc::new(HashEmbedder::new(8, 1))));
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let book = Arc::clone(&book);
                std::thread::spawn(move || book.code_info("A2").unwrap())
            })
            .collect();
        let infos: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert!(infos.windows(2).all(|w| w[0] == w[1]));
    }
}
