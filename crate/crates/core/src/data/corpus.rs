//! On-disk corpus: a directory of JSON-lines files plus the vocabulary and
//! ontology.
//!
//! ```text
//! ontology.txt       code_id, modality, d1|d2|d3|d4
//! patients.jsonl     {"patient_id", "E", "M_P", "d"}
//! trials.jsonl       {"trial_id", "category"}
//! criteria.jsonl     {"criterion_id", "trial_id", "kind", "text", "S", "m_C"}
//! enrollments.jsonl  {"patient_id", "trial_id"}
//! pairs.jsonl        {"patient_id", "criterion_id", "trial_id", "kind", "label"}
//! vocab.txt          one token per line, line number = token id
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::pairs::make_label_pairs;
use super::records::{CriteriaSentence, Enrollment, LabeledPair, PatientRecord, Trial};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const ONTOLOGY_FILE: &str = "ontology.txt";
pub const PATIENTS_FILE: &str = "patients.jsonl";
pub const TRIALS_FILE: &str = "trials.jsonl";
pub const CRITERIA_FILE: &str = "criteria.jsonl";
pub const ENROLLMENTS_FILE: &str = "enrollments.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::format(path.display().to_string(), format!("line {}: {e}", i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Patients, trials, criteria and labeled pairs loaded from a corpus directory.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub patients: Vec<PatientRecord>,
    pub trials: Vec<Trial>,
    pub criteria: Vec<CriteriaSentence>,
    pub enrollments: Vec<Enrollment>,
    pub pairs: Vec<LabeledPair>,
    pub vocab: Vocabulary,
}

impl Corpus {
    /// Loads a corpus directory. When `pairs.jsonl` is absent the pairs are
    /// derived from the enrollments with `pair_seed`.
    pub fn load(dir: &Path, pair_seed: u64) -> Result<Self> {
        let patients = read_jsonl(&dir.join(PATIENTS_FILE))?;
        let trials = read_jsonl(&dir.join(TRIALS_FILE))?;
        let criteria: Vec<CriteriaSentence> = read_jsonl(&dir.join(CRITERIA_FILE))?;
        let enrollments: Vec<Enrollment> = read_jsonl(&dir.join(ENROLLMENTS_FILE))?;
        let pairs_path = dir.join(PAIRS_FILE);
        let pairs = if pairs_path.exists() {
            read_jsonl(&pairs_path)?
        } else {
            make_label_pairs(&enrollments, &criteria, pair_seed).pairs
        };
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let corpus = Self {
            patients,
            trials,
            criteria,
            enrollments,
            pairs,
            vocab,
        };
        corpus.check_references()?;
        Ok(corpus)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join(PATIENTS_FILE), &self.patients)?;
        write_jsonl(&dir.join(TRIALS_FILE), &self.trials)?;
        write_jsonl(&dir.join(CRITERIA_FILE), &self.criteria)?;
        write_jsonl(&dir.join(ENROLLMENTS_FILE), &self.enrollments)?;
        write_jsonl(&dir.join(PAIRS_FILE), &self.pairs)?;
        self.vocab.save(&dir.join(VOCAB_FILE))
    }

    fn check_references(&self) -> Result<()> {
        let patients: HashMap<&str, ()> = self
            .patients
            .iter()
            .map(|p| (p.patient_id.as_str(), ()))
            .collect();
        let criteria: HashMap<&str, ()> = self
            .criteria
            .iter()
            .map(|c| (c.criterion_id.as_str(), ()))
            .collect();
        for p in &self.pairs {
            if !patients.contains_key(p.patient_id.as_str()) {
                return Err(Error::Lookup(format!("pair references unknown patient {}", p.patient_id)));
            }
            if !criteria.contains_key(p.criterion_id.as_str()) {
                return Err(Error::Lookup(format!(
                    "pair references unknown criterion {}",
                    p.criterion_id
                )));
            }
        }
        Ok(())
    }

    pub fn patient_index(&self) -> HashMap<&str, &PatientRecord> {
        self.patients.iter().map(|p| (p.patient_id.as_str(), p)).collect()
    }

    pub fn criterion_index(&self) -> HashMap<&str, &CriteriaSentence> {
        self.criteria.iter().map(|c| (c.criterion_id.as_str(), c)).collect()
    }

    pub fn patient(&self, id: &str) -> Result<&PatientRecord> {
        self.patients
            .iter()
            .find(|p| p.patient_id == id)
            .ok_or_else(|| Error::Lookup(format!("unknown patient {id}")))
    }

    pub fn criterion(&self, id: &str) -> Result<&CriteriaSentence> {
        self.criteria
            .iter()
            .find(|c| c.criterion_id == id)
            .ok_or_else(|| Error::Lookup(format!("unknown criterion {id}")))
    }
}
