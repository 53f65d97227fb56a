//! Patients, criteria, labels and global dimensions.

mod config;
mod corpus;
mod pairs;
mod records;
mod vocab;

pub use config::ModelConfig;
pub use corpus::{
    read_jsonl, write_jsonl, Corpus, CRITERIA_FILE, ENROLLMENTS_FILE, ONTOLOGY_FILE, PAIRS_FILE,
    PATIENTS_FILE, TRIALS_FILE, VOCAB_FILE,
};
pub use pairs::{make_label_pairs, Pairing};
pub use records::{
    CriteriaSentence, CriterionKind, Enrollment, LabeledPair, MatchClass, Modality, PatientRecord,
    Trial,
};
pub use vocab::{tokenize, Vocabulary, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};
