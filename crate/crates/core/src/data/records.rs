use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Diagnosis,
    Procedure,
    Medication,
}

impl Modality {
    /// Iteration order used when inserting a visit's codes.
    pub const ALL: [Modality; 3] = [Modality::Diagnosis, Modality::Procedure, Modality::Medication];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "diagnosis" | "diag" => Some(Modality::Diagnosis),
            "procedure" | "proc" => Some(Modality::Procedure),
            "medication" | "med" => Some(Modality::Medication),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Diagnosis => "diagnosis",
            Modality::Procedure => "procedure",
            Modality::Medication => "medication",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One patient's longitudinal record.
///
/// `visits[v][m]` holds the code recorded for modality `m` at visit `v`;
/// `modality_mask[v][m]` says whether that slot is present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    #[serde(rename = "E")]
    pub visits: Vec<[Option<String>; 3]>,
    #[serde(rename = "M_P")]
    pub modality_mask: Vec<[bool; 3]>,
    /// Gender code, age in years, and one free numeric field.
    #[serde(rename = "d")]
    pub demographics: [f64; 3],
}

impl PatientRecord {
    pub fn validate(&self, max_visits: usize) -> Result<()> {
        let n = self.visits.len();
        if n == 0 || n > max_visits {
            return Err(Error::InvalidArgument(format!(
                "patient {}: {n} visits outside 1..={max_visits}",
                self.patient_id
            )));
        }
        if self.modality_mask.len() != n {
            return Err(Error::InvalidArgument(format!(
                "patient {}: mask has {} rows for {n} visits",
                self.patient_id,
                self.modality_mask.len()
            )));
        }
        for (v, (slots, mask)) in self.visits.iter().zip(&self.modality_mask).enumerate() {
            for m in Modality::ALL {
                if mask[m.index()] && slots[m.index()].as_deref().map_or(true, str::is_empty) {
                    return Err(Error::InvalidArgument(format!(
                        "patient {}: visit {v} marks {m} present without a code",
                        self.patient_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Present codes in temporal order, modalities in [`Modality::ALL`] order.
    pub fn masked_codes(&self) -> impl Iterator<Item = (usize, Modality, &str)> + '_ {
        self.visits
            .iter()
            .zip(&self.modality_mask)
            .enumerate()
            .flat_map(|(v, (slots, mask))| {
                Modality::ALL.into_iter().filter_map(move |m| {
                    if mask[m.index()] {
                        slots[m.index()].as_deref().map(|c| (v, m, c))
                    } else {
                        None
                    }
                })
            })
    }

    pub fn has_code(&self, code: &str) -> bool {
        self.masked_codes().any(|(_, _, c)| c == code)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriterionKind {
    Inclusion,
    Exclusion,
    /// A criterion from a trial the patient is not enrolled in.
    Foreign,
}

/// A tokenized eligibility criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriteriaSentence {
    pub criterion_id: String,
    pub trial_id: String,
    pub kind: CriterionKind,
    pub text: String,
    #[serde(rename = "S")]
    pub tokens: Vec<u32>,
    #[serde(rename = "m_C")]
    pub token_mask: Vec<bool>,
}

impl CriteriaSentence {
    pub fn validate(&self, max_len: usize) -> Result<()> {
        if self.tokens.len() != self.token_mask.len() {
            return Err(Error::InvalidArgument(format!(
                "criterion {}: {} tokens but {} mask entries",
                self.criterion_id,
                self.tokens.len(),
                self.token_mask.len()
            )));
        }
        if self.tokens.len() > max_len {
            return Err(Error::InvalidArgument(format!(
                "criterion {}: {} tokens exceed n_s={max_len}",
                self.criterion_id,
                self.tokens.len()
            )));
        }
        if !self.token_mask.iter().any(|&m| m) {
            return Err(Error::DegenerateInput(format!(
                "criterion {}: every token is masked",
                self.criterion_id
            )));
        }
        if self.kind == CriterionKind::Foreign {
            return Err(Error::InvalidArgument(format!(
                "criterion {}: stored criteria must be inclusion or exclusion",
                self.criterion_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchClass {
    Match = 0,
    Mismatch = 1,
    Unknown = 2,
}

impl MatchClass {
    pub const ALL: [MatchClass; 3] = [MatchClass::Match, MatchClass::Mismatch, MatchClass::Unknown];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut y = [0.0; 3];
        y[self.index()] = 1.0;
        y
    }

    /// Index of the largest probability; the lowest index wins ties.
    pub fn argmax(probs: &[f64; 3]) -> Self {
        let mut best = 0;
        for i in 1..3 {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        Self::ALL[best]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MatchClass::Match => "match",
            MatchClass::Mismatch => "mismatch",
            MatchClass::Unknown => "unknown",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: String,
    /// Stratum used for per-category evaluation.
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Enrollment {
    pub patient_id: String,
    pub trial_id: String,
}

/// A supervised (patient, criterion) example.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledPair {
    pub patient_id: String,
    pub criterion_id: String,
    /// Trial the patient is enrolled in (for foreign pairs, not the criterion's trial).
    pub trial_id: String,
    pub kind: CriterionKind,
    pub label: MatchClass,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> PatientRecord {
        PatientRecord {
            patient_id: "p".into(),
            visits: vec![
                [Some("a".into()), None, Some("m".into())],
                [None, Some("x".into()), None],
            ],
            modality_mask: vec![[true, false, true], [false, true, false]],
            demographics: [1.0, 50.0, 0.0],
        }
    }

    #[test]
    fn masked_codes_follow_visit_then_modality_order() {
        let r = record();
        let codes: Vec<_> = r.masked_codes().map(|(v, m, c)| (v, m, c.to_string())).collect();
        assert_eq!(
            codes,
            vec![
                (0, Modality::Diagnosis, "a".to_string()),
                (0, Modality::Medication, "m".to_string()),
                (1, Modality::Procedure, "x".to_string()),
            ]
        );
    }

    #[test]
    fn validation_rules() {
        let mut r = record();
        assert!(r.validate(4).is_ok());
        assert!(r.validate(1).is_err());
        r.modality_mask[1][0] = true;
        assert!(r.validate(4).is_err());
    }

    #[test]
    fn json_uses_notation_field_names() {
        let json = serde_json::to_value(record()).unwrap();
        assert!(json.get("E").is_some());
        assert!(json.get("M_P").is_some());
        assert!(json.get("d").is_some());
    }

    #[test]
    fn one_hot_and_argmax() {
        assert_eq!(MatchClass::Unknown.one_hot(), [0.0, 0.0, 1.0]);
        assert_eq!(MatchClass::argmax(&[0.2, 0.5, 0.3]), MatchClass::Mismatch);
        assert_eq!(MatchClass::argmax(&[0.4, 0.4, 0.2]), MatchClass::Match);
    }
}
