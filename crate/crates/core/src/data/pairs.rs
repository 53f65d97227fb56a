use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::records::{CriteriaSentence, CriterionKind, Enrollment, LabeledPair, MatchClass};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pairing {
    pub pairs: Vec<LabeledPair>,
    /// Enrollments skipped (trial without criteria) plus enrollments for
    /// which no foreign trial could be sampled.
    pub warnings: usize,
}

#[derive(Default)]
struct TrialCriteria<'a> {
    all: Vec<&'a CriteriaSentence>,
    inclusion: Vec<&'a CriteriaSentence>,
    exclusion: Vec<&'a CriteriaSentence>,
}

/// Labels every enrolled (patient, trial) combination.
///
/// Inclusion criteria of the enrolled trial become `match`, exclusion
/// criteria `mismatch`. One inclusion and one exclusion criterion from a
/// uniformly chosen trial the patient is not enrolled in are added as
/// `unknown` pairs of kind [`CriterionKind::Foreign`].
pub fn make_label_pairs(
    enrollments: &[Enrollment],
    criteria: &[CriteriaSentence],
    seed: u64,
) -> Pairing {
    let mut by_trial: IndexMap<&str, TrialCriteria> = IndexMap::new();
    for c in criteria {
        let entry = by_trial.entry(c.trial_id.as_str()).or_default();
        entry.all.push(c);
        match c.kind {
            CriterionKind::Inclusion => entry.inclusion.push(c),
            CriterionKind::Exclusion => entry.exclusion.push(c),
            CriterionKind::Foreign => {}
        }
    }
    let mut enrolled: HashMap<&str, HashSet<&str>> = HashMap::new();
    for e in enrollments {
        enrolled
            .entry(e.patient_id.as_str())
            .or_default()
            .insert(e.trial_id.as_str());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Pairing::default();
    for e in enrollments {
        let Some(own) = by_trial.get(e.trial_id.as_str()).filter(|t| !t.all.is_empty()) else {
            log::warn!("trial {} has no criteria; enrollment of {} skipped", e.trial_id, e.patient_id);
            out.warnings += 1;
            continue;
        };
        for c in &own.all {
            let (kind, label) = match c.kind {
                CriterionKind::Inclusion => (CriterionKind::Inclusion, MatchClass::Match),
                CriterionKind::Exclusion => (CriterionKind::Exclusion, MatchClass::Mismatch),
                CriterionKind::Foreign => continue,
            };
            out.pairs.push(LabeledPair {
                patient_id: e.patient_id.clone(),
                criterion_id: c.criterion_id.clone(),
                trial_id: e.trial_id.clone(),
                kind,
                label,
            });
        }

        let mine = &enrolled[e.patient_id.as_str()];
        let candidates: Vec<&TrialCriteria> = by_trial
            .iter()
            .filter(|(id, t)| {
                !mine.contains(*id) && !t.inclusion.is_empty() && !t.exclusion.is_empty()
            })
            .map(|(_, t)| t)
            .collect();
        if candidates.is_empty() {
            log::warn!("no foreign trial available for patient {}", e.patient_id);
            out.warnings += 1;
            continue;
        }
        let other = candidates[rng.gen_range(0..candidates.len())];
        let inc = other.inclusion[rng.gen_range(0..other.inclusion.len())];
        let exc = other.exclusion[rng.gen_range(0..other.exclusion.len())];
        for c in [inc, exc] {
            out.pairs.push(LabeledPair {
                patient_id: e.patient_id.clone(),
                criterion_id: c.criterion_id.clone(),
                trial_id: e.trial_id.clone(),
                kind: CriterionKind::Foreign,
                label: MatchClass::Unknown,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn crit(id: &str, trial: &str, kind: CriterionKind) -> CriteriaSentence {
        CriteriaSentence {
            criterion_id: id.into(),
            trial_id: trial.into(),
            kind,
            text: id.into(),
            tokens: vec![2],
            token_mask: vec![true],
        }
    }

    fn enroll(p: &str, t: &str) -> Enrollment {
        Enrollment {
            patient_id: p.into(),
            trial_id: t.into(),
        }
    }

    fn corpus() -> Vec<CriteriaSentence> {
        use CriterionKind::*;
        vec![
            crit("t1-i1", "t1", Inclusion),
            crit("t1-i2", "t1", Inclusion),
            crit("t1-i3", "t1", Inclusion),
            crit("t1-e1", "t1", Exclusion),
            crit("t1-e2", "t1", Exclusion),
            crit("t2-i1", "t2", Inclusion),
            crit("t2-e1", "t2", Exclusion),
            crit("t3-i1", "t3", Inclusion),
            crit("t3-e1", "t3", Exclusion),
        ]
    }

    #[test]
    fn three_inclusion_two_exclusion_gives_seven_pairs() {
        let out = make_label_pairs(&[enroll("p", "t1")], &corpus(), 3);
        assert_eq!(out.pairs.len(), 7);
        assert_eq!(out.warnings, 0);
        let labels: Vec<MatchClass> = out.pairs.iter().map(|p| p.label).collect();
        assert_eq!(
            labels.iter().filter(|&&l| l == MatchClass::Match).count(),
            3
        );
        assert_eq!(
            labels.iter().filter(|&&l| l == MatchClass::Mismatch).count(),
            2
        );
        assert_eq!(
            labels.iter().filter(|&&l| l == MatchClass::Unknown).count(),
            2
        );
    }

    #[test]
    fn single_trial_corpus_has_no_unknowns() {
        let c: Vec<_> = corpus().into_iter().filter(|c| c.trial_id == "t1").collect();
        let out = make_label_pairs(&[enroll("p", "t1")], &c, 0);
        assert_eq!(out.pairs.len(), 5);
        assert_eq!(out.warnings, 1);
    }

    #[test]
    fn trial_without_criteria_is_skipped() {
        let out = make_label_pairs(&[enroll("p", "t9")], &corpus(), 0);
        assert!(out.pairs.is_empty());
        assert_eq!(out.warnings, 1);
    }

    #[test]
    fn foreign_criteria_come_from_other_trials_and_are_seeded() {
        let c = corpus();
        let enrollments = vec![enroll("p", "t1"), enroll("q", "t2"), enroll("r", "t3")];
        let a = make_label_pairs(&enrollments, &c, 11);
        let b = make_label_pairs(&enrollments, &c, 11);
        assert_eq!(a, b);
        let trial_of: HashMap<_, _> = c
            .iter()
            .map(|c| (c.criterion_id.clone(), c.trial_id.clone()))
            .collect();
        for p in a.pairs.iter().filter(|p| p.kind == CriterionKind::Foreign) {
            assert_ne!(trial_of[&p.criterion_id], p.trial_id);
        }
        // |pairs| = Σ(IC+EC) + 2·enrollments
        assert_eq!(a.pairs.len(), 5 + 2 + 2 + 3 * 2);
    }
}
