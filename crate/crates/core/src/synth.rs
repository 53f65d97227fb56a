//! Synthetic ontologies and cohorts with planted ground truth.
//!
//! Every trial plants inclusion targets that all of its patients carry and
//! exclusion targets that none of them carry. Labeled pairs are drawn before
//! the records are filled in, and each patient also carries the target of
//! every foreign exclusion criterion paired with it, so a criterion's label
//! follows from whether its target code is in the patient record.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    make_label_pairs, read_jsonl, write_jsonl, Corpus, CriteriaSentence, CriterionKind, Enrollment,
    MatchClass, Modality, PatientRecord, Trial, Vocabulary, ONTOLOGY_FILE,
};
use crate::error::{Error, Result};
use crate::ontology::{Ontology, OntologyEntry, LEVELS};

pub const TRUTH_FILE: &str = "truth.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Children per node at each ontology level.
    pub branching: [usize; LEVELS],
    pub n_patients: usize,
    pub n_trials: usize,
    /// Inclusive range of inclusion criteria per trial.
    pub inclusion_per_trial: (usize, usize),
    /// Inclusive range of exclusion criteria per trial.
    pub exclusion_per_trial: (usize, usize),
    /// Extra visits beyond those needed to hold the planted codes.
    pub extra_visits: (usize, usize),
    /// Probability that an empty visit slot receives a noise code.
    pub noise_rate: f64,
    /// Criterion token length after padding.
    pub n_s: usize,
    pub inclusion_templates: Vec<String>,
    pub exclusion_templates: Vec<String>,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            branching: [6, 3, 3, 3],
            n_patients: 300,
            n_trials: 30,
            inclusion_per_trial: (2, 3),
            exclusion_per_trial: (1, 1),
            extra_visits: (0, 2),
            noise_rate: 0.3,
            n_s: 16,
            inclusion_templates: vec![
                "history of {} required".into(),
                "diagnosed with {}".into(),
                "must have {}".into(),
            ],
            exclusion_templates: vec![
                "no history of {}".into(),
                "excluded if {}".into(),
                "must not have {}".into(),
            ],
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branching.iter().any(|&b| b < 2) {
            return Err(Error::InvalidArgument(format!(
                "branching {:?}: every level needs at least 2 children",
                self.branching
            )));
        }
        for (name, (lo, hi)) in [
            ("inclusion_per_trial", self.inclusion_per_trial),
            ("exclusion_per_trial", self.exclusion_per_trial),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::InvalidArgument(format!("{name}=({lo}, {hi}) must satisfy 1 <= lo <= hi")));
            }
        }
        if self.extra_visits.0 > self.extra_visits.1 {
            return Err(Error::InvalidArgument("extra_visits must satisfy lo <= hi".into()));
        }
        if self.n_trials == 0 || self.n_patients < self.n_trials {
            return Err(Error::InvalidArgument(format!(
                "need at least one patient per trial ({} patients, {} trials)",
                self.n_patients, self.n_trials
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::InvalidArgument("noise_rate must lie in [0, 1]".into()));
        }
        if self.inclusion_templates.is_empty() || self.exclusion_templates.is_empty() {
            return Err(Error::InvalidArgument("template lists must be non-empty".into()));
        }
        for t in self.inclusion_templates.iter().chain(&self.exclusion_templates) {
            if t.matches("{}").count() != 1 {
                return Err(Error::InvalidArgument(format!("template {t:?} needs exactly one {{}}")));
            }
        }
        Ok(())
    }
}

/// Criterion to planted target code, used only for checking.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub criterion_id: String,
    pub target_code: String,
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn pseudo_word(rng: &mut impl Rng, used: &mut HashSet<String>) -> String {
    loop {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).expect("non-empty"));
            w.push_str(VOWELS.choose(rng).expect("non-empty"));
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

/// Balanced four-level ontology. Each node adds one pseudo-word to its
/// parent's description; modality follows the top-level category.
pub fn gen_ontology(config: &GenConfig) -> Result<Ontology> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut used = HashSet::new();
    let [b1, b2, b3, b4] = config.branching;
    let mut entries = Vec::with_capacity(b1 * b2 * b3 * b4);
    for i in 0..b1 {
        let d1 = pseudo_word(&mut rng, &mut used);
        let modality = Modality::ALL[i % 3];
        for j in 0..b2 {
            let d2 = format!("{d1} {}", pseudo_word(&mut rng, &mut used));
            for k in 0..b3 {
                let d3 = format!("{d2} {}", pseudo_word(&mut rng, &mut used));
                for l in 0..b4 {
                    let d4 = format!("{d3} {}", pseudo_word(&mut rng, &mut used));
                    entries.push(OntologyEntry {
                        code_id: format!("S{i}.{j}{k}{l}"),
                        modality,
                        descriptions: [d1.clone(), d2.clone(), d3.clone(), d4],
                    });
                }
            }
        }
    }
    Ontology::from_entries(entries)
}

/// Generated corpus plus the ontology and planted targets.
#[derive(Clone, Debug)]
pub struct Generated {
    pub ontology: Ontology,
    pub corpus: Corpus,
    pub truth: Vec<TruthRecord>,
}

impl Generated {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.corpus.save(dir)?;
        self.ontology.save(&dir.join(ONTOLOGY_FILE))?;
        write_jsonl(&dir.join(TRUTH_FILE), &self.truth)
    }
}

pub fn load_truth(dir: &Path) -> Result<Vec<TruthRecord>> {
    read_jsonl(&dir.join(TRUTH_FILE))
}

struct PlannedTrial {
    category: usize,
    inclusion: Vec<usize>,
    exclusion: Vec<usize>,
}

/// Patients, trials, criteria, enrollments and labeled pairs over `ontology`.
pub fn gen_cohort(ontology: &Ontology, config: &GenConfig) -> Result<Generated> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c0de);
    let entries: Vec<&OntologyEntry> = ontology.entries().collect();
    let mut categories: Vec<&str> = Vec::new();
    for e in &entries {
        if !categories.contains(&e.descriptions[0].as_str()) {
            categories.push(&e.descriptions[0]);
        }
    }
    let category_of = |i: usize| {
        categories
            .iter()
            .position(|c| *c == entries[i].descriptions[0])
            .expect("known category")
    };

    // free leaves per category, shuffled
    let mut free: Vec<Vec<usize>> = vec![Vec::new(); categories.len()];
    for i in 0..entries.len() {
        free[category_of(i)].push(i);
    }
    for pool in &mut free {
        pool.shuffle(&mut rng);
    }

    let mut trials = Vec::with_capacity(config.n_trials);
    for t in 0..config.n_trials {
        let category = t % categories.len();
        let n_ic = rng.gen_range(config.inclusion_per_trial.0..=config.inclusion_per_trial.1);
        if free[category].len() < n_ic {
            return Err(Error::Generation(format!(
                "category {:?} has too few codes for the inclusion targets of trial {t}",
                categories[category]
            )));
        }
        let keep = free[category].len() - n_ic;
        let inclusion = free[category].split_off(keep);
        trials.push(PlannedTrial {
            category,
            inclusion,
            exclusion: Vec::new(),
        });
    }
    for t in 0..config.n_trials {
        let n_ec = rng.gen_range(config.exclusion_per_trial.0..=config.exclusion_per_trial.1);
        for _ in 0..n_ec {
            // draw from the fullest category so pools drain evenly
            let c = (0..free.len())
                .max_by_key(|&c| (free[c].len(), std::cmp::Reverse(c)))
                .expect("at least one category");
            let code = free[c].pop().ok_or_else(|| {
                Error::Generation(format!("no codes left for the exclusion targets of trial {t}"))
            })?;
            trials[t].exclusion.push(code);
        }
    }
    let mut noise_by_modality: [Vec<usize>; 3] = Default::default();
    for c in free.into_iter().flatten() {
        noise_by_modality[entries[c].modality.index()].push(c);
    }
    for pool in &mut noise_by_modality {
        pool.sort_unstable();
    }

    let code = |i: usize| entries[i].code_id.clone();
    let trial_id = |t: usize| format!("T{t:03}");

    let mut criteria_texts = Vec::new();
    let mut truth = Vec::new();
    for (t, plan) in trials.iter().enumerate() {
        for (kind, targets, templates) in [
            (CriterionKind::Inclusion, &plan.inclusion, &config.inclusion_templates),
            (CriterionKind::Exclusion, &plan.exclusion, &config.exclusion_templates),
        ] {
            for (n, &target) in targets.iter().enumerate() {
                let template = templates.choose(&mut rng).expect("validated non-empty");
                let text = template.replacen("{}", &entries[target].descriptions[LEVELS - 1], 1);
                let tag = if kind == CriterionKind::Inclusion { "IC" } else { "EC" };
                let id = format!("{}-{tag}{n}", trial_id(t));
                truth.push(TruthRecord {
                    criterion_id: id.clone(),
                    target_code: code(target),
                });
                criteria_texts.push((id, t, kind, text));
            }
        }
    }
    let vocab = Vocabulary::build(criteria_texts.iter().map(|c| c.3.as_str()));
    let criteria: Vec<CriteriaSentence> = criteria_texts
        .into_iter()
        .map(|(criterion_id, t, kind, text)| {
            let (tokens, token_mask) = vocab.encode(&text, config.n_s);
            CriteriaSentence {
                criterion_id,
                trial_id: trial_id(t),
                kind,
                text,
                tokens,
                token_mask,
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..config.n_patients).map(|p| p % config.n_trials).collect();
    order.shuffle(&mut rng);
    let patient_id = |p: usize| format!("P{p:04}");
    let enrollments: Vec<Enrollment> = order
        .iter()
        .enumerate()
        .map(|(p, &t)| Enrollment {
            patient_id: patient_id(p),
            trial_id: trial_id(t),
        })
        .collect();
    let pairs = make_label_pairs(&enrollments, &criteria, config.seed).pairs;
    let target_of: HashMap<&str, usize> = truth
        .iter()
        .map(|r| {
            let idx = entries
                .iter()
                .position(|e| e.code_id == r.target_code)
                .expect("target from ontology");
            (r.criterion_id.as_str(), idx)
        })
        .collect();
    let exclusion: HashSet<&str> = criteria
        .iter()
        .filter(|c| c.kind == CriterionKind::Exclusion)
        .map(|c| c.criterion_id.as_str())
        .collect();
    // exclusion criteria sampled as foreign pairs must have their target present
    let mut foreign_targets: HashMap<&str, Vec<usize>> = HashMap::new();
    for pair in &pairs {
        if pair.kind == CriterionKind::Foreign && exclusion.contains(pair.criterion_id.as_str()) {
            foreign_targets
                .entry(pair.patient_id.as_str())
                .or_default()
                .push(target_of[pair.criterion_id.as_str()]);
        }
    }

    let mut patients = Vec::with_capacity(config.n_patients);
    for (p, &t) in order.iter().enumerate() {
        let plan = &trials[t];
        let pid = patient_id(p);
        let mut required: Vec<usize> = plan.inclusion.clone();
        required.extend(foreign_targets.get(pid.as_str()).into_iter().flatten());
        let mut by_modality: [Vec<usize>; 3] = Default::default();
        for &c in &required {
            by_modality[entries[c].modality.index()].push(c);
        }
        for list in &mut by_modality {
            list.shuffle(&mut rng);
        }
        let needed = by_modality.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let n_visits = needed + rng.gen_range(config.extra_visits.0..=config.extra_visits.1);
        let mut visits = Vec::with_capacity(n_visits);
        let mut mask = Vec::with_capacity(n_visits);
        let mut slots: [Vec<Option<usize>>; 3] = Default::default();
        for (m, list) in by_modality.iter().enumerate() {
            let mut column: Vec<Option<usize>> = list.iter().map(|&c| Some(c)).collect();
            column.resize(n_visits, None);
            column.shuffle(&mut rng);
            slots[m] = column;
        }
        for v in 0..n_visits {
            let mut visit: [Option<String>; 3] = Default::default();
            let mut present = [false; 3];
            for m in 0..3 {
                let chosen = match slots[m][v] {
                    Some(c) => Some(c),
                    None if rng.gen_bool(config.noise_rate) => noise_by_modality[m].choose(&mut rng).copied(),
                    None => None,
                };
                if let Some(c) = chosen {
                    visit[m] = Some(code(c));
                    present[m] = true;
                }
            }
            visits.push(visit);
            mask.push(present);
        }
        patients.push(PatientRecord {
            patient_id: pid,
            visits,
            modality_mask: mask,
            demographics: [
                rng.gen_range(0..2) as f64,
                rng.gen_range(18.0..90.0f64).round(),
                rng.gen_range(0..5) as f64,
            ],
        });
    }
    let trial_records = trials
        .iter()
        .enumerate()
        .map(|(t, plan)| Trial {
            trial_id: trial_id(t),
            category: categories[plan.category].to_string(),
        })
        .collect();

    Ok(Generated {
        ontology: ontology.clone(),
        corpus: Corpus {
            patients,
            trials: trial_records,
            criteria,
            enrollments,
            pairs,
            vocab,
        },
        truth,
    })
}

/// Ontology and cohort from one config.
pub fn generate(config: &GenConfig) -> Result<Generated> {
    let ontology = gen_ontology(config)?;
    gen_cohort(&ontology, config)
}

/// Label implied by target membership: inclusion targets present give
/// `match`, exclusion targets absent give `mismatch`, anything else `unknown`.
pub fn membership_oracle(patient: &PatientRecord, kind: CriterionKind, target_code: &str) -> MatchClass {
    let present = patient.has_code(target_code);
    match (kind, present) {
        (CriterionKind::Inclusion, true) => MatchClass::Match,
        (CriterionKind::Exclusion, false) => MatchClass::Mismatch,
        _ => MatchClass::Unknown,
    }
}
