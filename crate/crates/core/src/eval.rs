//! Criteria-level and trial-level metrics with bootstrap intervals.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CriterionKind, LabeledPair, MatchClass, Trial};
use crate::error::{Error, Result};

/// Point estimate on the full set with a percentile interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Accuracy and macro-F1. The F1 average runs over classes that occur in
/// either the labels or the predictions.
pub fn criteria_metrics(predictions: &[MatchClass], labels: &[MatchClass]) -> Result<(f64, f64)> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("criteria metrics need at least one pair".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let pairs: Vec<(MatchClass, MatchClass)> = predictions.iter().copied().zip(labels.iter().copied()).collect();
    Ok((accuracy_of(&pairs), macro_f1_of(&pairs)))
}

fn accuracy_of<P: std::borrow::Borrow<(MatchClass, MatchClass)>>(pairs: &[P]) -> f64 {
    let correct = pairs.iter().filter(|p| p.borrow().0 == p.borrow().1).count();
    correct as f64 / pairs.len() as f64
}

fn macro_f1_of<P: std::borrow::Borrow<(MatchClass, MatchClass)>>(pairs: &[P]) -> f64 {
    let mut tp = [0usize; 3];
    let mut fp = [0usize; 3];
    let mut fne = [0usize; 3];
    for p in pairs {
        let (pred, label) = *p.borrow();
        if pred == label {
            tp[label.index()] += 1;
        } else {
            fp[pred.index()] += 1;
            fne[label.index()] += 1;
        }
    }
    let present: Vec<usize> = (0..3).filter(|&c| tp[c] + fp[c] + fne[c] > 0).collect();
    let total: f64 = present
        .iter()
        .map(|&c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fne[c]) as f64)
        .sum();
    total / present.len() as f64
}

/// Predicted classes of the inclusion and exclusion pairs of one
/// (patient, trial) enrollment.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialGroup {
    pub patient_id: String,
    pub trial_id: String,
    pub predictions: Vec<(CriterionKind, MatchClass)>,
}

impl TrialGroup {
    /// Every inclusion predicted `match` and every exclusion `mismatch`.
    pub fn is_correct(&self) -> bool {
        self.predictions.iter().all(|&(kind, pred)| match kind {
            CriterionKind::Inclusion => pred == MatchClass::Match,
            CriterionKind::Exclusion => pred == MatchClass::Mismatch,
            CriterionKind::Foreign => true,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialGroups {
    pub groups: Vec<TrialGroup>,
    /// Groups dropped for having no inclusion or exclusion pair.
    pub warnings: usize,
}

/// Groups pairs by (patient, trial), leaving out foreign pairs. Groups are
/// ordered by patient then trial.
pub fn group_by_trial(pairs: &[LabeledPair], predictions: &[MatchClass]) -> Result<TrialGroups> {
    if pairs.len() != predictions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} pairs",
            predictions.len(),
            pairs.len()
        )));
    }
    let mut by_key: BTreeMap<(&str, &str), Vec<(CriterionKind, MatchClass)>> = BTreeMap::new();
    for (pair, &pred) in pairs.iter().zip(predictions) {
        let entry = by_key.entry((pair.patient_id.as_str(), pair.trial_id.as_str())).or_default();
        if pair.kind != CriterionKind::Foreign {
            entry.push((pair.kind, pred));
        }
    }
    let mut out = TrialGroups::default();
    for ((patient, trial), predictions) in by_key {
        if predictions.is_empty() {
            log::warn!("patient {patient} in trial {trial} has no inclusion or exclusion pairs");
            out.warnings += 1;
            continue;
        }
        out.groups.push(TrialGroup {
            patient_id: patient.to_string(),
            trial_id: trial.to_string(),
            predictions,
        });
    }
    Ok(out)
}

pub fn trial_accuracy(groups: &[TrialGroup]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("trial accuracy needs at least one group".into()));
    }
    Ok(groups.iter().filter(|g| g.is_correct()).count() as f64 / groups.len() as f64)
}

/// Percentile bootstrap. Resample `i` draws from its own ChaCha stream of
/// `seed`, so the result does not depend on how resamples are scheduled.
/// The interval is widened to contain the full-set estimate if needed.
pub fn bootstrap_ci<T, F>(metric: F, items: &[T], resamples: usize, level: f64, seed: u64) -> Result<Metric>
where
    T: Sync,
    F: Fn(&[&T]) -> f64 + Sync,
{
    if items.is_empty() {
        return Err(Error::InvalidArgument("bootstrap needs at least one item".into()));
    }
    if resamples == 0 {
        return Err(Error::InvalidArgument("bootstrap needs at least one resample".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} outside (0, 1)")));
    }
    let full: Vec<&T> = items.iter().collect();
    let mean = metric(&full);
    let mut values: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let sample: Vec<&T> = (0..items.len()).map(|_| &items[rng.gen_range(0..items.len())]).collect();
            metric(&sample)
        })
        .collect();
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(Metric {
        mean,
        ci_low: quantile(&values, tail).min(mean),
        ci_high: quantile(&values, 1.0 - tail).max(mean),
    })
}

/// Linearly interpolated quantile of sorted values.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub category: String,
    pub pairs: usize,
    pub groups: usize,
    pub criteria_accuracy: Metric,
    pub criteria_f1: Metric,
    pub trial_accuracy: Option<Metric>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Confidence level of every interval in the report.
    pub level: f64,
    pub pairs: usize,
    pub groups: usize,
    pub group_warnings: usize,
    pub criteria_accuracy: Metric,
    pub criteria_f1: Metric,
    pub trial_accuracy: Option<Metric>,
    pub strata: Vec<StratumReport>,
}

struct Section {
    criteria_accuracy: Metric,
    criteria_f1: Metric,
    trial_accuracy: Option<Metric>,
    groups: usize,
}

fn section(outcomes: &[(MatchClass, MatchClass)], groups: &[&TrialGroup], config: &EvalConfig) -> Result<Section> {
    let criteria_accuracy = bootstrap_ci(|s: &[&(MatchClass, MatchClass)]| accuracy_of(s), outcomes, config.resamples, config.level, config.seed)?;
    let criteria_f1 = bootstrap_ci(|s: &[&(MatchClass, MatchClass)]| macro_f1_of(s), outcomes, config.resamples, config.level, config.seed)?;
    let trial_accuracy = if groups.is_empty() {
        None
    } else {
        let metric = |gs: &[&&TrialGroup]| gs.iter().filter(|g| g.is_correct()).count() as f64 / gs.len() as f64;
        Some(bootstrap_ci(metric, groups, config.resamples, config.level, config.seed)?)
    };
    Ok(Section {
        criteria_accuracy,
        criteria_f1,
        trial_accuracy,
        groups: groups.len(),
    })
}

/// Overall and per-category metrics. A pair's stratum is the category of
/// the trial its patient is enrolled in.
pub fn evaluate(
    pairs: &[LabeledPair],
    probs: &[[f64; 3]],
    trials: &[Trial],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if pairs.len() != probs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} pairs",
            probs.len(),
            pairs.len()
        )));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let category: HashMap<&str, &str> = trials.iter().map(|t| (t.trial_id.as_str(), t.category.as_str())).collect();
    let category_of = |trial: &str| -> Result<&str> {
        category
            .get(trial)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("unknown trial {trial}")))
    };
    let predictions: Vec<MatchClass> = probs.iter().map(MatchClass::argmax).collect();
    let outcomes: Vec<(MatchClass, MatchClass)> =
        predictions.iter().copied().zip(pairs.iter().map(|p| p.label)).collect();
    let grouped = group_by_trial(pairs, &predictions)?;
    let all_groups: Vec<&TrialGroup> = grouped.groups.iter().collect();
    let overall = section(&outcomes, &all_groups, config)?;

    let mut by_category: BTreeMap<&str, (Vec<(MatchClass, MatchClass)>, Vec<&TrialGroup>)> = BTreeMap::new();
    for (pair, outcome) in pairs.iter().zip(&outcomes) {
        by_category.entry(category_of(&pair.trial_id)?).or_default().0.push(*outcome);
    }
    for group in &grouped.groups {
        by_category.entry(category_of(&group.trial_id)?).or_default().1.push(group);
    }
    let mut strata = Vec::with_capacity(by_category.len());
    for (name, (outcomes, groups)) in by_category {
        let s = section(&outcomes, &groups, config)?;
        strata.push(StratumReport {
            category: name.to_string(),
            pairs: outcomes.len(),
            groups: s.groups,
            criteria_accuracy: s.criteria_accuracy,
            criteria_f1: s.criteria_f1,
            trial_accuracy: s.trial_accuracy,
        });
    }
    Ok(EvalReport {
        level: config.level,
        pairs: pairs.len(),
        groups: overall.groups,
        group_warnings: grouped.warnings,
        criteria_accuracy: overall.criteria_accuracy,
        criteria_f1: overall.criteria_f1,
        trial_accuracy: overall.trial_accuracy,
        strata,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table: overall metrics, then one row per stratum.
    pub fn to_text(&self) -> String {
        let cell = |m: &Metric| format!("{:.4} [{:.4}, {:.4}]", m.mean, m.ci_low, m.ci_high);
        let opt = |m: &Option<Metric>| m.as_ref().map_or_else(|| "-".to_string(), cell);
        let mut out = String::new();
        let header = format!("mean [{}% CI]", (self.level * 1e6).round() / 1e4);
        let _ = writeln!(out, "{:<10} {:<10} {}", "level", "metric", header);
        let _ = writeln!(out, "{:<10} {:<10} {}", "criteria", "accuracy", cell(&self.criteria_accuracy));
        let _ = writeln!(out, "{:<10} {:<10} {}", "criteria", "macro-f1", cell(&self.criteria_f1));
        let _ = writeln!(out, "{:<10} {:<10} {}", "trial", "accuracy", opt(&self.trial_accuracy));
        let _ = writeln!(out, "pairs {}  groups {}  skipped groups {}", self.pairs, self.groups, self.group_warnings);
        if !self.strata.is_empty() {
            let width = self.strata.iter().map(|s| s.category.len()).max().unwrap_or(0).max(8);
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "{:<width$} {:>6} {:>6}  {:<25} {:<25} {}",
                "category", "pairs", "groups", "criteria accuracy", "criteria macro-f1", "trial accuracy"
            );
            for s in &self.strata {
                let _ = writeln!(
                    out,
                    "{:<width$} {:>6} {:>6}  {:<25} {:<25} {}",
                    s.category,
                    s.pairs,
                    s.groups,
                    cell(&s.criteria_accuracy),
                    cell(&s.criteria_f1),
                    opt(&s.trial_accuracy)
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use MatchClass::{Match, Mismatch, Unknown};

    fn group(kinds: &[(CriterionKind, MatchClass)]) -> TrialGroup {
        TrialGroup {
            patient_id: "P".into(),
            trial_id: "T".into(),
            predictions: kinds.to_vec(),
        }
    }

    #[test]
    fn all_correct_scores_one() {
        let labels = [Match, Mismatch, Unknown, Match];
        assert_eq!(criteria_metrics(&labels, &labels).unwrap(), (1.0, 1.0));
        assert_eq!(criteria_metrics(&[Unknown], &[Unknown]).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn confusion_fixture() {
        let labels: Vec<MatchClass> = [Match, Mismatch, Unknown].iter().flat_map(|&c| [c; 10]).collect();
        let preds: Vec<MatchClass> = labels.iter().map(|&c| if c == Match { Mismatch } else { c }).collect();
        let (acc, f1) = criteria_metrics(&preds, &labels).unwrap();
        assert_abs_diff_eq!(acc, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f1, 5.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn metric_errors() {
        assert!(criteria_metrics(&[], &[]).is_err());
        assert!(criteria_metrics(&[Match], &[Match, Match]).is_err());
        assert!(trial_accuracy(&[]).is_err());
    }

    #[test]
    fn trial_rule() {
        use CriterionKind::{Exclusion as E, Inclusion as I};
        let ok = group(&[(I, Match), (I, Match), (I, Match), (E, Mismatch), (E, Mismatch)]);
        let ec_wrong = group(&[(I, Match), (I, Match), (I, Match), (E, Match)]);
        let ic_unknown = group(&[(I, Unknown), (I, Match), (E, Mismatch)]);
        assert!(ok.is_correct());
        assert!(!ec_wrong.is_correct());
        assert!(!ic_unknown.is_correct());
        assert_abs_diff_eq!(trial_accuracy(&[ok, ec_wrong, ic_unknown]).unwrap(), 1.0 / 3.0);
    }

    fn pair(patient: &str, trial: &str, kind: CriterionKind, label: MatchClass) -> LabeledPair {
        LabeledPair {
            patient_id: patient.into(),
            criterion_id: format!("{trial}-{kind:?}"),
            trial_id: trial.into(),
            kind,
            label,
        }
    }

    #[test]
    fn foreign_only_groups_are_skipped() {
        let pairs = vec![
            pair("P1", "T1", CriterionKind::Inclusion, Match),
            pair("P1", "T1", CriterionKind::Foreign, Unknown),
            pair("P2", "T2", CriterionKind::Foreign, Unknown),
        ];
        let grouped = group_by_trial(&pairs, &[Match, Match, Unknown]).unwrap();
        assert_eq!(grouped.warnings, 1);
        assert_eq!(grouped.groups.len(), 1);
        assert_eq!(grouped.groups[0].predictions, vec![(CriterionKind::Inclusion, Match)]);
    }

    fn frac(items: &[&bool]) -> f64 {
        items.iter().filter(|&&&b| b).count() as f64 / items.len() as f64
    }

    #[test]
    fn bootstrap_degenerate_sets() {
        let all = vec![true; 50];
        let m = bootstrap_ci(frac, &all, 200, 0.95, 1).unwrap();
        assert_eq!((m.mean, m.ci_low, m.ci_high), (1.0, 1.0, 1.0));
        let none = vec![false; 50];
        let m = bootstrap_ci(frac, &none, 200, 0.95, 1).unwrap();
        assert_eq!((m.mean, m.ci_low, m.ci_high), (0.0, 0.0, 0.0));
    }

    #[test]
    fn bootstrap_width_matches_normal_approximation() {
        let items: Vec<bool> = (0..1000).map(|i| i % 2 == 0).collect();
        let m = bootstrap_ci(frac, &items, 1000, 0.95, 7).unwrap();
        let expected = 2.0 * 1.96 * (0.25f64 / 1000.0).sqrt();
        assert_eq!(m.mean, 0.5);
        assert!(((m.ci_high - m.ci_low) - expected).abs() <= 0.01, "{m:?}");
    }

    #[test]
    fn bootstrap_is_seeded() {
        let items: Vec<bool> = (0..200).map(|i| i % 3 == 0).collect();
        let a = bootstrap_ci(frac, &items, 300, 0.9, 5).unwrap();
        let b = bootstrap_ci(frac, &items, 300, 0.9, 5).unwrap();
        let c = bootstrap_ci(frac, &items, 300, 0.9, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(bootstrap_ci(frac, &Vec::<bool>::new(), 10, 0.95, 0).is_err());
    }

    fn report_fixture() -> (Vec<LabeledPair>, Vec<[f64; 3]>, Vec<Trial>) {
        let pairs = vec![
            pair("P1", "T1", CriterionKind::Inclusion, Match),
            pair("P1", "T1", CriterionKind::Exclusion, Mismatch),
            pair("P1", "T1", CriterionKind::Foreign, Unknown),
            pair("P2", "T2", CriterionKind::Inclusion, Match),
            pair("P2", "T2", CriterionKind::Exclusion, Mismatch),
        ];
        let probs = vec![
            [0.9, 0.05, 0.05],
            [0.1, 0.8, 0.1],
            [0.2, 0.2, 0.6],
            [0.9, 0.05, 0.05],
            [0.7, 0.2, 0.1],
        ];
        let trials = vec![
            Trial { trial_id: "T1".into(), category: "alpha".into() },
            Trial { trial_id: "T2".into(), category: "beta".into() },
        ];
        (pairs, probs, trials)
    }

    #[test]
    fn report_strata_and_rendering() {
        let (pairs, probs, trials) = report_fixture();
        let report = evaluate(&pairs, &probs, &trials, &EvalConfig { resamples: 100, ..EvalConfig::default() }).unwrap();
        assert_eq!(report.pairs, 5);
        assert_eq!(report.groups, 2);
        assert_abs_diff_eq!(report.criteria_accuracy.mean, 0.8);
        assert_abs_diff_eq!(report.trial_accuracy.unwrap().mean, 0.5);
        assert_eq!(report.strata.iter().map(|s| s.pairs).sum::<usize>(), 5);
        assert_eq!(report.strata[0].trial_accuracy.unwrap().mean, 1.0);
        assert_eq!(report.strata[1].trial_accuracy.unwrap().mean, 0.0);
        let back: EvalReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
        let text = report.to_text();
        assert!(text.contains("macro-f1"));
        assert!(text.lines().any(|l| l.starts_with("beta")));
    }

    #[test]
    fn unknown_trial_is_an_error() {
        let (pairs, probs, mut trials) = report_fixture();
        trials.pop();
        assert!(matches!(
            evaluate(&pairs, &probs, &trials, &EvalConfig::default()),
            Err(Error::Lookup(_))
        ));
    }

    fn class() -> impl Strategy<Value = MatchClass> {
        (0usize..3).prop_map(|i| MatchClass::from_index(i).unwrap())
    }

    proptest! {
        #[test]
        fn intervals_contain_the_mean(
            outcomes in prop::collection::vec((class(), class()), 1..60),
            seed in 0u64..1000,
        ) {
            let acc = bootstrap_ci(|s: &[&(MatchClass, MatchClass)]| accuracy_of(s), &outcomes, 50, 0.95, seed).unwrap();
            let f1 = bootstrap_ci(|s: &[&(MatchClass, MatchClass)]| macro_f1_of(s), &outcomes, 50, 0.95, seed).unwrap();
            for m in [acc, f1] {
                prop_assert!(0.0 <= m.ci_low && m.ci_low <= m.mean && m.mean <= m.ci_high && m.ci_high <= 1.0);
            }
        }

        #[test]
        fn trial_accuracy_bounded_by_each_criterion(
            kinds in prop::collection::vec(prop::bool::ANY, 1..6),
            preds in prop::collection::vec(prop::collection::vec(class(), 6), 1..20),
        ) {
            let kind = |inc: bool| if inc { CriterionKind::Inclusion } else { CriterionKind::Exclusion };
            let groups: Vec<TrialGroup> = preds
                .iter()
                .map(|row| group(&kinds.iter().zip(row).map(|(&inc, &p)| (kind(inc), p)).collect::<Vec<_>>()))
                .collect();
            let trial = trial_accuracy(&groups).unwrap();
            for (c, &inc) in kinds.iter().enumerate() {
                let wanted = if inc { Match } else { Mismatch };
                let per_criterion = preds.iter().filter(|row| row[c] == wanted).count() as f64 / preds.len() as f64;
                prop_assert!(trial <= per_criterion + 1e-12);
            }
        }
    }
}
