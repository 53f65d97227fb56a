//! Splitting, optimization and beam-width annealing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, LabeledPair, MatchClass};
use crate::error::{Error, Result};
use crate::model::{distance_loss, total_loss, ModelState};
use crate::ontology::CodeBook;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub beam_start: usize,
    pub beam_end: usize,
    pub seed: u64,
    /// Threads for per-pair forward/backward passes. Results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            beam_start: 25,
            beam_end: 4,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Settings for the desk-scale synthetic corpus: many more, smaller Adam
    /// steps than the defaults.
    pub fn desk() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            learning_rate: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.workers == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch_size and workers must be positive".into(),
            ));
        }
        if self.beam_end == 0 || self.beam_start < self.beam_end {
            return Err(Error::InvalidArgument(format!(
                "beam widths must satisfy beam_start >= beam_end >= 1, got {} -> {}",
                self.beam_start, self.beam_end
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Beam width for `epoch`, interpolated linearly from `beam_start` to `beam_end`.
pub fn beam_schedule(epoch: usize, config: &TrainConfig) -> usize {
    if config.epochs <= 1 {
        return config.beam_end;
    }
    let span = (config.beam_start - config.beam_end) as f64;
    let w = config.beam_start as f64 - span * epoch as f64 / (config.epochs - 1) as f64;
    w.round() as usize
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<LabeledPair>,
    pub val: Vec<LabeledPair>,
    pub test: Vec<LabeledPair>,
}

impl Split {
    pub fn test_patients(&self) -> HashSet<&str> {
        self.test.iter().map(|p| p.patient_id.as_str()).collect()
    }
}

pub const MIN_SPLIT_PATIENTS: usize = 10;

/// 30% of patients go to test; the remaining pairs split 90/10 into train
/// and validation.
pub fn split_dataset(pairs: &[LabeledPair], seed: u64) -> Result<Split> {
    let mut patients: Vec<&str> = pairs.iter().map(|p| p.patient_id.as_str()).collect();
    patients.sort_unstable();
    patients.dedup();
    if patients.len() < MIN_SPLIT_PATIENTS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_SPLIT_PATIENTS} distinct patients to split, got {}",
            patients.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let n_test = (patients.len() as f64 * 0.3).round() as usize;
    let test_ids: HashSet<&str> = patients[..n_test].iter().copied().collect();

    let mut split = Split::default();
    let mut rest = Vec::new();
    for p in pairs {
        if test_ids.contains(p.patient_id.as_str()) {
            split.test.push(p.clone());
        } else {
            rest.push(p.clone());
        }
    }
    rest.shuffle(&mut rng);
    let n_train = (rest.len() as f64 * 0.9).round() as usize;
    split.val = rest.split_off(n_train);
    split.train = rest;
    Ok(split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub beam_width: usize,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_accuracy,beam_width\n");
    for r in history {
        writeln!(out, "{},{:?},{:?},{}", r.epoch, r.train_loss, r.val_accuracy, r.beam_width)
            .expect("write to string");
    }
    out
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig, shapes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = shapes.into_iter().collect();
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.epsilon,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

struct PairResult {
    loss: f64,
    cross_entropy: f64,
    distance: f64,
    grads: Vec<Tensor>,
}

fn pair_gradient(
    state: &ModelState,
    corpus: &Corpus,
    codebook: &CodeBook,
    pair: &LabeledPair,
    beam_width: usize,
) -> Result<PairResult> {
    let patient = corpus.patient(&pair.patient_id)?;
    let criterion = corpus.criterion(&pair.criterion_id)?;
    let mut graph = Graph::new();
    let bound = state.store.bind(&mut graph, true);
    let f = state.forward(
        &mut graph,
        &bound,
        patient,
        criterion,
        &corpus.vocab,
        codebook,
        beam_width,
    )?;
    let distance = if state.loss.lambda != 0.0 {
        Some(distance_loss(&mut graph, f.q, f.beam.response, pair.kind, &state.loss)?)
    } else {
        None
    };
    let loss = total_loss(&mut graph, f.probs, pair.label, distance, &state.loss)?;
    let ce = -graph.value(f.probs).data()[pair.label.index()]
        .max(crate::model::PROB_FLOOR)
        .ln();
    let loss_value = graph.value(loss).item();
    let distance_value = distance.map_or(0.0, |d| graph.value(d).item());
    if !loss_value.is_finite() {
        return Ok(PairResult {
            loss: loss_value,
            cross_entropy: ce,
            distance: distance_value,
            grads: Vec::new(),
        });
    }
    graph.backward(loss)?;
    Ok(PairResult {
        loss: loss_value,
        cross_entropy: ce,
        distance: distance_value,
        grads: bound.gradients(&graph, &state.store),
    })
}

/// Class probabilities for every pair, in input order. Pairs of the same
/// patient share one memory tree.
pub fn predict_pairs(
    state: &ModelState,
    corpus: &Corpus,
    codebook: &CodeBook,
    pairs: &[LabeledPair],
    beam_width: usize,
) -> Result<Vec<[f64; 3]>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        groups.entry(p.patient_id.as_str()).or_default().push(i);
    }
    let groups: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    let results: Vec<Result<Vec<(usize, [f64; 3])>>> = groups
        .par_iter()
        .map(|(patient, idx)| {
            let record = corpus.patient(patient)?;
            let criteria = idx
                .iter()
                .map(|&i| corpus.criterion(&pairs[i].criterion_id))
                .collect::<Result<Vec<_>>>()?;
            let probs = state.match_patient(record, &criteria, &corpus.vocab, codebook, beam_width)?;
            Ok(idx.iter().copied().zip(probs).collect())
        })
        .collect();
    let mut out = vec![[0.0; 3]; pairs.len()];
    for r in results {
        for (i, p) in r? {
            out[i] = p;
        }
    }
    Ok(out)
}

pub fn accuracy(probs: &[[f64; 3]], pairs: &[LabeledPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let correct = probs
        .iter()
        .zip(pairs)
        .filter(|(p, pair)| MatchClass::argmax(p) == pair.label)
        .count();
    correct as f64 / pairs.len() as f64
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the highest validation accuracy.
    pub best: ModelState,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {workers} workers: {e}")))
}

/// Trains `state` on `split.train`, scoring `split.val` after every epoch.
pub fn train(
    mut state: ModelState,
    corpus: &Corpus,
    codebook: &CodeBook,
    split: &Split,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    state.check_codebook(codebook)?;
    if split.train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let pool = pool(config.workers)?;
    let mut adam = Adam::new(config, state.store.iter().map(|(_, t)| t.len()));
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(ModelState, usize, f64)> = None;
    let mut order: Vec<usize> = (0..split.train.len()).collect();

    for epoch in 0..config.epochs {
        let width = beam_schedule(epoch, config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64 + 1));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<Result<PairResult>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| pair_gradient(&state, corpus, codebook, &split.train[i], width))
                    .collect()
            });
            let mut grads: Option<Vec<Tensor>> = None;
            for r in results {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_no,
                        cross_entropy: r.cross_entropy,
                        distance: r.distance,
                    });
                }
                loss_sum += r.loss;
                match &mut grads {
                    None => grads = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            let mut params: Vec<&mut Tensor> = state.store.tensors_mut().collect();
            adam.step(&mut params, &grads);
        }
        let val_accuracy = if split.val.is_empty() {
            0.0
        } else {
            let probs = pool.install(|| predict_pairs(&state, corpus, codebook, &split.val, config.beam_end))?;
            accuracy(&probs, &split.val)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / split.train.len() as f64,
            val_accuracy,
            beam_width: width,
        };
        on_epoch(&record);
        log::info!(
            "epoch {epoch}: loss {:.4} val_acc {:.4} beam {width}",
            record.train_loss,
            val_accuracy
        );
        history.push(record);
        if best.as_ref().map_or(true, |(_, _, acc)| val_accuracy > *acc) {
            best = Some((state.clone(), epoch, val_accuracy));
        }
    }
    let (best, best_epoch, best_val_accuracy) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_accuracy,
        history,
    })
}

/// Pairs per class among `pairs`, for logging.
pub fn label_counts(pairs: &[LabeledPair]) -> HashMap<MatchClass, usize> {
    let mut counts = HashMap::new();
    for p in pairs {
        *counts.entry(p.label).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::data::{CriterionKind, ModelConfig};
    use crate::model::LossConfig;
    use crate::ontology::EmbedderSpec;
    use crate::synth::{generate, GenConfig, Generated};

    fn pairs_for(n_patients: usize) -> Vec<LabeledPair> {
        (0..n_patients)
            .flat_map(|p| {
                (0..3).map(move |c| LabeledPair {
                    patient_id: format!("p{p:03}"),
                    criterion_id: format!("c{c}"),
                    trial_id: "t".into(),
                    kind: CriterionKind::Inclusion,
                    label: MatchClass::Match,
                })
            })
            .collect()
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let c = TrainConfig::default();
        assert_eq!(beam_schedule(0, &c), 25);
        assert_eq!(beam_schedule(19, &c), 4);
        // 25 − 21·10/19 = 13.947…
        assert_eq!(beam_schedule(10, &c), 14);
        let one = TrainConfig { epochs: 1, ..c.clone() };
        assert_eq!(beam_schedule(0, &one), 4);
        for e in 1..20 {
            assert!(beam_schedule(e, &c) <= beam_schedule(e - 1, &c));
        }
    }

    #[test]
    fn split_by_patient() {
        let pairs = pairs_for(100);
        let s = split_dataset(&pairs, 5).unwrap();
        let test = s.test_patients();
        assert_eq!(test.len(), 30);
        assert!(s.train.iter().chain(&s.val).all(|p| !test.contains(p.patient_id.as_str())));
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), pairs.len());
        assert_eq!(s.train.len(), 189);
        assert_eq!(split_dataset(&pairs, 5).unwrap(), s);
        assert_ne!(split_dataset(&pairs, 6).unwrap(), s);
        assert!(split_dataset(&pairs_for(9), 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { beam_start: 3, beam_end: 4, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let c = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
        let mut adam = Adam::new(&c, [2]);
        let mut p = Tensor::vector(vec![1.0, -1.0]);
        let g = Tensor::vector(vec![0.5, -2.0]);
        adam.step(&mut [&mut p], &[g]);
        // bias-corrected first step is lr·sign(g) up to ε
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    fn tiny() -> (Generated, CodeBook, ModelState, Split) {
        let g = generate(&GenConfig {
            branching: [3, 2, 2, 2],
            n_patients: 12,
            n_trials: 4,
            seed: 2,
            ..GenConfig::default()
        })
        .unwrap();
        let config = ModelConfig {
            n_m: 8,
            n_e: 8,
            attention_heads: 2,
            ffn_multiplier: 2,
            head_hidden: 8,
            ..ModelConfig::desk()
        };
        let spec = EmbedderSpec::DeterministicHash { dim: 8, seed: 1 };
        let book = CodeBook::new(Arc::new(g.ontology.clone()), Arc::from(spec.build().unwrap()));
        let state = ModelState::new(config, LossConfig::default(), spec, 3).unwrap();
        let split = split_dataset(&g.corpus.pairs, 1).unwrap();
        (g, book, state, split)
    }

    fn mean_loss(state: &ModelState, g: &Generated, book: &CodeBook, pairs: &[LabeledPair]) -> f64 {
        pairs
            .iter()
            .map(|p| pair_gradient(state, &g.corpus, book, p, 4).unwrap().loss)
            .sum::<f64>()
            / pairs.len() as f64
    }

    #[test]
    fn one_batch_step_lowers_the_loss() {
        let (g, book, state, split) = tiny();
        let batch: Vec<LabeledPair> = split.train.iter().take(8).cloned().collect();
        let before = mean_loss(&state, &g, &book, &batch);
        let one = Split { train: batch.clone(), val: split.val.clone(), test: Vec::new() };
        let config = TrainConfig {
            epochs: 1,
            batch_size: 8,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let out = train(state, &g.corpus, &book, &one, &config, |_| {}).unwrap();
        let after = mean_loss(&out.best, &g, &book, &batch);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn history_is_reproducible_and_independent_of_workers() {
        let (g, book, state, split) = tiny();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e-3,
            beam_start: 6,
            ..TrainConfig::default()
        };
        let a = train(state.clone(), &g.corpus, &book, &split, &config, |_| {}).unwrap();
        let b = train(state.clone(), &g.corpus, &book, &split, &config, |_| {}).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert_eq!(a.best, b.best);
        let c = train(state, &g.corpus, &book, &split, &TrainConfig { workers: 3, ..config }, |_| {}).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&c.history));
        assert_eq!(a.history.iter().map(|r| r.beam_width).collect::<Vec<_>>(), vec![6, 5, 4]);
        let best = a.history.iter().map(|r| r.val_accuracy).fold(f64::MIN, f64::max);
        assert_eq!(a.best_val_accuracy, best);
        assert_eq!(a.history[a.best_epoch].val_accuracy, best);
    }

    #[test]
    fn zero_lambda_matches_cross_entropy_only() {
        let (g, book, state, split) = tiny();
        let config = TrainConfig { epochs: 2, batch_size: 4, beam_start: 5, ..TrainConfig::default() };
        let mut a_state = state.clone();
        a_state.loss.lambda = 0.0;
        let mut b_state = state;
        b_state.loss = LossConfig { alpha: 0.9, lambda: 0.0 };
        let a = train(a_state, &g.corpus, &book, &split, &config, |_| {}).unwrap();
        let b = train(b_state, &g.corpus, &book, &split, &config, |_| {}).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
    }

    #[test]
    fn checkpoint_reproduces_val_accuracy() {
        let (g, book, state, split) = tiny();
        let config = TrainConfig { epochs: 2, batch_size: 4, beam_start: 5, ..TrainConfig::default() };
        let out = train(state, &g.corpus, &book, &split, &config, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        out.best.save(&path, serde_json::Value::Null).unwrap();
        let back = ModelState::load(&path).unwrap();
        let probs = predict_pairs(&back, &g.corpus, &book, &split.val, config.beam_end).unwrap();
        assert_eq!(accuracy(&probs, &split.val), out.best_val_accuracy);
        let dir_csv = dir.path().join("history.csv");
        write_history(&dir_csv, &out.history).unwrap();
        let text = std::fs::read_to_string(dir_csv).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_accuracy,beam_width\n0,"));
    }
}
