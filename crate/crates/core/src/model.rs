//! Prediction head, losses and the assembled forward pass.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beam::{beam_search, extract_explanation, BeamResult, ExplanationTree};
use crate::data::{CriteriaSentence, CriterionKind, MatchClass, ModelConfig, PatientRecord, Vocabulary};
use crate::encoder::{encode_criteria, EncoderParams};
use crate::error::{Error, Result};
use crate::memory_tree::{build_patient_tree, MemoryTree, TreeParams};
use crate::ontology::{CodeBook, EmbedderSpec};
use crate::tensor::{Bound, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadParams {
    /// `[2 n_m, n_m]`.
    pub w1: ParamId,
    pub b1: ParamId,
    /// `[n_m, head_hidden]`.
    pub w2: ParamId,
    pub b2: ParamId,
    /// `[head_hidden, 3]`.
    pub w3: ParamId,
    pub b3: ParamId,
}

impl HeadParams {
    pub fn init(store: &mut ParamStore, config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (m, h) = (config.n_m, config.head_hidden);
        Self {
            w1: store.add_glorot("head.w1", 2 * m, m, rng),
            b1: store.add_zeros("head.b1", &[m]),
            w2: store.add_glorot("head.w2", m, h, rng),
            b2: store.add_zeros("head.b2", &[h]),
            w3: store.add_glorot("head.w3", h, 3, rng),
            b3: store.add_zeros("head.b3", &[3]),
        }
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

/// `ŷ = softmax(relu(relu([q; r] W1 + b1) W2 + b2) W3 + b3)`.
pub fn predict(graph: &mut Graph, q: Var, r: Var, head: &HeadParams, bound: &Bound) -> Result<Var> {
    if graph.value(q).shape() != graph.value(r).shape() {
        return Err(Error::InvalidArgument(format!(
            "q shape {:?} does not match r shape {:?}",
            graph.value(q).shape(),
            graph.value(r).shape()
        )));
    }
    let h1 = graph.concat(&[q, r], 0)?;
    let h2 = graph.linear(h1, bound.var(head.w1), bound.var(head.b1))?;
    let h2 = graph.relu(h2);
    let h3 = graph.linear(h2, bound.var(head.w2), bound.var(head.b2))?;
    let h3 = graph.relu(h3);
    let logits = graph.linear(h3, bound.var(head.w3), bound.var(head.b3))?;
    Ok(graph.softmax(logits))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Margin for exclusion criteria, in (0, 1).
    pub alpha: f64,
    /// Weight of the distance term; 0 disables it.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda: 1.0,
        }
    }
}

impl LossConfig {
    /// Loss weights used with [`crate::trainer::TrainConfig::desk`].
    pub fn desk() -> Self {
        Self {
            lambda: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha={} must lie in (0, 1)", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda={} must be non-negative", self.lambda)));
        }
        Ok(())
    }
}

/// Pairs whose q or r had zero norm, so the similarity fell back to 0.5.
pub static ZERO_NORM_WARNINGS: AtomicUsize = AtomicUsize::new(0);

/// Similarity `d = (1 + cos(r, q)) / 2`.
pub fn similarity(graph: &mut Graph, q: Var, r: Var) -> Result<Var> {
    let qq = graph.dot(q, q)?;
    let rr = graph.dot(r, r)?;
    if graph.value(qq).item() == 0.0 || graph.value(rr).item() == 0.0 {
        ZERO_NORM_WARNINGS.fetch_add(1, Ordering::Relaxed);
        return Ok(graph.constant(Tensor::scalar(0.5)));
    }
    let qr = graph.dot(q, r)?;
    let norms = graph.mul(qq, rr)?;
    let norms = graph.sqrt(norms);
    let cos = graph.div(qr, norms)?;
    let half = graph.scale(cos, 0.5);
    Ok(graph.add_scalar(half, 0.5))
}

/// Inclusion: `1 − d`. Exclusion: `max(0, d − α)`. Foreign pairs: 0.
pub fn distance_loss(
    graph: &mut Graph,
    q: Var,
    r: Var,
    kind: CriterionKind,
    config: &LossConfig,
) -> Result<Var> {
    match kind {
        CriterionKind::Foreign => {
            if graph.value(q).shape() != graph.value(r).shape() {
                return Err(Error::InvalidArgument("q and r differ in shape".into()));
            }
            Ok(graph.constant(Tensor::scalar(0.0)))
        }
        CriterionKind::Inclusion => {
            let d = similarity(graph, q, r)?;
            let neg = graph.scale(d, -1.0);
            Ok(graph.add_scalar(neg, 1.0))
        }
        CriterionKind::Exclusion => {
            let d = similarity(graph, q, r)?;
            let shifted = graph.add_scalar(d, -config.alpha);
            Ok(graph.relu(shifted))
        }
    }
}

pub const PROB_FLOOR: f64 = 1e-12;

/// `−ln max(ŷ[y], 1e-12)`.
pub fn cross_entropy(graph: &mut Graph, probs: Var, label: MatchClass) -> Result<Var> {
    let p = graph.pick(probs, label.index())?;
    let ln = graph.ln_clamped(p, PROB_FLOOR);
    Ok(graph.scale(ln, -1.0))
}

/// `CE + λ·L_D`; the distance term is left off the graph when `λ = 0`.
pub fn total_loss(
    graph: &mut Graph,
    probs: Var,
    label: MatchClass,
    distance: Option<Var>,
    config: &LossConfig,
) -> Result<Var> {
    let ce = cross_entropy(graph, probs, label)?;
    match distance {
        Some(d) if config.lambda != 0.0 => {
            let weighted = graph.scale(d, config.lambda);
            graph.add(ce, weighted)
        }
        _ => Ok(ce),
    }
}

/// Every trainable tensor of the model plus the settings needed to rebuild it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub loss: LossConfig,
    pub embedder: EmbedderSpec,
    pub store: ParamStore,
    pub tree: TreeParams,
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

/// Graph handles produced by one forward pass.
pub struct Forward {
    pub tree: MemoryTree,
    pub q: Var,
    pub beam: BeamResult,
    pub probs: Var,
}

impl Forward {
    pub fn probabilities(&self, graph: &Graph) -> [f64; 3] {
        let p = graph.value(self.probs).data();
        [p[0], p[1], p[2]]
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    config: ModelConfig,
    loss: LossConfig,
    embedder: EmbedderSpec,
    #[serde(default)]
    extra: serde_json::Value,
}

const FORMAT: &str = "memtree-model-1";

impl ModelState {
    pub fn new(config: ModelConfig, loss: LossConfig, embedder: EmbedderSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tree = TreeParams::init(&mut store, &config, &mut rng);
        let encoder = EncoderParams::init(&mut store, &config, &mut rng);
        let head = HeadParams::init(&mut store, &config, &mut rng);
        // Memory content starts in the span the query projection reads from.
        let proj = store.get(encoder.proj_weight).clone();
        let add = store.get_mut(tree.add);
        let (e, m) = (config.n_e, config.n_m);
        for i in 0..m {
            for j in 0..e {
                add.data_mut()[i * e + j] = proj.data()[j * m + i];
            }
        }
        Ok(Self {
            config,
            loss,
            embedder,
            store,
            tree,
            encoder,
            head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn check_codebook(&self, codebook: &CodeBook) -> Result<()> {
        if codebook.dim() != self.config.n_e {
            return Err(Error::InvalidArgument(format!(
                "embedder dimension {} does not match n_e={}",
                codebook.dim(),
                self.config.n_e
            )));
        }
        Ok(())
    }

    /// Tree, query, beam search and head for one pair on `graph`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        patient: &PatientRecord,
        criterion: &CriteriaSentence,
        vocab: &Vocabulary,
        codebook: &CodeBook,
        beam_width: usize,
    ) -> Result<Forward> {
        let vars = self.tree.bind(bound);
        let tree = build_patient_tree(graph, patient, codebook, &vars, self.config.n_m)?;
        let q = encode_criteria(graph, criterion, vocab, codebook, &self.encoder, bound)?;
        let beam = beam_search(graph, &tree, q, beam_width)?;
        let probs = predict(graph, q, beam.response, &self.head, bound)?;
        Ok(Forward { tree, q, beam, probs })
    }

    /// Inference for one pair: probabilities plus the explanation.
    pub fn match_pair(
        &self,
        patient: &PatientRecord,
        criterion: &CriteriaSentence,
        vocab: &Vocabulary,
        codebook: &CodeBook,
        beam_width: usize,
    ) -> Result<([f64; 3], ExplanationTree)> {
        let mut graph = Graph::new();
        let bound = self.store.bind(&mut graph, false);
        let f = self.forward(&mut graph, &bound, patient, criterion, vocab, codebook, beam_width)?;
        Ok((f.probabilities(&graph), extract_explanation(&f.tree, &f.beam)))
    }

    /// Inference for several criteria against one patient, sharing the tree.
    pub fn match_patient(
        &self,
        patient: &PatientRecord,
        criteria: &[&CriteriaSentence],
        vocab: &Vocabulary,
        codebook: &CodeBook,
        beam_width: usize,
    ) -> Result<Vec<[f64; 3]>> {
        let mut graph = Graph::new();
        let bound = self.store.bind(&mut graph, false);
        let vars = self.tree.bind(&bound);
        let tree = build_patient_tree(&mut graph, patient, codebook, &vars, self.config.n_m)?;
        let mut out = Vec::with_capacity(criteria.len());
        for c in criteria {
            let q = encode_criteria(&mut graph, c, vocab, codebook, &self.encoder, &bound)?;
            let beam = beam_search(&mut graph, &tree, q, beam_width)?;
            let probs = predict(&mut graph, q, beam.response, &self.head, &bound)?;
            let p = graph.value(probs).data();
            out.push([p[0], p[1], p[2]]);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            format: FORMAT.into(),
            config: self.config.clone(),
            loss: self.loss.clone(),
            embedder: self.embedder.clone(),
            extra,
        };
        Ok(Checkpoint {
            metadata: serde_json::to_value(meta)?,
            tensors: self
                .store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ckpt.metadata.clone())?;
        if meta.format != FORMAT {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint format {:?}",
                meta.format
            )));
        }
        let mut state = Self::new(meta.config, meta.loss, meta.embedder, 0)?;
        state
            .store
            .load_from(ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(state)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// One line of `match` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub patient_id: String,
    pub trial_id: String,
    pub criterion_id: String,
    pub probs: [f64; 3],
    pub predicted_class: MatchClass,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explanation: Option<ExplanationTree>,
}
