//! Per-patient hierarchical memory.
//!
//! Each code in a patient's record is inserted along its four-level
//! description chain. Every node on the chain gets an erase/add write for
//! its own description and for each more specific description below it,
//! starting at scale 1 and halving per additional write within the same
//! insertion:
//!
//! ```text
//! m_new = m_old ⊙ (1 − s·σ(W_e e)) + s·tanh(W_a e)
//! ```
//!
//! Finally a demographics node, set by a linear layer over the demographic
//! vector, is attached under the root. The construction runs on the autodiff
//! tape so the loss reaches `W_e`, `W_a` and the demographic layer.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, ModelConfig, PatientRecord};
use crate::error::{Error, Result};
use crate::ontology::{CodeBook, CodeInfo, LEVELS};
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

pub const DEMOGRAPHICS_KEY: &str = "Demographics";

pub type NodeId = usize;

pub const ROOT: NodeId = 0;

/// Parameter handles for the memory writes and the demographic layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TreeParams {
    /// `W_e`, `[n_m, n_e]`.
    pub erase: ParamId,
    /// `W_a`, `[n_m, n_e]`.
    pub add: ParamId,
    /// `[n_m, 3]`.
    pub demo_weight: ParamId,
    /// `[n_m]`.
    pub demo_bias: ParamId,
}

impl TreeParams {
    pub fn init(store: &mut ParamStore, config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (m, e) = (config.n_m, config.n_e);
        let erase = store.add_glorot("tree.erase", m, e, rng);
        let add = store.add_glorot("tree.add", m, e, rng);
        // demographic inputs are raw (age in years), so start the layer small
        let demo = (0..m * 3).map(|_| rng.gen_range(-0.01..0.01)).collect();
        let demo_weight = store.add("tree.demo_weight", Tensor::matrix(m, 3, demo).unwrap());
        let demo_bias = store.add_zeros("tree.demo_bias", &[m]);
        Self {
            erase,
            add,
            demo_weight,
            demo_bias,
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.erase, self.add, self.demo_weight, self.demo_bias]
    }

    pub fn bind(&self, bound: &Bound) -> TreeVars {
        TreeVars {
            erase: bound.var(self.erase),
            add: bound.var(self.add),
            demo_weight: bound.var(self.demo_weight),
            demo_bias: bound.var(self.demo_bias),
        }
    }
}

/// [`TreeParams`] placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct TreeVars {
    pub erase: Var,
    pub add: Var,
    pub demo_weight: Var,
    pub demo_bias: Var,
}

/// Trainable scalars in the memory-tree module. Independent of how many codes
/// the ontology holds.
pub fn count_parameters(store: &ParamStore, params: &TreeParams) -> usize {
    params.ids().iter().map(|&id| store.get(id).len()).sum()
}

/// Erase and add vectors computed from one description embedding:
/// `σ(W_e e)` and `tanh(W_a e)`.
#[derive(Clone, Copy, Debug)]
pub struct SlotGates {
    pub erase: Var,
    pub add: Var,
}

pub fn slot_gates(graph: &mut Graph, embedding: Var, vars: &TreeVars) -> Result<SlotGates> {
    let we = graph.matmul(vars.erase, embedding)?;
    let wa = graph.matmul(vars.add, embedding)?;
    Ok(SlotGates {
        erase: graph.sigmoid(we),
        add: graph.tanh(wa),
    })
}

/// Applies one erase/add write with scale `s ∈ (0, 1]`.
pub fn apply_gates(graph: &mut Graph, memory: Var, gates: SlotGates, scale: f64) -> Result<Var> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::Precondition(format!(
            "write scale must lie in (0, 1], got {scale}"
        )));
    }
    if graph.value(memory).shape() != graph.value(gates.erase).shape() {
        return Err(Error::InvalidArgument(format!(
            "memory shape {:?} does not match gate shape {:?}",
            graph.value(memory).shape(),
            graph.value(gates.erase).shape()
        )));
    }
    let erase = graph.scale(gates.erase, -scale);
    let keep = graph.add_scalar(erase, 1.0);
    let kept = graph.mul(memory, keep)?;
    let added = graph.scale(gates.add, scale);
    graph.add(kept, added)
}

/// `m_new = m_old ⊙ (1 − s·σ(W_e e)) + s·tanh(W_a e)`.
pub fn update_slot(
    graph: &mut Graph,
    memory: Var,
    embedding: Var,
    scale: f64,
    vars: &TreeVars,
) -> Result<Var> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::Precondition(format!(
            "write scale must lie in (0, 1], got {scale}"
        )));
    }
    let gates = slot_gates(graph, embedding, vars)?;
    apply_gates(graph, memory, gates, scale)
}

#[derive(Clone, Debug)]
pub struct MemoryNode {
    pub key: String,
    pub level: usize,
    pub memory: Var,
    pub parent: Option<NodeId>,
    /// Children by key, in insertion order.
    pub children: IndexMap<String, NodeId>,
    pub update_count: usize,
}

/// One recorded memory write, kept for inspection and tests.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotWrite {
    pub node: NodeId,
    /// 1-based level of the description whose embedding was written.
    pub source_level: usize,
    pub scale: f64,
}

/// Arena-backed memory tree; node 0 is the root.
#[derive(Clone, Debug)]
pub struct MemoryTree {
    nodes: Vec<MemoryNode>,
    gates: HashMap<String, SlotGates>,
    writes: Vec<SlotWrite>,
    insertions: usize,
}

impl MemoryTree {
    pub fn new(graph: &mut Graph, memory_dim: usize) -> Self {
        let root_memory = graph.constant(Tensor::zeros(&[memory_dim]));
        Self {
            nodes: vec![MemoryNode {
                key: String::new(),
                level: 0,
                memory: root_memory,
                parent: None,
                children: IndexMap::new(),
                update_count: 0,
            }],
            gates: HashMap::new(),
            writes: Vec::new(),
            insertions: 0,
        }
    }

    pub fn node(&self, id: NodeId) -> &MemoryNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[MemoryNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    pub fn writes(&self) -> &[SlotWrite] {
        &self.writes
    }

    pub fn insertions(&self) -> usize {
        self.insertions
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes[id].children.values().copied()
    }

    pub fn find_child(&self, id: NodeId, key: &str) -> Option<NodeId> {
        self.nodes[id].children.get(key).copied()
    }

    /// Descriptions from the root's first child down to `id`.
    pub fn path(&self, id: NodeId) -> Vec<String> {
        let mut path = Vec::new();
        let mut cur = Some(id);
        while let Some(n) = cur {
            if n == ROOT {
                break;
            }
            path.push(self.nodes[n].key.clone());
            cur = self.nodes[n].parent;
        }
        path.reverse();
        path
    }

    /// Node reached by following `keys` from the root.
    pub fn lookup(&self, keys: &[&str]) -> Option<NodeId> {
        keys.iter()
            .try_fold(ROOT, |node, key| self.find_child(node, key))
    }

    fn add_child(&mut self, graph: &mut Graph, parent: NodeId, key: &str, memory: Option<Var>) -> NodeId {
        let dim = graph.value(self.nodes[ROOT].memory).len();
        let memory = memory.unwrap_or_else(|| graph.constant(Tensor::zeros(&[dim])));
        let id = self.nodes.len();
        self.nodes.push(MemoryNode {
            key: key.to_string(),
            level: self.nodes[parent].level + 1,
            memory,
            parent: Some(parent),
            children: IndexMap::new(),
            update_count: 0,
        });
        self.nodes[parent].children.insert(key.to_string(), id);
        id
    }

    fn gates_for(
        &mut self,
        graph: &mut Graph,
        info: &CodeInfo,
        level: usize,
        vars: &TreeVars,
    ) -> Result<SlotGates> {
        let key = info.description(level);
        if let Some(g) = self.gates.get(key) {
            return Ok(*g);
        }
        let e = graph.constant(Tensor::vector(info.embedding(level).to_vec()));
        let g = slot_gates(graph, e, vars)?;
        self.gates.insert(key.to_string(), g);
        Ok(g)
    }

    /// Inserts one code along its description chain, reusing existing nodes.
    pub fn insert_code(&mut self, graph: &mut Graph, info: &CodeInfo, vars: &TreeVars) -> Result<()> {
        let mut cur = ROOT;
        for level in 0..LEVELS {
            let key = info.description(level);
            cur = match self.find_child(cur, key) {
                Some(child) => child,
                None => self.add_child(graph, cur, key, None),
            };
            let mut scale = 1.0;
            for source in level..LEVELS {
                let gates = self.gates_for(graph, info, source, vars)?;
                let memory = apply_gates(graph, self.nodes[cur].memory, gates, scale)?;
                let node = &mut self.nodes[cur];
                node.memory = memory;
                node.update_count += 1;
                self.writes.push(SlotWrite {
                    node: cur,
                    source_level: source + 1,
                    scale,
                });
                scale *= 0.5;
            }
        }
        self.insertions += 1;
        Ok(())
    }

    /// Attaches the demographics node under the root.
    pub fn attach_demographics(
        &mut self,
        graph: &mut Graph,
        demographics: &[f64; 3],
        vars: &TreeVars,
    ) -> Result<NodeId> {
        if self.find_child(ROOT, DEMOGRAPHICS_KEY).is_some() {
            return Err(Error::InvalidArgument(format!(
                "root already has a child keyed {DEMOGRAPHICS_KEY:?}"
            )));
        }
        let d = graph.constant(Tensor::vector(demographics.to_vec()));
        let wd = graph.matmul(vars.demo_weight, d)?;
        let memory = graph.add(wd, vars.demo_bias)?;
        Ok(self.add_child(graph, ROOT, DEMOGRAPHICS_KEY, Some(memory)))
    }

    /// Copies node memories out of the graph for export.
    pub fn snapshot(&self, graph: &Graph) -> TreeSnapshot {
        self.snapshot_node(graph, ROOT)
    }

    fn snapshot_node(&self, graph: &Graph, id: NodeId) -> TreeSnapshot {
        let node = &self.nodes[id];
        TreeSnapshot {
            key: node.key.clone(),
            level: node.level,
            memory: graph.value(node.memory).data().to_vec(),
            update_count: node.update_count,
            children: self
                .children(id)
                .map(|c| self.snapshot_node(graph, c))
                .collect(),
        }
    }
}

/// Frozen copy of a tree with concrete memory values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeSnapshot {
    pub key: String,
    pub level: usize,
    pub memory: Vec<f64>,
    pub update_count: usize,
    pub children: Vec<TreeSnapshot>,
}

impl TreeSnapshot {
    /// `(key, level, children)` with memories dropped.
    pub fn shape(&self) -> (String, usize, Vec<(String, usize, Vec<()>)>) {
        fn walk(n: &TreeSnapshot, out: &mut Vec<(String, usize, Vec<()>)>) {
            out.push((n.key.clone(), n.level, vec![(); n.children.len()]));
            for c in &n.children {
                walk(c, out);
            }
        }
        let mut out = Vec::new();
        for c in &self.children {
            walk(c, &mut out);
        }
        (self.key.clone(), self.level, out)
    }
}

/// Builds a patient's tree: every present code in visit order, modalities in
/// diagnosis, procedure, medication order, then the demographics node.
pub fn build_patient_tree(
    graph: &mut Graph,
    record: &PatientRecord,
    codebook: &CodeBook,
    vars: &TreeVars,
    memory_dim: usize,
) -> Result<MemoryTree> {
    let mut tree = MemoryTree::new(graph, memory_dim);
    for (visit, modality, code) in record.masked_codes() {
        let info = codebook.code_info(code).map_err(|e| match e {
            Error::Lookup(msg) => Error::Lookup(format!(
                "patient {} visit {visit} {}: {msg}",
                record.patient_id,
                Modality::as_str(modality)
            )),
            other => other,
        })?;
        tree.insert_code(graph, &info, vars)?;
    }
    tree.attach_demographics(graph, &record.demographics, vars)?;
    Ok(tree)
}
