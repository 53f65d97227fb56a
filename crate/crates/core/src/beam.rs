//! Attentional beam search over a memory tree and the explanation built from
//! its final beam.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory_tree::{MemoryTree, NodeId, ROOT};
use crate::tensor::{dot_slices, softmax_in_place, Graph, Var};

/// `a = qᵀm`.
pub fn attention_score(graph: &mut Graph, q: Var, memory: Var) -> Result<Var> {
    graph.dot(q, memory)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamEntry {
    pub node: NodeId,
    pub attention: f64,
    /// Score on the graph; `None` for the root.
    pub score: Option<Var>,
    pub expanded: bool,
    pub insertion_index: usize,
}

#[derive(Clone, Debug)]
pub struct BeamResult {
    /// `r = Σ softmax(a)·m` over the final beam.
    pub response: Var,
    /// Final beam without the root, attention-descending.
    pub entries: Vec<BeamEntry>,
    /// Softmax weights aligned with `entries`.
    pub weights: Vec<f64>,
    /// Number of children scored during the search.
    pub visited: usize,
    pub iterations: usize,
}

fn sort_and_truncate(beam: &mut Vec<BeamEntry>, width: usize) {
    beam.sort_by(|a, b| {
        b.attention
            .total_cmp(&a.attention)
            .then(a.insertion_index.cmp(&b.insertion_index))
    });
    beam.truncate(width);
}

pub fn beam_search(graph: &mut Graph, tree: &MemoryTree, q: Var, width: usize) -> Result<BeamResult> {
    if width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    if tree.node(ROOT).children.is_empty() {
        return Err(Error::DegenerateInput("memory tree has no nodes below the root".into()));
    }
    let mut beam = vec![BeamEntry {
        node: ROOT,
        attention: f64::NEG_INFINITY,
        score: None,
        expanded: false,
        insertion_index: 0,
    }];
    let mut next_index = 1;
    let mut visited = 0;
    let mut iterations = 0;
    loop {
        let mut fresh = Vec::new();
        let mut any = false;
        for entry in beam.iter_mut().filter(|e| !e.expanded) {
            entry.expanded = true;
            any = true;
            for child in tree.children(entry.node) {
                let score = attention_score(graph, q, tree.node(child).memory)?;
                fresh.push(BeamEntry {
                    node: child,
                    attention: graph.value(score).item(),
                    score: Some(score),
                    expanded: false,
                    insertion_index: next_index,
                });
                next_index += 1;
                visited += 1;
            }
        }
        if !any {
            break;
        }
        iterations += 1;
        beam.extend(fresh);
        sort_and_truncate(&mut beam, width);
    }

    let entries: Vec<BeamEntry> = beam.into_iter().filter(|e| e.node != ROOT).collect();
    if entries.is_empty() {
        return Err(Error::DegenerateInput("final beam holds only the root".into()));
    }
    let scores: Vec<Var> = entries.iter().map(|e| e.score.expect("scored")).collect();
    let memories: Vec<Var> = entries.iter().map(|e| tree.node(e.node).memory).collect();
    let scores = graph.concat(&scores, 0)?;
    let weights = graph.softmax(scores);
    let stacked = graph.stack(&memories)?;
    let response = graph.matmul(weights, stacked)?;
    Ok(BeamResult {
        response,
        weights: graph.value(weights).data().to_vec(),
        entries,
        visited,
        iterations,
    })
}

/// Plain-value attention over every non-root node, for checking the search.
pub fn exhaustive_response(graph: &Graph, tree: &MemoryTree, q: &[f64]) -> Vec<f64> {
    let ids: Vec<NodeId> = (1..tree.len()).collect();
    let mut w: Vec<f64> = ids
        .iter()
        .map(|&i| dot_slices(q, graph.value(tree.node(i).memory).data()))
        .collect();
    softmax_in_place(&mut w, None);
    let mut r = vec![0.0; q.len()];
    for (&i, wi) in ids.iter().zip(&w) {
        for (acc, m) in r.iter_mut().zip(graph.value(tree.node(i).memory).data()) {
            *acc += wi * m;
        }
    }
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationNode {
    pub description: String,
    pub level: usize,
    pub weight: f64,
    /// Descriptions from the top level down to this node.
    pub path: Vec<String>,
}

/// Final-beam nodes with their attention weights, heaviest first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExplanationTree {
    pub nodes: Vec<ExplanationNode>,
}

pub fn extract_explanation(tree: &MemoryTree, result: &BeamResult) -> ExplanationTree {
    let mut nodes: Vec<ExplanationNode> = result
        .entries
        .iter()
        .zip(&result.weights)
        .map(|(e, &w)| {
            let n = tree.node(e.node);
            ExplanationNode {
                description: n.key.clone(),
                level: n.level,
                weight: w,
                path: tree.path(e.node),
            }
        })
        .collect();
    nodes.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    ExplanationTree { nodes }
}

impl ExplanationTree {
    pub fn top(&self) -> Option<&ExplanationNode> {
        self.nodes.first()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("explanation serializes")
    }

    /// Graphviz digraph of every path leading to a beam node. Beam nodes are
    /// filled and labelled with their weight.
    pub fn to_dot(&self) -> String {
        let mut ids: indexmap::IndexMap<Vec<String>, usize> = indexmap::IndexMap::new();
        let mut edges = Vec::new();
        for node in &self.nodes {
            for depth in 1..=node.path.len() {
                let prefix = node.path[..depth].to_vec();
                if ids.contains_key(&prefix) {
                    continue;
                }
                let id = ids.len();
                if depth > 1 {
                    edges.push((ids[&node.path[..depth - 1].to_vec()], id));
                } else {
                    edges.push((usize::MAX, id));
                }
                ids.insert(prefix, id);
            }
        }
        let mut out = String::from("digraph explanation {\n  rankdir=TB;\n  root [label=\"patient\", shape=box];\n");
        for (path, id) in &ids {
            let label = escape(path.last().expect("non-empty path"));
            match self.nodes.iter().find(|n| &n.path == path) {
                Some(n) => writeln!(
                    out,
                    "  n{id} [label=\"{label}\\n{:.3}\", style=filled, fillcolor=\"0.6 {:.3} 1.0\"];",
                    n.weight, n.weight
                ),
                None => writeln!(out, "  n{id} [label=\"{label}\"];"),
            }
            .expect("write to string");
        }
        for (from, to) in edges {
            if from == usize::MAX {
                writeln!(out, "  root -> n{to};").expect("write to string");
            } else {
                writeln!(out, "  n{from} -> n{to};").expect("write to string");
            }
        }
        out.push_str("}\n");
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            writeln!(out, "{:.4}  L{}  {}", n.weight, n.level, n.path.join(" > ")).expect("write to string");
        }
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}
