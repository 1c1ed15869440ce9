//! Immutable multi-relation graph container, file ingestion, stratified
//! splitting, and a synthetic camouflage-graph generator.

mod audit;
mod io;
mod split;
mod synth;

pub use audit::{AuditedLabels, LabelAudit};
pub use io::{load_graph, save_graph};
pub use split::{stratified_split, Split, SplitAssignment};
pub use synth::{generate_synthetic, SynthParams, MEAN_SEPARATION};

use crate::numkernel::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Node label. Files encode benign as 0, fraud as 1, unlabeled as -1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Benign,
    Fraud,
    Unlabeled,
}

impl Label {
    pub fn from_code(code: i64) -> Option<Label> {
        match code {
            0 => Some(Label::Benign),
            1 => Some(Label::Fraud),
            -1 => Some(Label::Unlabeled),
            _ => None,
        }
    }

    pub fn code(self) -> i64 {
        match self {
            Label::Benign => 0,
            Label::Fraud => 1,
            Label::Unlabeled => -1,
        }
    }
}

/// Compressed sparse row adjacency for one relation.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Csr {
    /// Builds symmetric adjacency from directed pairs: every input edge is
    /// mirrored and duplicates are removed. Self-loops survive only if the
    /// input contains them.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)]) -> Csr {
        let mut pairs = Vec::with_capacity(edges.len() * 2);
        for &(s, d) in edges {
            pairs.push((s, d));
            pairs.push((d, s));
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut offsets = vec![0usize; n_nodes + 1];
        for &(s, _) in &pairs {
            offsets[s + 1] += 1;
        }
        for i in 1..=n_nodes {
            offsets[i] += offsets[i - 1];
        }
        let neighbors = pairs.into_iter().map(|(_, d)| d).collect();
        Csr { offsets, neighbors }
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        assert!(
            node + 1 < self.offsets.len(),
            "node {node} out of range for {} nodes",
            self.offsets.len() - 1
        );
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors(node).len()
    }

    /// Directed entry count (each undirected edge counts twice).
    pub fn entry_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn neighbor_array(&self) -> &[usize] {
        &self.neighbors
    }
}

/// An immutable multi-relation graph: features, labels, and one symmetric
/// CSR adjacency per relation.
#[derive(Debug, Clone)]
pub struct MultiRelationGraph {
    n_nodes: usize,
    features: Tensor,
    labels: Vec<Label>,
    adjacency: Vec<Csr>,
}

impl MultiRelationGraph {
    pub fn new(
        features: Tensor,
        labels: Vec<Label>,
        adjacency: Vec<Csr>,
    ) -> Result<MultiRelationGraph, GraphError> {
        let shape = features.shape();
        if shape.len() != 2 {
            return Err(GraphError::Validation(format!(
                "features must be 2-D, got shape {:?}",
                shape
            )));
        }
        let n_nodes = shape[0];
        if labels.len() != n_nodes {
            return Err(GraphError::Validation(format!(
                "{} labels for {} nodes",
                labels.len(),
                n_nodes
            )));
        }
        if adjacency.is_empty() {
            return Err(GraphError::Validation("at least one relation required".into()));
        }
        for (r, csr) in adjacency.iter().enumerate() {
            if csr.offsets.len() != n_nodes + 1 {
                return Err(GraphError::Validation(format!(
                    "relation {r} adjacency sized for {} nodes, graph has {n_nodes}",
                    csr.offsets.len() - 1
                )));
            }
            if let Some(&bad) = csr.neighbors.iter().find(|&&j| j >= n_nodes) {
                return Err(GraphError::Validation(format!(
                    "relation {r} references node {bad}, graph has {n_nodes} nodes"
                )));
            }
        }
        Ok(MultiRelationGraph { n_nodes, features, labels, adjacency })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_relations(&self) -> usize {
        self.adjacency.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label(&self, node: usize) -> Label {
        self.labels[node]
    }

    pub fn relation(&self, r: usize) -> &Csr {
        assert!(r < self.adjacency.len(), "relation {r} out of range for {}", self.adjacency.len());
        &self.adjacency[r]
    }

    /// Stable-order neighbor list of `node` under relation `r`.
    pub fn neighbors(&self, node: usize, r: usize) -> &[usize] {
        self.relation(r).neighbors(node)
    }

    /// True when the node has at least one neighbor in any relation.
    pub fn has_neighbors(&self, node: usize) -> bool {
        self.adjacency.iter().any(|c| c.degree(node) > 0)
    }

    /// Fraction of directed adjacency entries whose endpoints share a
    /// (labeled) class, over all relations.
    pub fn realized_homophily(&self) -> f64 {
        let mut same = 0usize;
        let mut total = 0usize;
        for csr in &self.adjacency {
            for i in 0..self.n_nodes {
                for &j in csr.neighbors(i) {
                    if self.labels[i] == Label::Unlabeled || self.labels[j] == Label::Unlabeled {
                        continue;
                    }
                    total += 1;
                    if self.labels[i] == self.labels[j] {
                        same += 1;
                    }
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            same as f64 / total as f64
        }
    }
}
