//! Stratified train/valid/test splitting.

use super::{GraphError, Label, MultiRelationGraph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
    None,
}

/// Per-node split assignment. Only labeled nodes receive train/valid/test.
#[derive(Debug, Clone)]
pub struct SplitAssignment {
    assignment: Vec<Split>,
    seed: u64,
}

impl SplitAssignment {
    #[cfg(test)]
    pub(crate) fn from_vec(assignment: Vec<Split>, seed: u64) -> Self {
        SplitAssignment { assignment, seed }
    }

    pub fn get(&self, node: usize) -> Split {
        self.assignment[node]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn nodes_in(&self, split: Split) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == split).collect()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

/// Splits each class independently: shuffle by seed, then cut at
/// round(n*r_train) and round(n*(r_train+r_valid)). Unlabeled nodes get
/// [`Split::None`].
pub fn stratified_split(
    g: &MultiRelationGraph,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment, GraphError> {
    let (rt, rv, rs) = ratios;
    if rt < 0.0 || rv < 0.0 || rs < 0.0 || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(GraphError::Config(format!(
            "split ratios must be non-negative and sum to 1, got ({rt}, {rv}, {rs})"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![Split::None; g.n_nodes()];
    for class in [Label::Fraud, Label::Benign] {
        let mut nodes: Vec<usize> =
            (0..g.n_nodes()).filter(|&i| g.label(i) == class).collect();
        if nodes.is_empty() {
            return Err(GraphError::Config(format!(
                "class {class:?} has no labeled nodes; cannot stratify"
            )));
        }
        nodes.shuffle(&mut rng);
        let n = nodes.len();
        let b1 = (n as f64 * rt).round() as usize;
        let b2 = (n as f64 * (rt + rv)).round() as usize;
        for (k, &node) in nodes.iter().enumerate() {
            assignment[node] = if k < b1 {
                Split::Train
            } else if k < b2 {
                Split::Valid
            } else {
                Split::Test
            };
        }
    }
    Ok(SplitAssignment { assignment, seed })
}
