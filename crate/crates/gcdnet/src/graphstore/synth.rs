//! Synthetic camouflage-graph generator.
//!
//! Features come from two unit-variance Gaussian clusters whose means sit
//! `MEAN_SEPARATION` apart. A fraction of fraud nodes is camouflaged by
//! interpolating their features toward the benign mean. Edges connect
//! same-class endpoints with the requested homophily probability.

use super::{Csr, GraphError, Label, MultiRelationGraph};
use crate::numkernel::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Distance between the fraud and benign cluster means.
pub const MEAN_SEPARATION: f64 = 2.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_nodes: usize,
    pub fraud_ratio: f64,
    pub feature_dim: usize,
    pub n_relations: usize,
    pub avg_degree: f64,
    pub homophily: f64,
    pub camouflage_rate: f64,
    pub camouflage_strength: f64,
    /// Fraction of nodes whose label is masked to unlabeled.
    pub unlabeled_ratio: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_nodes: 2000,
            fraud_ratio: 0.15,
            feature_dim: 10,
            n_relations: 2,
            avg_degree: 10.0,
            homophily: 0.6,
            camouflage_rate: 0.4,
            camouflage_strength: 0.7,
            unlabeled_ratio: 0.0,
            seed: 0,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<(), GraphError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.n_nodes < 2 {
            return Err(GraphError::Config("n_nodes must be >= 2".into()));
        }
        if !(self.fraud_ratio > 0.0 && self.fraud_ratio < 1.0) {
            return Err(GraphError::Config(format!(
                "fraud_ratio must be in (0,1), got {}",
                self.fraud_ratio
            )));
        }
        if self.feature_dim == 0 || self.n_relations == 0 {
            return Err(GraphError::Config("feature_dim and n_relations must be >= 1".into()));
        }
        if self.avg_degree < 1.0 {
            return Err(GraphError::Config(format!(
                "avg_degree must be >= 1, got {}",
                self.avg_degree
            )));
        }
        if self.avg_degree >= self.n_nodes as f64 {
            return Err(GraphError::Config(format!(
                "avg_degree {} infeasible for {} nodes",
                self.avg_degree, self.n_nodes
            )));
        }
        if !in_unit(self.homophily)
            || !in_unit(self.camouflage_rate)
            || !in_unit(self.camouflage_strength)
            || !in_unit(self.unlabeled_ratio)
        {
            return Err(GraphError::Config(
                "homophily, camouflage_rate, camouflage_strength and unlabeled_ratio must be in [0,1]"
                    .into(),
            ));
        }
        Ok(())
    }
}

pub fn generate_synthetic(p: &SynthParams) -> Result<MultiRelationGraph, GraphError> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let n = p.n_nodes;
    let d = p.feature_dim;
    let n_fraud = (n as f64 * p.fraud_ratio).floor() as usize;
    if n_fraud == 0 || n_fraud == n {
        return Err(GraphError::Config(format!(
            "fraud_ratio {} yields a single-class graph at n={n}",
            p.fraud_ratio
        )));
    }

    // scatter fraud ids over the node range
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng);
    let fraud_ids: Vec<usize> = ids[..n_fraud].to_vec();
    let mut true_labels = vec![Label::Benign; n];
    for &i in &fraud_ids {
        true_labels[i] = Label::Fraud;
    }

    // cluster means MEAN_SEPARATION apart along the all-ones direction
    let half = MEAN_SEPARATION / 2.0 / (d as f64).sqrt();
    let mu_fraud: Vec<f64> = vec![half; d];
    let mu_benign: Vec<f64> = vec![-half; d];

    let mut features = vec![0.0; n * d];
    for i in 0..n {
        let mu = if true_labels[i] == Label::Fraud { &mu_fraud } else { &mu_benign };
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            features[i * d + j] = mu[j] + z;
        }
    }

    // camouflage: shift selected fraud features toward the benign mean,
    // preserving their variance so the disguise survives feature statistics
    let n_cam = (fraud_ids.len() as f64 * p.camouflage_rate).floor() as usize;
    let mut cam_pool = fraud_ids.clone();
    cam_pool.shuffle(&mut rng);
    for &i in &cam_pool[..n_cam] {
        for j in 0..d {
            features[i * d + j] += p.camouflage_strength * (mu_benign[j] - mu_fraud[j]);
        }
    }

    // edges: per relation, each edge is same-class with probability
    // homophily. Same-class edges split evenly between the two classes, so
    // every node's neighborhood is same-class with probability homophily
    // regardless of class imbalance (the minority class ends up denser).
    let benign_ids: Vec<usize> = (0..n).filter(|&i| true_labels[i] == Label::Benign).collect();
    let n_edges = (n as f64 * p.avg_degree / 2.0).round() as usize;
    let mut adjacency = Vec::with_capacity(p.n_relations);
    for _ in 0..p.n_relations {
        let mut edges = Vec::with_capacity(n_edges);
        for _ in 0..n_edges {
            let same_class = rng.gen_bool(p.homophily);
            if same_class {
                let pool = if rng.gen_bool(0.5) { &fraud_ids } else { &benign_ids };
                if pool.len() < 2 {
                    // a one-node class cannot host a same-class edge
                    edges.push((
                        fraud_ids[rng.gen_range(0..fraud_ids.len())],
                        benign_ids[rng.gen_range(0..benign_ids.len())],
                    ));
                    continue;
                }
                let a = pool[rng.gen_range(0..pool.len())];
                let b = loop {
                    let cand = pool[rng.gen_range(0..pool.len())];
                    if cand != a {
                        break cand;
                    }
                };
                edges.push((a, b));
            } else {
                edges.push((
                    fraud_ids[rng.gen_range(0..fraud_ids.len())],
                    benign_ids[rng.gen_range(0..benign_ids.len())],
                ));
            }
        }
        adjacency.push(Csr::from_edges(n, &edges));
    }

    // mask a fraction of labels to unlabeled
    let n_mask = (n as f64 * p.unlabeled_ratio).floor() as usize;
    let mut labels = true_labels;
    let mut mask_pool: Vec<usize> = (0..n).collect();
    mask_pool.shuffle(&mut rng);
    for &i in &mask_pool[..n_mask] {
        labels[i] = Label::Unlabeled;
    }

    MultiRelationGraph::new(Tensor::from_vec(vec![n, d], features), labels, adjacency)
}
