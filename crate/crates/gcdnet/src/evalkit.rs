//! Evaluation: AUC / F1-Macro / G-Mean, GCD-weighted distance diagnostics,
//! per-GCD-range metrics, and embedding export.
//!
//! All functions are pure over immutable inputs. Fraud is the positive
//! class throughout.

use crate::gcdlayer::EdgeAttention;
use crate::graphstore::{Label, MultiRelationGraph};
use crate::protogcd::GcdVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::Path;

/// Threshold metrics plus ranking AUC. `auc` is absent when the input
/// contains a single class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSet {
    pub auc: Option<f64>,
    pub f1_macro: f64,
    pub g_mean: f64,
    pub support_fraud: usize,
    pub support_benign: usize,
}

/// Probability that a random positive outscores a random negative, ties at
/// half credit. Sort-and-rank (Mann-Whitney), O(n log n). `None` when only
/// one class is present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores must not be NaN"));

    // average ranks over tie groups, 1-based
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            rank[order[k]] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 =
        labels.iter().zip(&rank).filter(|(l, _)| **l).map(|(_, r)| r).sum();
    let p = pos as f64;
    let n = neg as f64;
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

struct Confusion {
    tp: usize,
    fp: usize,
    tn: usize,
    fnn: usize,
}

fn confusion(pred: &[bool], truth: &[bool]) -> Confusion {
    assert_eq!(pred.len(), truth.len(), "predictions and labels differ in length");
    let mut c = Confusion { tp: 0, fp: 0, tn: 0, fnn: 0 };
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fnn += 1,
        }
    }
    c
}

fn f1_from(tp: usize, fp: usize, fnn: usize) -> f64 {
    let denom = 2 * tp + fp + fnn;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Unweighted mean of the fraud-class and benign-class F1 scores.
/// Zero-denominator F1 counts as 0.
pub fn f1_macro(pred: &[bool], truth: &[bool]) -> f64 {
    let c = confusion(pred, truth);
    // benign F1 swaps the roles: positives are the benign predictions
    let fraud = f1_from(c.tp, c.fp, c.fnn);
    let benign = f1_from(c.tn, c.fnn, c.fp);
    (fraud + benign) / 2.0
}

/// sqrt(TPR * TNR); zero-denominator rates count as 0.
pub fn g_mean(pred: &[bool], truth: &[bool]) -> f64 {
    let c = confusion(pred, truth);
    let tpr = if c.tp + c.fnn == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fnn) as f64 };
    let tnr = if c.tn + c.fp == 0 { 0.0 } else { c.tn as f64 / (c.tn + c.fp) as f64 };
    (tpr * tnr).sqrt()
}

/// Bundles the three metrics at a decision threshold.
pub fn metric_set(scores: &[f64], truth: &[bool], thres: f64) -> MetricSet {
    let pred: Vec<bool> = scores.iter().map(|&s| s >= thres).collect();
    MetricSet {
        auc: auc(scores, truth),
        f1_macro: f1_macro(&pred, truth),
        g_mean: g_mean(&pred, truth),
        support_fraud: truth.iter().filter(|&&t| t).count(),
        support_benign: truth.iter().filter(|&&t| !t).count(),
    }
}

/// One sampled node's attention-weighted neighbor distances.
#[derive(Debug, Clone, Serialize)]
pub struct DistanceRow {
    pub node: usize,
    pub gcd: f64,
    pub d_typ: f64,
    pub d_atyp: f64,
    pub d_avg: f64,
    pub rate_of_change: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DistanceReport {
    pub rows: Vec<DistanceRow>,
}

/// Attention-weighted Euclidean neighbor distances for `sample_size` nodes
/// drawn uniformly (seeded) among nodes with at least one neighbor.
///
/// Per node: d_typ = sum(alpha_typ * ||x_j - x_i||) / sum(alpha_typ) over all
/// relations, likewise d_atyp; d_avg is the unweighted mean;
/// rate_of_change = d_typ / d_avg.
pub fn gcd_weighted_distances(
    graph: &MultiRelationGraph,
    features: &[f64],
    attention: &EdgeAttention,
    gcd: &GcdVector,
    sample_size: usize,
    seed: u64,
) -> DistanceReport {
    let n = graph.n_nodes();
    let d = features.len() / n;
    let mut eligible: Vec<usize> = (0..n).filter(|&i| graph.has_neighbors(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    eligible.truncate(sample_size);
    eligible.sort_unstable();

    let dist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for k in 0..d {
            let diff = features[i * d + k] - features[j * d + k];
            s += diff * diff;
        }
        s.sqrt()
    };

    let rows = eligible
        .into_iter()
        .map(|i| {
            let (mut wt, mut wa, mut st, mut sa, mut total, mut count) =
                (0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
            for r in 0..graph.n_relations() {
                let csr = graph.relation(r);
                let att = &attention.relations[r];
                let (s, e) = (csr.offsets()[i], csr.offsets()[i + 1]);
                for k in s..e {
                    let j = csr.neighbor_array()[k];
                    let dij = dist(i, j);
                    st += att.typical[k] * dij;
                    wt += att.typical[k];
                    sa += att.atypical[k] * dij;
                    wa += att.atypical[k];
                    total += dij;
                    count += 1;
                }
            }
            let d_typ = st / wt;
            let d_atyp = sa / wa;
            let d_avg = total / count as f64;
            DistanceRow {
                node: i,
                gcd: gcd.g[i],
                d_typ,
                d_atyp,
                d_avg,
                rate_of_change: d_typ / d_avg,
            }
        })
        .collect();
    DistanceReport { rows }
}

/// Metrics for one GCD bin [lo, hi).
#[derive(Debug, Clone, Serialize)]
pub struct GcdBinMetrics {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    #[serde(flatten)]
    pub metrics: MetricSet,
}

/// Buckets nodes by GCD over [-1, 1] and reports per-bucket metrics. The
/// final bin is closed at 1.0; empty bins produce no record.
pub fn per_gcd_range_metrics(
    scores: &[f64],
    truth: &[bool],
    gcd: &[f64],
    bin_width: f64,
    thres: f64,
) -> Vec<GcdBinMetrics> {
    assert!(bin_width > 0.0 && bin_width <= 2.0, "bin width must be in (0, 2]");
    let n_bins = (2.0 / bin_width).ceil() as usize;
    let mut out = Vec::new();
    for b in 0..n_bins {
        let lo = -1.0 + b as f64 * bin_width;
        let hi = (lo + bin_width).min(1.0);
        let last = b == n_bins - 1;
        let idx: Vec<usize> = (0..gcd.len())
            .filter(|&i| gcd[i] >= lo && (gcd[i] < hi || (last && gcd[i] <= hi)))
            .collect();
        if idx.is_empty() {
            continue;
        }
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let t: Vec<bool> = idx.iter().map(|&i| truth[i]).collect();
        out.push(GcdBinMetrics { lo, hi, n: idx.len(), metrics: metric_set(&s, &t, thres) });
    }
    out
}

/// Writes node id, label, original features and mixed features as CSV with
/// header `node,label,x_0..x_{d-1},xm_0..xm_{d-1}`.
pub fn export_embeddings(
    x: &[f64],
    x_mixed: &[f64],
    labels: &[Label],
    dim: usize,
    path: &Path,
) -> std::io::Result<()> {
    use std::fmt::Write as _;
    assert_eq!(x.len(), x_mixed.len(), "feature buffers differ in length");
    assert_eq!(x.len(), labels.len() * dim, "feature buffer does not match n*d");
    let mut out = String::new();
    out.push_str("node,label");
    for j in 0..dim {
        let _ = write!(out, ",x_{j}");
    }
    for j in 0..dim {
        let _ = write!(out, ",xm_{j}");
    }
    out.push('\n');
    for (i, label) in labels.iter().enumerate() {
        let _ = write!(out, "{},{}", i, label.code());
        for j in 0..dim {
            let _ = write!(out, ",{}", x[i * dim + j]);
        }
        for j in 0..dim {
            let _ = write!(out, ",{}", x_mixed[i * dim + j]);
        }
        out.push('\n');
    }
    std::fs::write(path, out)
}

#[cfg(test)]
mod tests;
