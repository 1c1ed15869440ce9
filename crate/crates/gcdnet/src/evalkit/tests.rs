use super::*;
use crate::gcdlayer::{gcd_attention, perspective_split, RelationAttention};
use crate::graphstore::Csr;
use crate::numkernel::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// O(n^2) pairwise comparison oracle with half credit for ties.
fn auc_pairwise(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for p in &pos {
        for n in &neg {
            total += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(total / (pos.len() * neg.len()) as f64)
}

#[test]
fn auc_matches_hand_worked_example() {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [false, false, true, true];
    let got = auc(&scores, &labels).unwrap();
    assert!((got - 0.75).abs() < 1e-12);
    assert_eq!(got, auc_pairwise(&scores, &labels).unwrap());
}

#[test]
fn auc_trivials() {
    // perfectly separated
    let got = auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
    assert_eq!(got, 1.0);
    // all ties
    let got = auc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap();
    assert!((got - 0.5).abs() < 1e-12);
    // single class
    assert!(auc(&[0.1, 0.9], &[true, true]).is_none());
}

#[test]
fn auc_equals_pairwise_oracle_on_random_instances_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for case in 0..200 {
        let n = rng.gen_range(2..40);
        // quantized scores force ties
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        // ensure both classes
        labels[0] = true;
        if n > 1 {
            labels[1] = false;
        }
        let fast = auc(&scores, &labels).unwrap();
        let slow = auc_pairwise(&scores, &labels).unwrap();
        assert!((fast - slow).abs() < 1e-12, "case {case}: {fast} vs {slow}");
    }
}

#[test]
fn auc_invariant_under_monotone_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(74);
    let scores: Vec<f64> = (0..30).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut labels: Vec<bool> = (0..30).map(|_| rng.gen_bool(0.3)).collect();
    labels[0] = true;
    labels[1] = false;
    let transformed: Vec<f64> = scores.iter().map(|s| (0.5 * s).exp() + 1.0).collect();
    let a = auc(&scores, &labels).unwrap();
    let b = auc(&transformed, &labels).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn f1_macro_examples() {
    // perfect
    assert_eq!(f1_macro(&[true, false, true], &[true, false, true]), 1.0);
    // all predicted benign, labels (1,1,0,0): benign F1 = 2/3, fraud F1 = 0
    let got = f1_macro(&[false; 4], &[true, true, false, false]);
    assert!((got - 1.0 / 3.0).abs() < 1e-12);
    // inverted predictions: both F1 are 0
    assert_eq!(f1_macro(&[false, true], &[true, false]), 0.0);
}

#[test]
fn f1_macro_matches_confusion_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let n = rng.gen_range(1..30);
        let pred: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let truth: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        // oracle: count the confusion matrix by hand
        let (mut tp, mut fp, mut tn, mut fnn) = (0.0, 0.0, 0.0, 0.0);
        for (&p, &t) in pred.iter().zip(&truth) {
            match (p, t) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, false) => tn += 1.0,
                (false, true) => fnn += 1.0,
            }
        }
        let f1_fraud = if 2.0 * tp + fp + fnn == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fnn) };
        let f1_benign = if 2.0 * tn + fnn + fp == 0.0 { 0.0 } else { 2.0 * tn / (2.0 * tn + fnn + fp) };
        let want = (f1_fraud + f1_benign) / 2.0;
        assert_eq!(f1_macro(&pred, &truth), want);

        let tpr = if tp + fnn == 0.0 { 0.0 } else { tp / (tp + fnn) };
        let tnr = if tn + fp == 0.0 { 0.0 } else { tn / (tn + fp) };
        assert_eq!(g_mean(&pred, &truth), (tpr * tnr).sqrt());
    }
}

#[test]
fn g_mean_examples() {
    // TPR = TNR = 1
    assert_eq!(g_mean(&[true, false], &[true, false]), 1.0);
    // TPR = 0.8, TNR = 0.5 -> sqrt(0.4)
    let pred = [true, true, true, true, false, true, false];
    let truth = [true, true, true, true, true, false, false];
    let got = g_mean(&pred, &truth);
    assert!((got - 0.4f64.sqrt()).abs() < 1e-12);
    assert!((got - 0.63246).abs() < 1e-5);
    // no positives predicted
    assert_eq!(g_mean(&[false, false], &[true, false]), 0.0);
}

fn line_graph_attention(
    n: usize,
    edges: &[(usize, usize)],
    g: &[f64],
) -> (Csr, RelationAttention) {
    let csr = Csr::from_edges(n, edges);
    let p = perspective_split(&GcdVector { g: g.to_vec() });
    let att = RelationAttention {
        typical: gcd_attention(&p.g_typ, &csr, 0.2, 0.0, false, None),
        atypical: gcd_attention(&p.g_atyp, &csr, 0.2, 0.0, false, None),
    };
    (csr, att)
}

fn graph_of(n: usize, d: usize, features: Vec<f64>, edges: &[(usize, usize)]) -> MultiRelationGraph {
    MultiRelationGraph::new(
        Tensor::from_vec(vec![n, d], features),
        vec![Label::Benign; n],
        vec![Csr::from_edges(n, edges)],
    )
    .unwrap()
}

#[test]
fn distances_single_neighbor_collapse() {
    let features = vec![0.0, 0.0, 3.0, 4.0];
    let g = vec![0.3, -0.6];
    let graph = graph_of(2, 2, features.clone(), &[(0, 1)]);
    let (_, att) = line_graph_attention(2, &[(0, 1)], &g);
    let report = gcd_weighted_distances(
        &graph,
        &features,
        &EdgeAttention { relations: vec![att] },
        &GcdVector { g },
        10,
        1,
    );
    assert_eq!(report.rows.len(), 2);
    for row in &report.rows {
        assert!((row.d_typ - 5.0).abs() < 1e-12);
        assert!((row.d_atyp - 5.0).abs() < 1e-12);
        assert!((row.d_avg - 5.0).abs() < 1e-12);
        assert!((row.rate_of_change - 1.0).abs() < 1e-12);
    }
}

#[test]
fn distances_equidistant_neighbors_ignore_gcd() {
    // node 0 at origin; neighbors 1 and 2 both at distance 2
    let features = vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0];
    let g = vec![0.1, 0.9, -0.7];
    let edges = [(0, 1), (0, 2)];
    let graph = graph_of(3, 2, features.clone(), &edges);
    let (_, att) = line_graph_attention(3, &edges, &g);
    let report = gcd_weighted_distances(
        &graph,
        &features,
        &EdgeAttention { relations: vec![att] },
        &GcdVector { g },
        10,
        7,
    );
    let row = report.rows.iter().find(|r| r.node == 0).unwrap();
    assert!((row.d_typ - 2.0).abs() < 1e-12);
    assert!((row.d_atyp - 2.0).abs() < 1e-12);
    assert!((row.d_avg - 2.0).abs() < 1e-12);
}

#[test]
fn distances_match_unrolled_weighted_mean_oracle() {
    // star: node 0 with 4 neighbors at hand-set positions and gcds
    let features = vec![
        0.0, 0.0, // node 0
        1.0, 0.0, // d=1
        0.0, 2.0, // d=2
        -3.0, 0.0, // d=3
        0.0, -0.5, // d=0.5
    ];
    let g = vec![0.0, 0.8, -0.4, 0.2, -0.9];
    let edges = [(0, 1), (0, 2), (0, 3), (0, 4)];
    let graph = graph_of(5, 2, features.clone(), &edges);
    let (csr, att) = line_graph_attention(5, &edges, &g);
    let report = gcd_weighted_distances(
        &graph,
        &features,
        &EdgeAttention { relations: vec![att.clone()] },
        &GcdVector { g: g.clone() },
        10,
        3,
    );
    let row = report.rows.iter().find(|r| r.node == 0).unwrap();

    // unrolled scalar oracle over node 0's CSR slice
    let dists = [1.0, 2.0, 3.0, 0.5];
    let (s, e) = (csr.offsets()[0], csr.offsets()[0 + 1]);
    let (mut st, mut wt, mut sa, mut wa, mut sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, slot) in (s..e).enumerate() {
        let j = csr.neighbor_array()[slot];
        let dij = dists[j - 1];
        st += att.typical[slot] * dij;
        wt += att.typical[slot];
        sa += att.atypical[slot] * dij;
        wa += att.atypical[slot];
        sum += dij;
        let _ = k;
    }
    assert!((row.d_typ - st / wt).abs() < 1e-12);
    assert!((row.d_atyp - sa / wa).abs() < 1e-12);
    assert!((row.d_avg - sum / 4.0).abs() < 1e-12);
    assert!((row.rate_of_change - row.d_typ / row.d_avg).abs() < 1e-12);

    // weighted means stay inside the neighbor distance range
    assert!(row.d_typ >= 0.5 && row.d_typ <= 3.0);
    assert!(row.d_atyp >= 0.5 && row.d_atyp <= 3.0);
}

#[test]
fn distances_exclude_isolated_nodes_and_respect_sample_size() {
    let features = vec![0.0, 0.0, 1.0, 0.0, 5.0, 5.0];
    let g = vec![0.1, 0.2, 0.3];
    let edges = [(0, 1)];
    let graph = graph_of(3, 2, features.clone(), &edges);
    let (_, att) = line_graph_attention(3, &edges, &g);
    let report = gcd_weighted_distances(
        &graph,
        &features,
        &EdgeAttention { relations: vec![att] },
        &GcdVector { g },
        10,
        5,
    );
    let nodes: Vec<usize> = report.rows.iter().map(|r| r.node).collect();
    assert_eq!(nodes, vec![0, 1], "node 2 is isolated and must be excluded");
}

#[test]
fn per_range_single_bin_equals_global_metrics() {
    let scores = [0.2, 0.7, 0.6, 0.1];
    let truth = [false, true, true, false];
    let gcd = [0.31, 0.35, 0.39, 0.33];
    let bins = per_gcd_range_metrics(&scores, &truth, &gcd, 0.1, 0.5);
    assert_eq!(bins.len(), 1);
    assert_eq!(bins[0].metrics, metric_set(&scores, &truth, 0.5));
    assert_eq!(bins[0].n, 4);
}

#[test]
fn per_range_two_bins_match_subset_recompute() {
    let scores = [0.2, 0.7, 0.6, 0.1, 0.9, 0.4];
    let truth = [false, true, true, false, true, false];
    let gcd = [-0.55, -0.52, -0.58, 0.95, 0.92, 0.99];
    let bins = per_gcd_range_metrics(&scores, &truth, &gcd, 0.1, 0.5);
    assert_eq!(bins.len(), 2);
    let low: Vec<usize> = vec![0, 1, 2];
    let high: Vec<usize> = vec![3, 4, 5];
    for (bin, idx) in bins.iter().zip([low, high]) {
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let t: Vec<bool> = idx.iter().map(|&i| truth[i]).collect();
        assert_eq!(bin.metrics, metric_set(&s, &t, 0.5));
    }
}

#[test]
fn per_range_single_class_bin_reports_absent_auc() {
    let scores = [0.2, 0.7];
    let truth = [true, true];
    let gcd = [0.05, 0.01];
    let bins = per_gcd_range_metrics(&scores, &truth, &gcd, 0.1, 0.5);
    assert_eq!(bins.len(), 1);
    assert!(bins[0].metrics.auc.is_none());
}

#[test]
fn per_range_boundary_one_lands_in_last_bin() {
    let scores = [0.5];
    let truth = [true];
    let gcd = [1.0];
    let bins = per_gcd_range_metrics(&scores, &truth, &gcd, 0.1, 0.5);
    assert_eq!(bins.len(), 1);
    assert!((bins[0].hi - 1.0).abs() < 1e-12);
}

#[test]
fn export_embeddings_round_trips() {
    let x = vec![1.5, -2.25, 0.125, 3.0];
    let xm = vec![0.5, 0.5, -1.0, 2.0];
    let labels = vec![Label::Fraud, Label::Benign];
    let path = std::env::temp_dir().join(format!("gcdnet_emb_{}.csv", std::process::id()));
    export_embeddings(&x, &xm, &labels, 2, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::remove_file(&path).ok();

    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "node,label,x_0,x_1,xm_0,xm_1");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    for (i, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 2 + 2 * 2);
        assert_eq!(cols[0].parse::<usize>().unwrap(), i);
        assert_eq!(cols[1].parse::<i64>().unwrap(), labels[i].code());
        for j in 0..2 {
            assert_eq!(cols[2 + j].parse::<f64>().unwrap(), x[i * 2 + j]);
            assert_eq!(cols[4 + j].parse::<f64>().unwrap(), xm[i * 2 + j]);
        }
    }
}
