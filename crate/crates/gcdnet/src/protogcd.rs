//! Feature projection, iterative per-class prototype extraction, per-node
//! global confidence degree (GCD), and sigmoid-gated feature mixing.
//!
//! Prototypes and GCD live in the projected feature space. They are refreshed
//! once per epoch from training labels and treated as constants by the tape:
//! no gradient flows from the attention path back into the prototype math.

use crate::graphstore::{AuditedLabels, GraphError, Label, Split};
use crate::numkernel::{graph_norm, ParamId, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

/// Single-hidden-layer perceptron with a LeakyReLU after the first layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl rand::Rng,
    ) -> Mlp {
        Mlp {
            w1: store.register_uniform(&format!("{name}.w1"), vec![in_dim, hidden], in_dim, rng),
            b1: store.register_uniform(&format!("{name}.b1"), vec![hidden], in_dim, rng),
            w2: store.register_uniform(&format!("{name}.w2"), vec![hidden, out_dim], hidden, rng),
            b2: store.register_uniform(&format!("{name}.b2"), vec![out_dim], hidden, rng),
            in_dim,
            hidden,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, slope: f64) -> Var {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(x, w1);
        let h = tape.add_row_broadcast(h, b1);
        let h = tape.leaky_relu(h, slope);
        let o = tape.matmul(h, w2);
        tape.add_row_broadcast(o, b2)
    }

    pub fn param_count(in_dim: usize, hidden: usize, out_dim: usize) -> usize {
        in_dim * hidden + hidden + hidden * out_dim + out_dim
    }
}

/// GraphNorm parameters, initialized to gamma=1, beta=0, alpha=1.
#[derive(Debug, Clone)]
pub struct GraphNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub alpha: ParamId,
}

impl GraphNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> GraphNormParams {
        use crate::numkernel::Tensor;
        GraphNormParams {
            gamma: store.register(&format!("{name}.gamma"), Tensor::from_vec(vec![dim], vec![1.0; dim])),
            beta: store.register(&format!("{name}.beta"), Tensor::from_vec(vec![dim], vec![0.0; dim])),
            alpha: store.register(&format!("{name}.alpha"), Tensor::from_vec(vec![dim], vec![1.0; dim])),
        }
    }
}

/// The projection network: an MLP mapping d -> d, followed by GraphNorm.
#[derive(Debug, Clone)]
pub struct Projection {
    pub mlp: Mlp,
    pub norm: GraphNormParams,
    pub eps: f64,
    pub slope: f64,
}

impl Projection {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        hidden: usize,
        slope: f64,
        rng: &mut impl rand::Rng,
    ) -> Projection {
        Projection {
            mlp: Mlp::new(store, "proj", dim, hidden, dim, rng),
            norm: GraphNormParams::new(store, "proj.norm", dim),
            eps: 1e-5,
            slope,
        }
    }
}

/// Projects raw features into the prototype space: GraphNorm(MLP(x)).
pub fn project_features(tape: &mut Tape, store: &ParamStore, x: Var, proj: &Projection) -> Var {
    let h = proj.mlp.forward(tape, store, x, proj.slope);
    let gamma = tape.param(store, proj.norm.gamma);
    let beta = tape.param(store, proj.norm.beta);
    let alpha = tape.param(store, proj.norm.alpha);
    graph_norm(tape, h, gamma, beta, alpha, proj.eps)
}

/// The per-class prototype pair plus iteration bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeState {
    pub mu_fraud: Vec<f64>,
    pub mu_benign: Vec<f64>,
    pub tau: f64,
    pub epoch: u32,
}

/// Cosine similarity with a zero-vector convention: if either norm is below
/// 1e-12 the similarity is 0. The result is clamped into [-1, 1] so rounding
/// can never push it outside the cosine range.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn train_class_nodes(labels: &AuditedLabels, class: Label) -> Vec<usize> {
    (0..labels.n_nodes())
        .filter(|&i| labels.split(i) == Split::Train && labels.label(i) == class)
        .collect()
}

/// Class means of the projected features over training nodes.
pub fn init_prototypes(
    x_exp: &[f64],
    dim: usize,
    labels: &AuditedLabels,
    tau: f64,
) -> Result<PrototypeState, GraphError> {
    if tau <= 0.0 {
        return Err(GraphError::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut prototypes = Vec::with_capacity(2);
    for class in [Label::Fraud, Label::Benign] {
        let nodes = train_class_nodes(labels, class);
        if nodes.is_empty() {
            return Err(GraphError::Config(format!(
                "no training nodes of class {class:?}; cannot build a prototype"
            )));
        }
        let mut mu = vec![0.0; dim];
        for &i in &nodes {
            for j in 0..dim {
                mu[j] += x_exp[i * dim + j];
            }
        }
        for m in &mut mu {
            *m /= nodes.len() as f64;
        }
        prototypes.push(mu);
    }
    let mu_benign = prototypes.pop().unwrap();
    let mu_fraud = prototypes.pop().unwrap();
    Ok(PrototypeState { mu_fraud, mu_benign, tau, epoch: 0 })
}

/// One iterative refinement: per class, softmax(cos(x, mu_prev)/tau) weights
/// over that class's training nodes, then the weighted feature sum.
pub fn update_prototypes(
    state: &mut PrototypeState,
    x_exp: &[f64],
    dim: usize,
    labels: &AuditedLabels,
) -> Result<(), GraphError> {
    if state.tau <= 0.0 {
        return Err(GraphError::Config(format!(
            "temperature must be positive, got {}",
            state.tau
        )));
    }
    for class in [Label::Fraud, Label::Benign] {
        let nodes = train_class_nodes(labels, class);
        if nodes.is_empty() {
            return Err(GraphError::Config(format!(
                "no training nodes of class {class:?}; cannot update its prototype"
            )));
        }
        let prev = match class {
            Label::Fraud => &state.mu_fraud,
            _ => &state.mu_benign,
        };
        let sims: Vec<f64> = nodes
            .iter()
            .map(|&i| cosine_similarity(&x_exp[i * dim..(i + 1) * dim], prev))
            .collect();
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sims.iter().map(|s| ((s - max) / state.tau).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut mu = vec![0.0; dim];
        for (&node, e) in nodes.iter().zip(&exps) {
            let w = e / total;
            for j in 0..dim {
                mu[j] += w * x_exp[node * dim + j];
            }
        }
        match class {
            Label::Fraud => state.mu_fraud = mu,
            _ => state.mu_benign = mu,
        }
    }
    state.epoch += 1;
    Ok(())
}

/// Per-node GCD values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GcdVector {
    pub g: Vec<f64>,
}

/// GCD per node: training nodes compare against their own class prototype;
/// everything else (unlabeled, validation, test) takes the better of the two
/// prototypes, so no label outside the training split is ever read.
pub fn compute_gcd(
    state: &PrototypeState,
    x_exp: &[f64],
    dim: usize,
    labels: &AuditedLabels,
) -> GcdVector {
    let g = (0..labels.n_nodes())
        .map(|i| {
            let x = &x_exp[i * dim..(i + 1) * dim];
            if labels.split(i) == Split::Train {
                match labels.label(i) {
                    Label::Fraud => cosine_similarity(&state.mu_fraud, x),
                    Label::Benign => cosine_similarity(&state.mu_benign, x),
                    Label::Unlabeled => unreachable!("train split contains only labeled nodes"),
                }
            } else {
                cosine_similarity(&state.mu_fraud, x).max(cosine_similarity(&state.mu_benign, x))
            }
        })
        .collect();
    GcdVector { g }
}

/// Mixed features and the gate that produced them.
pub struct MixedFeatures {
    /// Per-node mixing weight in (0, 1), shape [n, 1].
    pub lambda: Var,
    /// lambda * x_exp + (1 - lambda) * x, shape [n, d].
    pub x_mixed: Var,
}

/// Blends raw and projected features with a learned per-node gate:
/// lambda = sigmoid(gate(x)).
pub fn mix_features(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    x_exp: Var,
    gate: &Mlp,
    slope: f64,
) -> MixedFeatures {
    let pre = gate.forward(tape, store, x, slope);
    let lambda = tape.sigmoid(pre);
    let one_minus = {
        let n = tape.neg(lambda);
        tape.add_scalar(n, 1.0)
    };
    let a = tape.mul_col_broadcast(x_exp, lambda);
    let b = tape.mul_col_broadcast(x, one_minus);
    let x_mixed = tape.add(a, b);
    MixedFeatures { lambda, x_mixed }
}
