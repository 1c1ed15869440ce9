//! Training loop: class-weighted loss, the epoch schedule (prototype refresh,
//! forward, backward, Adam), early stopping on validation AUC, ablation
//! wiring, and determinism.

use crate::evalkit::{metric_set, MetricSet};
use crate::gcdlayer::{ForwardArtifacts, GcdModel, ModelArch, TrainMode};
use crate::graphstore::{
    stratified_split, AuditedLabels, GraphError, Label, LabelAudit, MultiRelationGraph, Split,
    SplitAssignment,
};
use crate::numkernel::{adam_step, AdamConfig, Tape, Var};
use crate::protogcd::{compute_gcd, init_prototypes, update_prototypes, GcdVector, PrototypeState};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.4, 0.2, 0.4);
const LOSS_EPS: f64 = 1e-12;

/// Model variant of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Plain mean-aggregation GraphSAGE baseline, no GCD machinery.
    Backbone,
    /// Prototypes, feature mixing and typical GCD attention with shared
    /// message matrices (the lightweight variant).
    M1,
    /// M1 plus per-node self-feature matrices.
    M2,
    /// M2 plus the atypical aggregation channel (the full model).
    M3,
}

/// Component switches implied by an [`Ablation`] choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub m1_core: bool,
    pub m2_self_matrix: bool,
    pub m3_dual_perspective: bool,
}

/// Resolves an ablation name (`backbone`, `M1`, `M2`, `M3`) to its wiring.
pub fn configure_ablation(name: &str) -> Result<Ablation, GraphError> {
    match name.to_ascii_lowercase().as_str() {
        "backbone" => Ok(Ablation::Backbone),
        "m1" => Ok(Ablation::M1),
        "m2" => Ok(Ablation::M2),
        "m3" => Ok(Ablation::M3),
        other => Err(GraphError::Config(format!(
            "unknown ablation '{other}' (expected backbone, M1, M2 or M3)"
        ))),
    }
}

impl Ablation {
    pub fn flags(self) -> AblationFlags {
        let (m2, m3) = match self {
            Ablation::Backbone => (false, false),
            Ablation::M1 => (false, false),
            Ablation::M2 => (true, false),
            Ablation::M3 => (true, true),
        };
        AblationFlags { m1_core: self != Ablation::Backbone, m2_self_matrix: m2, m3_dual_perspective: m3 }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Backbone => "backbone",
            Ablation::M1 => "M1",
            Ablation::M2 => "M2",
            Ablation::M3 => "M3",
        }
    }
}

/// Hyperparameters; defaults follow the reference configuration
/// (lr 0.005, batch 1024, dropout 0.292, hidden 64, 1 layer, thres 0.5).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub hidden_dimension: usize,
    pub n_layer: usize,
    pub weight_decay: f64,
    pub thres: f64,
    pub gcd_drop: f64,
    pub tau: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub leaky_slope: f64,
    /// Class-weighted BCE when true; plain mean BCE otherwise.
    pub weighted_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            learning_rate: 0.005,
            batch_size: 1024,
            dropout: 0.292,
            hidden_dimension: 64,
            n_layer: 1,
            weight_decay: 0.0,
            thres: 0.5,
            gcd_drop: 0.0,
            tau: 0.1,
            max_epochs: 100,
            patience: 30,
            seed: 0,
            ablation: Ablation::M3,
            leaky_slope: 0.2,
            weighted_loss: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.learning_rate <= 0.0 {
            return Err(GraphError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.patience < 1 {
            return Err(GraphError::Config("patience must be >= 1".into()));
        }
        if !(self.thres > 0.0 && self.thres < 1.0) {
            return Err(GraphError::Config(format!("thres must be in (0,1), got {}", self.thres)));
        }
        if !(0.0..1.0).contains(&self.gcd_drop) {
            return Err(GraphError::Config(format!("gcd_drop must be in [0,1), got {}", self.gcd_drop)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GraphError::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        if self.tau <= 0.0 {
            return Err(GraphError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.batch_size == 0 || self.hidden_dimension == 0 || self.n_layer == 0 {
            return Err(GraphError::Config(
                "batch_size, hidden_dimension and n_layer must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn arch(&self, in_dim: usize) -> ModelArch {
        let flags = self.ablation.flags();
        ModelArch {
            in_dim,
            hidden_dim: self.hidden_dimension,
            n_layers: self.n_layer,
            backbone: self.ablation == Ablation::Backbone,
            use_self_matrix: flags.m2_self_matrix,
            use_atypical: flags.m3_dual_perspective,
            slope: self.leaky_slope,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Fraud-class weight n_benign / n_fraud over the training split.
pub fn fraud_class_weight(labels: &AuditedLabels) -> f64 {
    let mut fraud = 0usize;
    let mut benign = 0usize;
    for i in 0..labels.n_nodes() {
        if labels.split(i) == Split::Train {
            match labels.label(i) {
                Label::Fraud => fraud += 1,
                Label::Benign => benign += 1,
                Label::Unlabeled => {}
            }
        }
    }
    if fraud == 0 {
        1.0
    } else {
        benign as f64 / fraud as f64
    }
}

/// Class-weighted binary cross-entropy over the labeled nodes of `batch`,
/// normalized by the total weight. Probabilities are clamped to
/// [1e-12, 1-1e-12]. Returns `None` when the batch holds no labeled node.
pub fn loss(
    tape: &mut Tape,
    probs_full: Var,
    batch: &[usize],
    labels: &AuditedLabels,
    fraud_weight: f64,
) -> Option<Var> {
    // canonical node order keeps the summed loss independent of batch
    // shuffling at the last bit
    let mut batch = batch.to_vec();
    batch.sort_unstable();
    let mut rows = Vec::with_capacity(batch.len());
    let mut y = Vec::with_capacity(batch.len());
    let mut w = Vec::with_capacity(batch.len());
    for &i in &batch {
        match labels.label(i) {
            Label::Fraud => {
                rows.push(i);
                y.push(1.0);
                w.push(fraud_weight);
            }
            Label::Benign => {
                rows.push(i);
                y.push(0.0);
                w.push(1.0);
            }
            Label::Unlabeled => {}
        }
    }
    if rows.is_empty() {
        return None;
    }
    let total_w: f64 = w.iter().sum();
    let w_norm: Vec<f64> = w.iter().map(|v| v / total_w).collect();
    let b = rows.len();

    let p = tape.gather_rows(probs_full, &rows);
    let p = tape.clamp(p, LOSS_EPS, 1.0 - LOSS_EPS);
    let yv = tape.constant(vec![b, 1], y.clone());
    let y_inv = tape.constant(vec![b, 1], y.iter().map(|v| 1.0 - v).collect());
    let wv = tape.constant(vec![b, 1], w_norm);

    let ln_p = tape.ln(p);
    let one_minus_p = {
        let n = tape.neg(p);
        tape.add_scalar(n, 1.0)
    };
    let ln_q = tape.ln(one_minus_p);
    let t1 = tape.mul(yv, ln_p);
    let t2 = tape.mul(y_inv, ln_q);
    let s = tape.add(t1, t2);
    let weighted = tape.mul(wv, s);
    let total = tape.sum_all(weighted);
    Some(tape.mul_scalar(total, -1.0))
}

/// Best-epoch bookkeeping: strictly-greater validation AUC wins; stop after
/// `patience` epochs without improvement.
#[derive(Debug)]
pub struct EarlyStopper {
    patience: usize,
    best_auc: f64,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best_auc: f64::NEG_INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Records a trained epoch's validation AUC (absent AUC never improves).
    pub fn observe(&mut self, epoch: usize, auc: Option<f64>) -> StopDecision {
        let auc = auc.unwrap_or(f64::NEG_INFINITY);
        if auc > self.best_auc {
            self.best_auc = auc;
            self.best_epoch = epoch;
            self.since_best = 0;
            StopDecision::Continue
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn improved(&self, epoch: usize) -> bool {
        self.best_epoch == epoch
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricSet,
    /// Wall-clock seconds; non-deterministic, serialized separately from the
    /// primary report.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub ablation: Ablation,
    /// Record 0 is the initial (untrained) evaluation.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub final_test: MetricSet,
    pub skipped_batches: usize,
}

/// Everything a finished fit hands back: trained model, prototype state,
/// split, the report, and the label-audit counters.
pub struct FitResult {
    pub model: GcdModel,
    pub prototypes: Option<PrototypeState>,
    pub split: SplitAssignment,
    pub report: TrainReport,
    pub label_reads: LabelReadCounts,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LabelReadCounts {
    pub train: u64,
    pub valid: u64,
    pub test: u64,
}

pub struct EpochStats {
    pub train_loss: f64,
    pub skipped_batches: usize,
}

/// Refreshes the epoch state (prototypes then GCD) from the current
/// projection. Backbone models have no such state.
fn epoch_state(
    model: &GcdModel,
    graph: &MultiRelationGraph,
    labels: &AuditedLabels,
    prototypes: &mut Option<PrototypeState>,
    tau: f64,
) -> Result<Option<GcdVector>, GraphError> {
    if model.arch.backbone {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let x_exp_var = model.project(&mut tape, graph);
    let x_exp = tape.value(x_exp_var).to_vec();
    let d = graph.feature_dim();
    match prototypes {
        None => *prototypes = Some(init_prototypes(&x_exp, d, labels, tau)?),
        Some(state) => update_prototypes(state, &x_exp, d, labels)?,
    }
    let state = prototypes.as_ref().unwrap();
    model.gcd_ops.set(model.gcd_ops.get() + 1);
    Ok(Some(compute_gcd(state, &x_exp, d, labels)))
}

/// One training epoch: prototype refresh, GCD freeze, then minibatch
/// forward/backward/Adam over the shuffled training nodes.
pub fn train_epoch(
    model: &mut GcdModel,
    graph: &MultiRelationGraph,
    labels: &AuditedLabels,
    prototypes: &mut Option<PrototypeState>,
    cfg: &ModelConfig,
    fraud_weight: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats, GraphError> {
    let gcd = epoch_state(model, graph, labels, prototypes, cfg.tau)?;

    let mut train_nodes: Vec<usize> =
        (0..labels.n_nodes()).filter(|&i| labels.split(i) == Split::Train).collect();
    train_nodes.shuffle(rng);

    let adam_cfg = cfg.adam();
    let mut losses = Vec::new();
    let mut skipped = 0usize;
    for batch in train_nodes.chunks(cfg.batch_size) {
        let mut tape = Tape::new();
        let mut mode = TrainMode { gcd_drop: cfg.gcd_drop, dropout: cfg.dropout, rng };
        let probs = model.forward(&mut tape, graph, gcd.as_ref(), Some(&mut mode));
        let Some(batch_loss) = loss(&mut tape, probs, batch, labels, fraud_weight) else {
            skipped += 1;
            continue;
        };
        losses.push(tape.scalar_value(batch_loss));
        tape.backward(batch_loss);
        tape.write_grads(&mut model.store);
        adam_step(&mut model.store, &adam_cfg);
    }
    let train_loss = if losses.is_empty() {
        f64::NAN
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    Ok(EpochStats { train_loss, skipped_batches: skipped })
}

/// Deterministic evaluation forward: recomputes the GCD from the stored
/// prototypes and the current parameters, with no stochastic masking.
pub fn eval_forward(
    model: &GcdModel,
    graph: &MultiRelationGraph,
    prototypes: Option<&PrototypeState>,
    labels: &AuditedLabels,
) -> (Vec<f64>, Option<GcdVector>, ForwardArtifacts, Tape) {
    let gcd = if model.arch.backbone {
        None
    } else {
        let state = prototypes.expect("non-backbone evaluation requires prototypes");
        let mut tape = Tape::new();
        let x_exp_var = model.project(&mut tape, graph);
        let x_exp = tape.value(x_exp_var);
        model.gcd_ops.set(model.gcd_ops.get() + 1);
        Some(compute_gcd(state, x_exp, graph.feature_dim(), labels))
    };
    let mut tape = Tape::new();
    let artifacts = model.forward_detailed(&mut tape, graph, gcd.as_ref(), None);
    let probs = tape.value(artifacts.probs).to_vec();
    (probs, gcd, artifacts, tape)
}

/// Metrics over one split. Ground-truth labels are read directly from the
/// graph: this is evaluation, not training.
pub fn evaluate_split(
    probs: &[f64],
    graph: &MultiRelationGraph,
    split: &SplitAssignment,
    which: Split,
    thres: f64,
) -> MetricSet {
    let nodes = split.nodes_in(which);
    let scores: Vec<f64> = nodes.iter().map(|&i| probs[i]).collect();
    let truth: Vec<bool> = nodes.iter().map(|&i| graph.label(i) == Label::Fraud).collect();
    metric_set(&scores, &truth, thres)
}

/// Loss over the full training split in evaluation mode (no updates); used
/// for the initial report record.
fn eval_train_loss(
    model: &GcdModel,
    graph: &MultiRelationGraph,
    labels: &AuditedLabels,
    prototypes: Option<&PrototypeState>,
    fraud_weight: f64,
) -> f64 {
    let gcd = if model.arch.backbone {
        None
    } else {
        let state = prototypes.expect("prototypes required");
        let mut tape = Tape::new();
        let x_exp_var = model.project(&mut tape, graph);
        let x_exp = tape.value(x_exp_var);
        model.gcd_ops.set(model.gcd_ops.get() + 1);
        Some(compute_gcd(state, x_exp, graph.feature_dim(), labels))
    };
    let train_nodes: Vec<usize> =
        (0..labels.n_nodes()).filter(|&i| labels.split(i) == Split::Train).collect();
    let mut tape = Tape::new();
    let probs = model.forward(&mut tape, graph, gcd.as_ref(), None);
    match loss(&mut tape, probs, &train_nodes, labels, fraud_weight) {
        Some(l) => tape.scalar_value(l),
        None => f64::NAN,
    }
}

/// Trains with early stopping on validation AUC, restores the best epoch's
/// parameters (and prototypes), and evaluates the test split once.
pub fn fit(graph: &MultiRelationGraph, cfg: &ModelConfig) -> Result<FitResult, GraphError> {
    cfg.validate()?;
    let split = stratified_split(graph, SPLIT_RATIOS, cfg.seed)?;
    let audit = LabelAudit::new();
    let labels = AuditedLabels::new(graph.labels(), &split, &audit);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = GcdModel::new(cfg.arch(graph.feature_dim()), &mut rng);
    let fraud_weight = if cfg.weighted_loss { fraud_class_weight(&labels) } else { 1.0 };
    let mut prototypes: Option<PrototypeState> = None;

    // initial evaluation (epoch 0): prototypes at their initial class means
    let t0 = Instant::now();
    if !model.arch.backbone {
        let mut tape = Tape::new();
        let x_exp_var = model.project(&mut tape, graph);
        let x_exp = tape.value(x_exp_var).to_vec();
        prototypes = Some(init_prototypes(&x_exp, graph.feature_dim(), &labels, cfg.tau)?);
    }
    let initial_loss = eval_train_loss(&model, graph, &labels, prototypes.as_ref(), fraud_weight);
    let (probs0, _, _, _) = eval_forward(&model, graph, prototypes.as_ref(), &labels);
    let val0 = evaluate_split(&probs0, graph, &split, Split::Valid, cfg.thres);
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_loss: initial_loss,
        val: val0,
        seconds: t0.elapsed().as_secs_f64(),
    }];

    let mut best_snapshot = (model.store.snapshot(), prototypes.clone());
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut skipped_batches = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let t = Instant::now();
        let stats =
            train_epoch(&mut model, graph, &labels, &mut prototypes, cfg, fraud_weight, &mut rng)?;
        skipped_batches += stats.skipped_batches;
        let (probs, _, _, _) = eval_forward(&model, graph, prototypes.as_ref(), &labels);
        let val = evaluate_split(&probs, graph, &split, Split::Valid, cfg.thres);
        let auc = val.auc;
        epochs.push(EpochRecord {
            epoch,
            train_loss: stats.train_loss,
            val,
            seconds: t.elapsed().as_secs_f64(),
        });
        let decision = stopper.observe(epoch, auc);
        if stopper.improved(epoch) {
            best_snapshot = (model.store.snapshot(), prototypes.clone());
        }
        if decision == StopDecision::Stop {
            break;
        }
    }

    model.store.restore(&best_snapshot.0);
    prototypes = best_snapshot.1;

    let (probs, _, _, _) = eval_forward(&model, graph, prototypes.as_ref(), &labels);
    let final_test = evaluate_split(&probs, graph, &split, Split::Test, cfg.thres);

    let report = TrainReport {
        seed: cfg.seed,
        ablation: cfg.ablation,
        epochs,
        best_epoch: stopper.best_epoch(),
        final_test,
        skipped_batches,
    };
    Ok(FitResult {
        model,
        prototypes,
        split,
        report,
        label_reads: LabelReadCounts {
            train: audit.train_reads(),
            valid: audit.valid_reads(),
            test: audit.test_reads(),
        },
    })
}

#[cfg(test)]
mod tests;
