//! The GCD-GNN layer and model: attention weights derived from typical and
//! atypical confidence perspectives, per-node self-feature matrices,
//! message aggregation across relations, and the classifier head.
//!
//! GCD values enter the layer as constants; gradients flow through the
//! message features and all learnable maps, but never back into the
//! prototype path.

use crate::graphstore::{Csr, MultiRelationGraph};
use crate::numkernel::{ParamId, ParamStore, Tape, Var};
use crate::protogcd::{mix_features, project_features, GcdVector, Mlp, Projection};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::Cell;

/// Typical and atypical views of a GCD vector; `g_atyp` is the exact
/// negation of `g_typ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveGcd {
    pub g_typ: Vec<f64>,
    pub g_atyp: Vec<f64>,
}

pub fn perspective_split(gcd: &GcdVector) -> PerspectiveGcd {
    PerspectiveGcd {
        g_typ: gcd.g.clone(),
        g_atyp: gcd.g.iter().map(|g| -g).collect(),
    }
}

/// Attention weights for one relation, aligned with its CSR entry order.
/// Masked (dropped) edges carry weight 0; the rest of each neighborhood
/// sums to 1.
#[derive(Debug, Clone)]
pub struct RelationAttention {
    pub typical: Vec<f64>,
    pub atypical: Vec<f64>,
}

/// Per-relation attention for both perspectives.
#[derive(Debug, Clone)]
pub struct EdgeAttention {
    pub relations: Vec<RelationAttention>,
}

/// Attention weights for one perspective over one relation: logits are
/// LeakyReLU of the neighbor's GCD, normalized per target node. During
/// training each edge is masked with probability `gcd_drop` before the
/// softmax; if every edge of a node gets masked, masking is skipped for
/// that node this pass.
pub fn gcd_attention(
    g_perspective: &[f64],
    csr: &Csr,
    slope: f64,
    gcd_drop: f64,
    training: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Vec<f64> {
    let offsets = csr.offsets();
    let neighbors = csr.neighbor_array();
    let mut weights = vec![0.0; neighbors.len()];
    for node in 0..offsets.len() - 1 {
        let (s, e) = (offsets[node], offsets[node + 1]);
        if s == e {
            continue;
        }
        let mut keep: Vec<bool> = vec![true; e - s];
        if training && gcd_drop > 0.0 {
            let rng = rng.as_deref_mut().expect("training attention drop needs an rng");
            let mut any = false;
            for k in keep.iter_mut() {
                *k = !rng.gen_bool(gcd_drop);
                any |= *k;
            }
            if !any {
                keep.iter_mut().for_each(|k| *k = true);
            }
        }
        let logits: Vec<f64> = neighbors[s..e]
            .iter()
            .map(|&j| {
                let g = g_perspective[j];
                if g > 0.0 {
                    g
                } else {
                    slope * g
                }
            })
            .collect();
        let max = logits
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(l, _)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (idx, (l, k)) in logits.iter().zip(&keep).enumerate() {
            if *k {
                let v = (l - max).exp();
                weights[s + idx] = v;
                total += v;
            }
        }
        for w in &mut weights[s..e] {
            *w /= total;
        }
    }
    weights
}

/// Uniform 1/deg attention for the plain-backbone ablation.
fn uniform_attention(csr: &Csr) -> Vec<f64> {
    let offsets = csr.offsets();
    let mut weights = vec![0.0; csr.entry_count()];
    for node in 0..offsets.len() - 1 {
        let (s, e) = (offsets[node], offsets[node + 1]);
        if s == e {
            continue;
        }
        let w = 1.0 / (e - s) as f64;
        weights[s..e].iter_mut().for_each(|x| *x = w);
    }
    weights
}

/// A learnable map from a node feature to its [d, d'] transformation matrix,
/// flattened row-major: entry (a, b) sits at a*d' + b.
#[derive(Debug, Clone)]
pub struct SelfMatrixGenerator {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl SelfMatrixGenerator {
    /// The generator weight starts at zero and the bias carries the usual
    /// uniform init, so every node initially shares the same matrix
    /// (reshape of the bias) and node dependence is learned. With
    /// `faded: true` the bias starts at zero too and the whole channel
    /// fades in through training.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        faded: bool,
        rng: &mut impl Rng,
    ) -> Self {
        use crate::numkernel::Tensor;
        let bias = if faded {
            store.register(&format!("{name}.bias"), Tensor::zeros(vec![in_dim * out_dim]))
        } else {
            store.register_uniform(&format!("{name}.bias"), vec![in_dim * out_dim], in_dim, rng)
        };
        SelfMatrixGenerator {
            weight: store
                .register(&format!("{name}.weight"), Tensor::zeros(vec![in_dim, in_dim * out_dim])),
            bias,
            in_dim,
            out_dim,
        }
    }
}

/// Generates every node's self matrix in one shot: [n, d*d'].
pub fn self_matrices(tape: &mut Tape, store: &ParamStore, x: Var, gen: &SelfMatrixGenerator) -> Var {
    let w = tape.param(store, gen.weight);
    let b = tape.param(store, gen.bias);
    let flat = tape.matmul(x, w);
    tape.add_row_broadcast(flat, b)
}

/// Message weights for one perspective: either one shared matrix or a
/// per-node generated matrix.
#[derive(Debug, Clone)]
enum MessageMap {
    Shared(ParamId),
    PerNode(SelfMatrixGenerator),
}

/// One GCD-GNN layer: self path, per-relation messages, concat + combine.
#[derive(Debug, Clone)]
pub struct GcdLayer {
    self_transform: ParamId,
    combine_w: ParamId,
    combine_b: ParamId,
    typical: MessageMap,
    atypical: Option<MessageMap>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub use_self_matrix: bool,
    pub use_atypical: bool,
}

fn make_message_map(
    store: &mut ParamStore,
    name: &str,
    which: &str,
    cfg: LayerConfig,
    rng: &mut impl Rng,
) -> MessageMap {
    // the atypical channel starts at zero and fades in, so enabling it can
    // only refine the typical-only model it extends
    let faded = which == "atyp";
    if cfg.use_self_matrix {
        MessageMap::PerNode(SelfMatrixGenerator::new(
            store,
            &format!("{name}.gen_{which}"),
            cfg.in_dim,
            cfg.out_dim,
            faded,
            rng,
        ))
    } else if faded {
        use crate::numkernel::Tensor;
        MessageMap::Shared(store.register(
            &format!("{name}.w_{which}"),
            Tensor::zeros(vec![cfg.in_dim, cfg.out_dim]),
        ))
    } else {
        MessageMap::Shared(store.register_uniform(
            &format!("{name}.w_{which}"),
            vec![cfg.in_dim, cfg.out_dim],
            cfg.in_dim,
            rng,
        ))
    }
}

impl GcdLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: LayerConfig, rng: &mut impl Rng) -> GcdLayer {
        let typical = make_message_map(store, name, "typ", cfg, rng);
        let atypical = if cfg.use_atypical {
            Some(make_message_map(store, name, "atyp", cfg, rng))
        } else {
            None
        };
        GcdLayer {
            self_transform: store.register_uniform(
                &format!("{name}.self"),
                vec![cfg.in_dim, cfg.out_dim],
                cfg.in_dim,
                rng,
            ),
            combine_w: store.register_uniform(
                &format!("{name}.combine_w"),
                vec![2 * cfg.out_dim, cfg.out_dim],
                2 * cfg.out_dim,
                rng,
            ),
            combine_b: store.register_uniform(
                &format!("{name}.combine_b"),
                vec![cfg.out_dim],
                2 * cfg.out_dim,
                rng,
            ),
            typical,
            atypical,
        }
    }

    pub fn scalar_param_count(cfg: LayerConfig) -> usize {
        let map = if cfg.use_self_matrix {
            cfg.in_dim * cfg.in_dim * cfg.out_dim + cfg.in_dim * cfg.out_dim
        } else {
            cfg.in_dim * cfg.out_dim
        };
        let maps = if cfg.use_atypical { 2 * map } else { map };
        let self_t = cfg.in_dim * cfg.out_dim;
        let combine = 2 * cfg.out_dim * cfg.out_dim + cfg.out_dim;
        maps + self_t + combine
    }
}

/// Materialized per-node matrices for one layer pass (tape vars of shape
/// [n, d*d']), or `None` when the layer uses shared matrices.
pub struct SelfMatrices {
    pub typical: Option<Var>,
    pub atypical: Option<Var>,
}

fn generate_self_matrices(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &GcdLayer,
    x_in: Var,
) -> SelfMatrices {
    let gen_for = |tape: &mut Tape, map: &MessageMap| match map {
        MessageMap::PerNode(gen) => Some(self_matrices(tape, store, x_in, gen)),
        MessageMap::Shared(_) => None,
    };
    SelfMatrices {
        typical: gen_for(tape, &layer.typical),
        atypical: layer.atypical.as_ref().and_then(|m| gen_for(tape, m)),
    }
}

/// Messages for one relation: for each perspective, the attention-weighted
/// neighbor sum, transformed by the per-node matrix (or the shared one).
/// Isolated nodes receive a zero message.
fn aggregate_messages(
    tape: &mut Tape,
    store: &ParamStore,
    x_in: Var,
    csr: &Csr,
    attention: &RelationAttention,
    layer: &GcdLayer,
    mats: &SelfMatrices,
) -> Var {
    let n = csr.offsets().len() - 1;
    let sources = csr.neighbor_array();
    let targets: Vec<usize> = (0..n)
        .flat_map(|i| std::iter::repeat(i).take(csr.degree(i)))
        .collect();
    let gathered = tape.gather_rows(x_in, sources);

    let aggregate = |tape: &mut Tape, weights: &[f64], map: &MessageMap, mat: Option<Var>| {
        let alpha = tape.constant(vec![weights.len()], weights.to_vec());
        let weighted = tape.mul_col_broadcast(gathered, alpha);
        let summed = tape.segment_sum_rows(weighted, &targets, n);
        match map {
            MessageMap::Shared(w) => {
                let wv = tape.param(store, *w);
                tape.matmul(summed, wv)
            }
            MessageMap::PerNode(gen) => {
                let mats = mat.expect("per-node matrices not generated");
                tape.bmm_vec(mats, summed, gen.in_dim, gen.out_dim)
            }
        }
    };

    let msg = aggregate(tape, &attention.typical, &layer.typical, mats.typical);
    match &layer.atypical {
        Some(map) => {
            let atyp = aggregate(tape, &attention.atypical, map, mats.atypical);
            tape.add(msg, atyp)
        }
        None => msg,
    }
}

/// One layer forward: per-relation messages summed, concatenated with the
/// transformed self representation, combined and activated.
pub fn layer_forward(
    tape: &mut Tape,
    store: &ParamStore,
    graph: &MultiRelationGraph,
    x_in: Var,
    attention: &EdgeAttention,
    layer: &GcdLayer,
    slope: f64,
) -> Var {
    assert_eq!(
        attention.relations.len(),
        graph.n_relations(),
        "attention built for {} relations, graph has {}",
        attention.relations.len(),
        graph.n_relations()
    );
    let mats = generate_self_matrices(tape, store, layer, x_in);
    let mut total: Option<Var> = None;
    for r in 0..graph.n_relations() {
        let msg = aggregate_messages(
            tape,
            store,
            x_in,
            graph.relation(r),
            &attention.relations[r],
            layer,
            &mats,
        );
        total = Some(match total {
            Some(t) => tape.add(t, msg),
            None => msg,
        });
    }
    let messages = total.expect("graph has at least one relation");
    let u = tape.param(store, layer.self_transform);
    let self_path = tape.matmul(x_in, u);
    let cat = tape.concat_cols(self_path, messages);
    let cw = tape.param(store, layer.combine_w);
    let cb = tape.param(store, layer.combine_b);
    let combined = tape.matmul(cat, cw);
    let combined = tape.add_row_broadcast(combined, cb);
    tape.leaky_relu(combined, slope)
}

/// Classifier head: per-node fraud probability in (0, 1).
pub fn classify(tape: &mut Tape, store: &ParamStore, embeddings: Var, head: &Mlp, slope: f64) -> Var {
    let logits = head.forward(tape, store, embeddings, slope);
    tape.sigmoid(logits)
}

/// Architecture switches resolved from the ablation setting.
#[derive(Debug, Clone, Copy)]
pub struct ModelArch {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    /// Plain mean-aggregation backbone: no projection, mixing or GCD.
    pub backbone: bool,
    pub use_self_matrix: bool,
    pub use_atypical: bool,
    pub slope: f64,
}

/// The full model: projection + gate (unless backbone), GCD-GNN layers, and
/// the classifier head. `gcd_ops` counts every GCD-derived attention build,
/// which the backbone wiring must keep at zero.
pub struct GcdModel {
    pub store: ParamStore,
    pub arch: ModelArch,
    pub projection: Option<Projection>,
    pub gate: Option<Mlp>,
    pub layers: Vec<GcdLayer>,
    pub head: Mlp,
    pub gcd_ops: Cell<u64>,
}

/// Stochastic switches for a training-mode forward.
pub struct TrainMode<'a> {
    pub gcd_drop: f64,
    pub dropout: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl GcdModel {
    pub fn new(arch: ModelArch, rng: &mut ChaCha8Rng) -> GcdModel {
        assert!(arch.in_dim >= 1 && arch.hidden_dim >= 1 && arch.n_layers >= 1);
        let mut store = ParamStore::new();
        let (projection, gate) = if arch.backbone {
            (None, None)
        } else {
            (
                Some(Projection::new(&mut store, arch.in_dim, arch.hidden_dim, arch.slope, rng)),
                Some(Mlp::new(&mut store, "gate", arch.in_dim, arch.hidden_dim, 1, rng)),
            )
        };
        let mut layers = Vec::with_capacity(arch.n_layers);
        for l in 0..arch.n_layers {
            let in_dim = if l == 0 { arch.in_dim } else { arch.hidden_dim };
            layers.push(GcdLayer::new(
                &mut store,
                &format!("layer{l}"),
                LayerConfig {
                    in_dim,
                    out_dim: arch.hidden_dim,
                    use_self_matrix: arch.use_self_matrix && !arch.backbone,
                    use_atypical: arch.use_atypical && !arch.backbone,
                },
                rng,
            ));
        }
        let head = Mlp::new(&mut store, "head", arch.hidden_dim, arch.hidden_dim, 1, rng);
        GcdModel {
            store,
            arch,
            projection,
            gate,
            layers,
            head,
            gcd_ops: Cell::new(0),
        }
    }

    /// Exact scalar parameter count implied by an architecture.
    pub fn expected_param_count(arch: &ModelArch) -> usize {
        let mut total = 0;
        if !arch.backbone {
            // projection MLP + GraphNorm + gate MLP
            total += Mlp::param_count(arch.in_dim, arch.hidden_dim, arch.in_dim);
            total += 3 * arch.in_dim;
            total += Mlp::param_count(arch.in_dim, arch.hidden_dim, 1);
        }
        for l in 0..arch.n_layers {
            let in_dim = if l == 0 { arch.in_dim } else { arch.hidden_dim };
            total += GcdLayer::scalar_param_count(LayerConfig {
                in_dim,
                out_dim: arch.hidden_dim,
                use_self_matrix: arch.use_self_matrix && !arch.backbone,
                use_atypical: arch.use_atypical && !arch.backbone,
            });
        }
        total + Mlp::param_count(arch.hidden_dim, arch.hidden_dim, 1)
    }

    /// Projection-only forward; used for the epoch-level prototype refresh.
    /// Panics on the backbone wiring, which has no projection.
    pub fn project(&self, tape: &mut Tape, graph: &MultiRelationGraph) -> Var {
        let proj = self.projection.as_ref().expect("backbone has no projection network");
        let x = tape.tensor(graph.features());
        project_features(tape, &self.store, x, proj)
    }

    /// Builds both-perspective attention for every relation from frozen GCD
    /// values (or uniform weights for the backbone).
    pub fn build_attention(
        &self,
        graph: &MultiRelationGraph,
        gcd: Option<&GcdVector>,
        mut train: Option<&mut TrainMode>,
    ) -> EdgeAttention {
        let relations = (0..graph.n_relations())
            .map(|r| {
                let csr = graph.relation(r);
                if self.arch.backbone {
                    let uniform = uniform_attention(csr);
                    return RelationAttention { typical: uniform.clone(), atypical: uniform };
                }
                let gcd = gcd.expect("non-backbone forward requires GCD values");
                let perspectives = perspective_split(gcd);
                self.gcd_ops.set(self.gcd_ops.get() + 1);
                let (drop, training) = match train.as_ref() {
                    Some(t) => (t.gcd_drop, true),
                    None => (0.0, false),
                };
                let typical = gcd_attention(
                    &perspectives.g_typ,
                    csr,
                    self.arch.slope,
                    drop,
                    training,
                    train.as_deref_mut().map(|t| &mut *t.rng),
                );
                let atypical = gcd_attention(
                    &perspectives.g_atyp,
                    csr,
                    self.arch.slope,
                    drop,
                    training,
                    train.as_deref_mut().map(|t| &mut *t.rng),
                );
                RelationAttention { typical, atypical }
            })
            .collect();
        EdgeAttention { relations }
    }

    /// Full forward pass: probabilities [n, 1]. GCD values are constants for
    /// the tape; `train` enables attention masking and embedding dropout.
    pub fn forward(
        &self,
        tape: &mut Tape,
        graph: &MultiRelationGraph,
        gcd: Option<&GcdVector>,
        train: Option<&mut TrainMode>,
    ) -> Var {
        self.forward_detailed(tape, graph, gcd, train).probs
    }

    /// Like [`GcdModel::forward`] but also hands back the layer-1 input
    /// (mixed features, or raw features for the backbone) and the attention
    /// weights used.
    pub fn forward_detailed(
        &self,
        tape: &mut Tape,
        graph: &MultiRelationGraph,
        gcd: Option<&GcdVector>,
        mut train: Option<&mut TrainMode>,
    ) -> ForwardArtifacts {
        let attention = self.build_attention(graph, gcd, train.as_deref_mut());
        let x = tape.tensor(graph.features());
        let layer_input = if self.arch.backbone {
            x
        } else {
            let x_exp = project_features(
                tape,
                &self.store,
                x,
                self.projection.as_ref().expect("projection present"),
            );
            let gate = self.gate.as_ref().expect("gate present");
            mix_features(tape, &self.store, x, x_exp, gate, self.arch.slope).x_mixed
        };
        let mut h = layer_input;
        for layer in &self.layers {
            h = layer_forward(tape, &self.store, graph, h, &attention, layer, self.arch.slope);
        }
        if let Some(t) = train.as_deref_mut() {
            if t.dropout > 0.0 {
                let keep = 1.0 - t.dropout;
                let shape = tape.shape(h).to_vec();
                let numel: usize = shape.iter().product();
                let mask: Vec<f64> = (0..numel)
                    .map(|_| if t.rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
                    .collect();
                let mask = tape.constant(shape, mask);
                h = tape.mul(h, mask);
            }
        }
        let probs = classify(tape, &self.store, h, &self.head, self.arch.slope);
        ForwardArtifacts { probs, layer_input, attention }
    }
}

/// Handles produced by one forward pass, for diagnostics and export.
pub struct ForwardArtifacts {
    pub probs: Var,
    pub layer_input: Var,
    pub attention: EdgeAttention,
}
