//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! A forward pass records one [`Op`] per primitive into a [`Tape`]; calling
//! [`Tape::backward`] on a scalar output replays the records in reverse and
//! accumulates adjoints. Parameters are bound onto the tape with
//! [`Tape::param`]; [`Tape::write_grads`] copies their adjoints back into the
//! owning [`ParamStore`].
//!
//! Shapes are validated eagerly; a mismatch is a programming error and
//! panics with both shapes in the message.

use super::{ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// C[m,n] = A[m,k] * B[k,n]
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Neg { a: usize },
    Sqrt { a: usize },
    Ln { a: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, c: f64 },
    LeakyRelu { a: usize, slope: f64 },
    Sigmoid { a: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    /// [d] -> [n,d], each row a copy.
    RowBroadcast { a: usize, rows: usize },
    /// [n,d] + [d] per row.
    AddRowBroadcast { a: usize, v: usize },
    /// [n,d] -> [d], mean over rows.
    ColMean { a: usize },
    /// out[i,j] = x[i,j] * s[i], s of shape [n] (or [n,1]).
    MulColBroadcast { a: usize, s: usize },
    /// Softmax within contiguous segments given by `offsets`.
    SegmentSoftmax { a: usize, offsets: Vec<usize> },
    /// out[e,:] = x[idx[e],:]
    GatherRows { a: usize, idx: Vec<usize> },
    /// out[targets[e],:] += x[e,:]
    SegmentSumRows { a: usize, targets: Vec<usize>, n_out: usize },
    /// out[i,p] = sum_a vecs[i,a] * mats[i, a*dp + p]; mats is [n, d*dp] row-major.
    BmmVec { mats: usize, vecs: usize, d: usize, dp: usize },
    ConcatCols { a: usize, b: usize },
    SumAll { a: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Ordered record of primitive operations for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Vec<f64>>,
    bindings: Vec<(ParamId, Var)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node { shape, data });
        self.ops.push(op);
        Var(id)
    }

    /// Records a constant leaf (no gradient will be requested from it).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "constant shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        self.push(shape, data, Op::Leaf)
    }

    pub fn tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    /// Binds a parameter as a leaf; its adjoint is written back by
    /// [`Tape::write_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.tensor(&store.get(id).tensor);
        self.bindings.push((id, v));
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Scalar value of a 1-element variable.
    pub fn scalar_value(&self, v: Var) -> f64 {
        assert_eq!(self.nodes[v.0].data.len(), 1, "expected scalar variable");
        self.nodes[v.0].data[0]
    }

    /// Adjoint of `v` from the most recent [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            2 => (s[0], s[1]),
            1 => (1, s[0]),
            _ => panic!("expected 1-D or 2-D tensor, got shape {:?}", s),
        }
    }

    fn assert_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "{what}: shape {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
    }

    // ── Elementwise and scalar ops ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "div");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x / y)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Div { a: a.0, b: b.0 })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| -x).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Neg { a: a.0 })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.sqrt()).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Sqrt { a: a.0 })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Ln { a: a.0 })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::AddScalar { a: a.0 })
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::MulScalar { a: a.0, c })
    }

    /// Elementwise max(x, slope*x); the subgradient at 0 is `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        assert!(slope > 0.0 && slope < 1.0, "leaky_relu slope must be in (0,1), got {slope}");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::LeakyRelu { a: a.0, slope })
    }

    /// Numerically stable logistic function.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| stable_sigmoid(x)).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Sigmoid { a: a.0 })
    }

    /// Clamps into [lo, hi]; gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.clamp(lo, hi)).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Clamp { a: a.0, lo, hi })
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.rows_cols(a);
        let (kb, n) = self.rows_cols(b);
        assert_eq!(
            k, kb,
            "matmul: inner dimensions disagree, {:?} x {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        self.push(vec![m, n], data, Op::Matmul { a: a.0, b: b.0, m, k, n })
    }

    /// Broadcasts a [d] vector into [rows, d].
    pub fn row_broadcast(&mut self, a: Var, rows: usize) -> Var {
        let d = self.nodes[a.0].data.len();
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(&self.nodes[a.0].data);
        }
        self.push(vec![rows, d], data, Op::RowBroadcast { a: a.0, rows })
    }

    /// Adds a [d] vector to every row of an [n, d] matrix.
    pub fn add_row_broadcast(&mut self, a: Var, v: Var) -> Var {
        let (n, d) = self.rows_cols(a);
        assert_eq!(
            self.nodes[v.0].data.len(),
            d,
            "add_row_broadcast: row length {:?} vs vector {:?}",
            self.nodes[a.0].shape, self.nodes[v.0].shape
        );
        let vd = &self.nodes[v.0].data;
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += vd[j];
            }
        }
        self.push(vec![n, d], data, Op::AddRowBroadcast { a: a.0, v: v.0 })
    }

    /// Column means of an [n, d] matrix, as a [d] vector.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let (n, d) = self.rows_cols(a);
        assert!(n >= 1, "col_mean on empty matrix");
        let ad = &self.nodes[a.0].data;
        let mut out = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                out[j] += ad[i * d + j];
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        self.push(vec![d], out, Op::ColMean { a: a.0 })
    }

    /// Scales row i of an [n, d] matrix by s[i]; `s` has shape [n] or [n, 1].
    pub fn mul_col_broadcast(&mut self, a: Var, s: Var) -> Var {
        let (n, d) = self.rows_cols(a);
        assert_eq!(
            self.nodes[s.0].data.len(),
            n,
            "mul_col_broadcast: matrix {:?} vs scale {:?}",
            self.nodes[a.0].shape, self.nodes[s.0].shape
        );
        let sd = &self.nodes[s.0].data;
        let ad = &self.nodes[a.0].data;
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] = ad[i * d + j] * sd[i];
            }
        }
        self.push(vec![n, d], data, Op::MulColBroadcast { a: a.0, s: s.0 })
    }

    // ── Graph / segment ops ─────────────────────────────────────────────

    /// Softmax within each contiguous segment `[offsets[k], offsets[k+1])` of
    /// a flat logit vector. Uses max-subtraction; empty segments are skipped.
    pub fn segment_softmax(&mut self, logits: Var, offsets: &[usize]) -> Var {
        let ln = self.nodes[logits.0].data.len();
        assert_eq!(
            *offsets.last().expect("offsets must be non-empty"),
            ln,
            "segment offsets end {} does not cover {} logits",
            offsets.last().unwrap(),
            ln
        );
        let data = segment_softmax_values(&self.nodes[logits.0].data, offsets);
        self.push(
            self.nodes[logits.0].shape.clone(),
            data,
            Op::SegmentSoftmax { a: logits.0, offsets: offsets.to_vec() },
        )
    }

    /// Gathers rows of an [n, d] matrix: out[e, :] = x[idx[e], :].
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (n, d) = self.rows_cols(a);
        let ad = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < n, "gather_rows: index {i} out of range for {n} rows");
            data.extend_from_slice(&ad[i * d..(i + 1) * d]);
        }
        self.push(vec![idx.len(), d], data, Op::GatherRows { a: a.0, idx: idx.to_vec() })
    }

    /// Scatter-adds rows of an [e, d] matrix into [n_out, d] buckets:
    /// out[targets[e], :] += x[e, :]. Rows with no contributions are zero.
    pub fn segment_sum_rows(&mut self, a: Var, targets: &[usize], n_out: usize) -> Var {
        let (e, d) = self.rows_cols(a);
        assert_eq!(
            targets.len(),
            e,
            "segment_sum_rows: {} targets for {} rows",
            targets.len(),
            e
        );
        let ad = &self.nodes[a.0].data;
        let mut data = vec![0.0; n_out * d];
        for (row, &t) in targets.iter().enumerate() {
            assert!(t < n_out, "segment_sum_rows: target {t} out of range for {n_out}");
            for j in 0..d {
                data[t * d + j] += ad[row * d + j];
            }
        }
        self.push(
            vec![n_out, d],
            data,
            Op::SegmentSumRows { a: a.0, targets: targets.to_vec(), n_out },
        )
    }

    /// Per-row vector-matrix product: out[i, :] = vecs[i, :] · mats[i]
    /// where mats row i holds a [d, dp] matrix flattened row-major.
    pub fn bmm_vec(&mut self, mats: Var, vecs: Var, d: usize, dp: usize) -> Var {
        let (n, md) = self.rows_cols(mats);
        let (nv, vd) = self.rows_cols(vecs);
        assert_eq!(
            (n, md, vd),
            (nv, d * dp, d),
            "bmm_vec: mats {:?} vecs {:?} incompatible with d={d}, dp={dp}",
            self.nodes[mats.0].shape, self.nodes[vecs.0].shape
        );
        let m = &self.nodes[mats.0].data;
        let v = &self.nodes[vecs.0].data;
        let mut data = vec![0.0; n * dp];
        for i in 0..n {
            for a in 0..d {
                let x = v[i * d + a];
                if x == 0.0 {
                    continue;
                }
                let base = i * d * dp + a * dp;
                for p in 0..dp {
                    data[i * dp + p] += x * m[base + p];
                }
            }
        }
        self.push(vec![n, dp], data, Op::BmmVec { mats: mats.0, vecs: vecs.0, d, dp })
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (n, da) = self.rows_cols(a);
        let (nb, db) = self.rows_cols(b);
        assert_eq!(
            n, nb,
            "concat_cols: row counts disagree, {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut data = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            data.extend_from_slice(&ad[i * da..(i + 1) * da]);
            data.extend_from_slice(&bd[i * db..(i + 1) * db]);
        }
        self.push(vec![n, da + db], data, Op::ConcatCols { a: a.0, b: b.0 })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll { a: a.0 })
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Panics if `loss` is not a
    /// 1-element tensor.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].data.len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[loss.0].shape
        );
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        self.grads[loss.0][0] = 1.0;

        for (out, op) in self.ops.iter().enumerate().rev() {
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b, m, k, n } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    // dA += gO * B^T ; dB += A^T * gO
                    let (bd, ad) = (&self.nodes[*b].data, &self.nodes[*a].data);
                    let (m, k, n) = (*m, *k, *n);
                    {
                        let ga = &mut self.grads[*a];
                        for i in 0..m {
                            for j in 0..n {
                                let g = go[i * n + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    ga[i * k + p] += g * bd[p * n + j];
                                }
                            }
                        }
                    }
                    {
                        let gb = &mut self.grads[*b];
                        for p in 0..k {
                            for i in 0..m {
                                let av = ad[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[p * n + j] += av * go[i * n + j];
                                }
                            }
                        }
                    }
                    self.grads[out] = go;
                }
                Op::Add { a, b } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    accumulate(&mut self.grads[*a], &go, |g| g);
                    accumulate(&mut self.grads[*b], &go, |g| g);
                    self.grads[out] = go;
                }
                Op::Sub { a, b } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    accumulate(&mut self.grads[*a], &go, |g| g);
                    accumulate(&mut self.grads[*b], &go, |g| -g);
                    self.grads[out] = go;
                }
                Op::Mul { a, b } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    for (i, g) in go.iter().enumerate() {
                        self.grads[*a][i] += g * self.nodes[*b].data[i];
                    }
                    for (i, g) in go.iter().enumerate() {
                        self.grads[*b][i] += g * self.nodes[*a].data[i];
                    }
                    self.grads[out] = go;
                }
                Op::Div { a, b } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    for (i, g) in go.iter().enumerate() {
                        let bv = self.nodes[*b].data[i];
                        self.grads[*a][i] += g / bv;
                        self.grads[*b][i] -= g * self.nodes[*a].data[i] / (bv * bv);
                    }
                    self.grads[out] = go;
                }
                Op::Neg { a } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    accumulate(&mut self.grads[*a], &go, |g| -g);
                    self.grads[out] = go;
                }
                Op::Sqrt { a } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    for (i, g) in go.iter().enumerate() {
                        let y = self.nodes[out].data[i];
                        self.grads[*a][i] += g / (2.0 * y);
                    }
                    self.grads[out] = go;
                }
                Op::Ln { a } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    for (i, g) in go.iter().enumerate() {
                        self.grads[*a][i] += g / self.nodes[*a].data[i];
                    }
                    self.grads[out] = go;
                }
                Op::AddScalar { a } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    accumulate(&mut self.grads[*a], &go, |g| g);
                    self.grads[out] = go;
                }
                Op::MulScalar { a, c } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    let c = *c;
                    accumulate(&mut self.grads[*a], &go, |g| g * c);
                    self.grads[out] = go;
                }
                Op::LeakyRelu { a, slope } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    for (i, g) in go.iter().enumerate() {
                        let x = self.nodes[*a].data[i];
                        let f = if x > 0.0 { 1.0 } else { *slope };
                        self.grads[*a][i] += g * f;
                    }
                    self.grads[out] = go;
                }
                Op::Sigmoid { a } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    for (i, g) in go.iter().enumerate() {
                        let y = self.nodes[out].data[i];
                        self.grads[*a][i] += g * y * (1.0 - y);
                    }
                    self.grads[out] = go;
                }
                Op::Clamp { a, lo, hi } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    for (i, g) in go.iter().enumerate() {
                        let x = self.nodes[*a].data[i];
                        if x > *lo && x < *hi {
                            self.grads[*a][i] += g;
                        }
                    }
                    self.grads[out] = go;
                }
                Op::RowBroadcast { a, rows } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    let d = self.nodes[*a].data.len();
                    for i in 0..*rows {
                        for j in 0..d {
                            self.grads[*a][j] += go[i * d + j];
                        }
                    }
                    self.grads[out] = go;
                }
                Op::AddRowBroadcast { a, v } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    accumulate(&mut self.grads[*a], &go, |g| g);
                    let d = self.nodes[*v].data.len();
                    let n = go.len() / d;
                    for i in 0..n {
                        for j in 0..d {
                            self.grads[*v][j] += go[i * d + j];
                        }
                    }
                    self.grads[out] = go;
                }
                Op::ColMean { a } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    let d = go.len();
                    let n = self.nodes[*a].data.len() / d;
                    let inv = 1.0 / n as f64;
                    for i in 0..n {
                        for j in 0..d {
                            self.grads[*a][i * d + j] += go[j] * inv;
                        }
                    }
                    self.grads[out] = go;
                }
                Op::MulColBroadcast { a, s } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    let n = self.nodes[*s].data.len();
                    let d = go.len() / n;
                    for i in 0..n {
                        let sv = self.nodes[*s].data[i];
                        let mut dot = 0.0;
                        for j in 0..d {
                            let g = go[i * d + j];
                            self.grads[*a][i * d + j] += g * sv;
                            dot += g * self.nodes[*a].data[i * d + j];
                        }
                        self.grads[*s][i] += dot;
                    }
                    self.grads[out] = go;
                }
                Op::SegmentSoftmax { a, offsets } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    // dl_e = y_e * (g_e - sum_e' g_e' * y_e') within each segment
                    for w in offsets.windows(2) {
                        let (s, e) = (w[0], w[1]);
                        if s == e {
                            continue;
                        }
                        let mut dot = 0.0;
                        for i in s..e {
                            dot += go[i] * self.nodes[out].data[i];
                        }
                        for i in s..e {
                            let y = self.nodes[out].data[i];
                            self.grads[*a][i] += y * (go[i] - dot);
                        }
                    }
                    self.grads[out] = go;
                }
                Op::GatherRows { a, idx } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    let d = if idx.is_empty() { 0 } else { go.len() / idx.len() };
                    for (row, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            self.grads[*a][i * d + j] += go[row * d + j];
                        }
                    }
                    self.grads[out] = go;
                }
                Op::SegmentSumRows { a, targets, n_out } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    let d = go.len() / n_out;
                    for (row, &t) in targets.iter().enumerate() {
                        for j in 0..d {
                            self.grads[*a][row * d + j] += go[t * d + j];
                        }
                    }
                    self.grads[out] = go;
                }
                Op::BmmVec { mats, vecs, d, dp } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    let (d, dp) = (*d, *dp);
                    let n = go.len() / dp;
                    for i in 0..n {
                        for a in 0..d {
                            let base = i * d * dp + a * dp;
                            let xv = self.nodes[*vecs].data[i * d + a];
                            let mut acc = 0.0;
                            for p in 0..dp {
                                let g = go[i * dp + p];
                                acc += g * self.nodes[*mats].data[base + p];
                                self.grads[*mats][base + p] += xv * g;
                            }
                            self.grads[*vecs][i * d + a] += acc;
                        }
                    }
                    self.grads[out] = go;
                }
                Op::ConcatCols { a, b } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    let da = {
                        let s = &self.nodes[*a].shape;
                        s[s.len() - 1]
                    };
                    let db = {
                        let s = &self.nodes[*b].shape;
                        s[s.len() - 1]
                    };
                    let n = go.len() / (da + db);
                    for i in 0..n {
                        for j in 0..da {
                            self.grads[*a][i * da + j] += go[i * (da + db) + j];
                        }
                        for j in 0..db {
                            self.grads[*b][i * db + j] += go[i * (da + db) + da + j];
                        }
                    }
                    self.grads[out] = go;
                }
                Op::SumAll { a } => {
                    let go = std::mem::take(&mut self.grads[out]);
                    let g = go[0];
                    for x in self.grads[*a].iter_mut() {
                        *x += g;
                    }
                    self.grads[out] = go;
                }
            }
        }
    }

    /// Accumulates adjoints of bound parameters into their `grad` buffers.
    /// Must be called after [`Tape::backward`].
    pub fn write_grads(&self, store: &mut ParamStore) {
        assert!(!self.grads.is_empty(), "write_grads before backward");
        for (pid, var) in &self.bindings {
            store.get_mut(*pid).tensor.accumulate_grad(&self.grads[var.0]);
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], f: impl Fn(f64) -> f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += f(*s);
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Value-level segment softmax shared by the tape op and the attention code.
pub(crate) fn segment_softmax_values(logits: &[f64], offsets: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for w in offsets.windows(2) {
        let (s, e) = (w[0], w[1]);
        if s == e {
            continue;
        }
        let max = logits[s..e].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in s..e {
            let v = (logits[i] - max).exp();
            out[i] = v;
            sum += v;
        }
        for o in &mut out[s..e] {
            *o /= sum;
        }
    }
    out
}

/// Graph normalization: per column j,
/// `out = gamma_j * (x_j - alpha_j * mean(x_j)) / sqrt(var_j + eps) + beta_j`
/// where `var_j` is the population variance of the shifted column. Built from
/// tape primitives, so it differentiates through the statistics.
pub fn graph_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, alpha: Var, eps: f64) -> Var {
    let (n, _d) = tape.rows_cols(x);
    let mu = tape.col_mean(x);
    let shift = tape.mul(alpha, mu);
    let shift_b = tape.row_broadcast(shift, n);
    let centered = tape.sub(x, shift_b);
    let c_mu = tape.col_mean(centered);
    let c_mu_b = tape.row_broadcast(c_mu, n);
    let dev = tape.sub(centered, c_mu_b);
    let dev2 = tape.mul(dev, dev);
    let var = tape.col_mean(dev2);
    let var_eps = tape.add_scalar(var, eps);
    let std = tape.sqrt(var_eps);
    let std_b = tape.row_broadcast(std, n);
    let normed = tape.div(centered, std_b);
    let gamma_b = tape.row_broadcast(gamma, n);
    let scaled = tape.mul(gamma_b, normed);
    let beta_b = tape.row_broadcast(beta, n);
    tape.add(scaled, beta_b)
}
