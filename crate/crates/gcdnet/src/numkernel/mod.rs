//! Dense numeric core: 64-bit tensors, trainable parameters, a tape for
//! reverse-mode differentiation, and an Adam optimizer.
//!
//! Everything is f64 and row-major. Forward passes record primitive
//! operations on a [`Tape`]; [`Tape::backward`] replays them in reverse and
//! accumulates gradients into the bound [`Parameter`]s.

mod adam;
mod tape;

pub use adam::{adam_step, AdamConfig};
pub use tape::{graph_norm, Tape, Var};

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from raw data; panics unless `product(shape) == data.len()`.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(
            delta.len(),
            self.data.len(),
            "gradient length {} does not match tensor numel {}",
            delta.len(),
            self.data.len()
        );
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// A trainable tensor plus its Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(tensor: Tensor) -> Self {
        let n = tensor.numel();
        Parameter {
            tensor: tensor.with_requires_grad(),
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
        }
    }
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat registry of named parameters. Models hold `ParamId`s; the store owns
/// the data, which keeps optimizer steps and checkpointing trivial.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Parameter>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(Parameter::new(tensor));
        self.names.push(name.to_string());
        id
    }

    /// Registers a matrix or vector initialized uniformly in
    /// [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn register_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut impl rand::Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.register(name, Tensor::from_vec(shape, data))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Copies all parameter values into one flat vector (store order).
    pub fn snapshot(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for p in &self.entries {
            out.extend_from_slice(p.tensor.data());
        }
        out
    }

    /// Restores values written by [`ParamStore::snapshot`].
    pub fn restore(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for p in &mut self.entries {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "snapshot length mismatch");
    }
}
