//! Tape-based reverse-mode automatic differentiation.
//!
//! A forward pass records one [`Node`] per operation onto a [`Tape`];
//! nodes are appended in evaluation order, so the tape is already a
//! topologically sorted DAG. [`Tape::backward`] walks it once in
//! reverse, accumulating gradients across fan-out and collecting them
//! for every node bound to a [`ParamId`]. Calling `backward` consumes
//! the tape, releasing all recorded activations.
//!
//! Shape errors in op calls are programming errors and panic with both
//! shapes in the message; `backward` returns [`AutodiffError`] for the
//! recoverable misuses (non-scalar loss, value from another tape).

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use thiserror::Error;

use super::ops;
use super::tensor::Tensor;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AutodiffError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("value does not belong to this tape (detached graph)")]
    DetachedGraph,
}

/// Identifies one learnable tensor within a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable tensors owned by a model. Ids are dense indices, so
/// optimizer state can be stored positionally.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, (_, t))| (ParamId(i), t))
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Handle to a value recorded on a tape. Cheap to copy; only valid for
/// the tape that produced it.
#[derive(Debug, Clone, Copy)]
pub struct Val {
    tape: u64,
    node: u32,
}

enum Op {
    Leaf { param: Option<ParamId> },
    Matmul { a: u32, b: u32 },
    Add { a: u32, b: u32 },
    Sub { a: u32, b: u32 },
    Mul { a: u32, b: u32 },
    Scale { a: u32, factor: f64 },
    GradScale { a: u32, factor: f64 },
    Relu { a: u32 },
    Sigmoid { a: u32 },
    Tanh { a: u32 },
    Softmax { a: u32 },
    LayerNorm { x: u32, gamma: u32, beta: u32, normalized: Tensor, inv_std: Vec<f64> },
    Concat { parts: Vec<u32> },
    Slice { a: u32, axis: usize, start: usize },
    Permute { a: u32, perm: Vec<usize> },
    Reshape { a: u32 },
    Dropout { a: u32, mask: Tensor },
    MseLoss { pred: u32, target: u32 },
    SumAll { a: u32 },
}

struct Node {
    value: Tensor,
    op: Op,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// The recording context for one forward/backward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    train: bool,
}

impl Tape {
    /// Tape with train-mode ops active (dropout samples masks).
    pub fn training() -> Self {
        Self::with_mode(true)
    }

    /// Tape with dropout forced to the bitwise identity.
    pub fn inference() -> Self {
        Self::with_mode(false)
    }

    fn with_mode(train: bool) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            train,
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    fn push(&mut self, value: Tensor, op: Op) -> Val {
        self.nodes.push(Node { value, op });
        Val {
            tape: self.id,
            node: (self.nodes.len() - 1) as u32,
        }
    }

    fn idx(&self, v: Val) -> u32 {
        assert_eq!(
            v.tape, self.id,
            "value belongs to tape {} but was used on tape {}",
            v.tape, self.id
        );
        v.node
    }

    fn tensor(&self, v: Val) -> &Tensor {
        let i = self.idx(v);
        &self.nodes[i as usize].value
    }

    /// Read the tensor behind a recorded value.
    pub fn value(&self, v: Val) -> &Tensor {
        self.tensor(v)
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        self.tensor(v).shape()
    }

    /// Records a constant input (no gradient collected).
    pub fn input(&mut self, t: Tensor) -> Val {
        self.push(t, Op::Leaf { param: None })
    }

    /// Binds a parameter tensor; its gradient is collected by `backward`.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Val {
        self.push(t, Op::Leaf { param: Some(id) })
    }

    /// Binds every parameter of a store, in id order.
    pub fn bind(&mut self, store: &ParamStore) -> Vec<Val> {
        store
            .iter()
            .map(|(id, _, t)| self.param(id, t.clone()))
            .collect()
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Val {
        let out = ops::matmul_fwd(self.tensor(a), self.tensor(b));
        let (a, b) = (self.idx(a), self.idx(b));
        self.push(out, Op::Matmul { a, b })
    }

    pub fn add(&mut self, a: Val, b: Val) -> Val {
        let out = ops::add_fwd(self.tensor(a), self.tensor(b));
        let (a, b) = (self.idx(a), self.idx(b));
        self.push(out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Val {
        let out = ops::sub_fwd(self.tensor(a), self.tensor(b));
        let (a, b) = (self.idx(a), self.idx(b));
        self.push(out, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Val {
        let out = ops::mul_fwd(self.tensor(a), self.tensor(b));
        let (a, b) = (self.idx(a), self.idx(b));
        self.push(out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Val, factor: f64) -> Val {
        let out = self.tensor(a).map(|x| x * factor);
        let a = self.idx(a);
        self.push(out, Op::Scale { a, factor })
    }

    /// Identity forward, gradient multiplied by `factor` on the way
    /// back. `factor = 0.0` stops gradients entirely.
    pub fn grad_scale(&mut self, a: Val, factor: f64) -> Val {
        let out = self.tensor(a).clone();
        let a = self.idx(a);
        self.push(out, Op::GradScale { a, factor })
    }

    pub fn relu(&mut self, a: Val) -> Val {
        let out = ops::relu_fwd(self.tensor(a));
        let a = self.idx(a);
        self.push(out, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Val) -> Val {
        let out = ops::sigmoid_fwd(self.tensor(a));
        let a = self.idx(a);
        self.push(out, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Val) -> Val {
        let out = ops::tanh_fwd(self.tensor(a));
        let a = self.idx(a);
        self.push(out, Op::Tanh { a })
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Val) -> Val {
        let out = ops::softmax_fwd(self.tensor(a));
        let a = self.idx(a);
        self.push(out, Op::Softmax { a })
    }

    /// Layer normalization over the last dimension with learned affine.
    pub fn layer_norm(&mut self, x: Val, gamma: Val, beta: Val) -> Val {
        let (out, normalized, inv_std) =
            ops::layer_norm_fwd(self.tensor(x), self.tensor(gamma), self.tensor(beta));
        let (x, gamma, beta) = (self.idx(x), self.idx(gamma), self.idx(beta));
        self.push(
            out,
            Op::LayerNorm { x, gamma, beta, normalized, inv_std },
        )
    }

    /// Concatenation along the last dimension.
    pub fn concat(&mut self, parts: &[Val]) -> Val {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.tensor(v)).collect();
        let out = ops::concat_fwd(&tensors);
        let parts: Vec<u32> = parts.iter().map(|&v| self.idx(v)).collect();
        self.push(out, Op::Concat { parts })
    }

    pub fn slice(&mut self, a: Val, axis: usize, start: usize, len: usize) -> Val {
        let out = ops::slice_fwd(self.tensor(a), axis, start, len);
        let a = self.idx(a);
        self.push(out, Op::Slice { a, axis, start })
    }

    pub fn permute(&mut self, a: Val, perm: &[usize]) -> Val {
        let out = ops::permute_fwd(self.tensor(a), perm);
        let a = self.idx(a);
        self.push(out, Op::Permute { a, perm: perm.to_vec() })
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Val) -> Val {
        let perm = ops::transpose_last_perm(self.tensor(a).ndim());
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Val, shape: impl Into<Vec<usize>>) -> Val {
        let out = self.tensor(a).reshape(shape.into());
        let a = self.idx(a);
        self.push(out, Op::Reshape { a })
    }

    /// Inverted dropout. In inference mode (or at rate 0) this is the
    /// bitwise identity; in train mode kept entries are scaled by
    /// `1/(1-rate)`.
    pub fn dropout(&mut self, a: Val, rate: f64, rng: &mut impl Rng) -> Val {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
        if !self.train || rate == 0.0 {
            return a;
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let x = self.tensor(a);
        let mask = Tensor::from_fn(x.shape().to_vec(), |_| {
            if rng.random::<f64>() >= rate {
                keep_scale
            } else {
                0.0
            }
        });
        let out = ops::mul_fwd(x, &mask);
        let a = self.idx(a);
        self.push(out, Op::Dropout { a, mask })
    }

    /// Mean squared error; gradients flow to both operands.
    pub fn mse_loss(&mut self, pred: Val, target: Val) -> Val {
        let out = ops::mse_fwd(self.tensor(pred), self.tensor(target));
        let (pred, target) = (self.idx(pred), self.idx(target));
        self.push(out, Op::MseLoss { pred, target })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: Val) -> Val {
        let out = Tensor::scalar(self.tensor(a).data().iter().sum());
        let a = self.idx(a);
        self.push(out, Op::SumAll { a })
    }

    /// Runs the reverse sweep from `loss` and returns the gradients of
    /// every bound parameter. Consumes the tape.
    pub fn backward(self, loss: Val) -> Result<Gradients, AutodiffError> {
        if loss.tape != self.id {
            return Err(AutodiffError::DetachedGraph);
        }
        let loss_t = &self.nodes[loss.node as usize].value;
        if !loss_t.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(loss_t.shape().to_vec()));
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.node as usize] = Some(Tensor::scalar(1.0));
        let mut by_param: HashMap<ParamId, Tensor> = HashMap::new();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(id) = param {
                        accumulate_entry(by_param.entry(*id).or_insert_with(|| {
                            Tensor::zeros(node.value.shape().to_vec())
                        }), &g);
                    }
                }
                Op::Matmul { a, b } => {
                    let (da, db) = ops::matmul_vjp(
                        &self.nodes[*a as usize].value,
                        &self.nodes[*b as usize].value,
                        &g,
                    );
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    let db = ops::reduce_to(&g, self.nodes[*b as usize].value.shape());
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, db);
                }
                Op::Sub { a, b } => {
                    let db = ops::reduce_to(&g, self.nodes[*b as usize].value.shape());
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, db.map(|x| -x));
                }
                Op::Mul { a, b } => {
                    let ta = &self.nodes[*a as usize].value;
                    let tb = &self.nodes[*b as usize].value;
                    let da = ops::mul_vjp_a(tb, &g);
                    let db = ops::mul_vjp_b(ta, tb, &g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale { a, factor } => {
                    let f = *factor;
                    accumulate(&mut grads, *a, g.map(|x| x * f));
                }
                Op::GradScale { a, factor } => {
                    let f = *factor;
                    accumulate(&mut grads, *a, g.map(|x| x * f));
                }
                Op::Relu { a } => {
                    let da = ops::relu_vjp(&self.nodes[*a as usize].value, &g);
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid { a } => {
                    let y = &node.value;
                    let da = Tensor::new(
                        y.shape().to_vec(),
                        y.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&s, &gv)| gv * s * (1.0 - s))
                            .collect(),
                    );
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh { a } => {
                    let y = &node.value;
                    let da = Tensor::new(
                        y.shape().to_vec(),
                        y.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&t, &gv)| gv * (1.0 - t * t))
                            .collect(),
                    );
                    accumulate(&mut grads, *a, da);
                }
                Op::Softmax { a } => {
                    let da = ops::softmax_vjp(&node.value, &g);
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm { x, gamma, beta, normalized, inv_std } => {
                    let (dx, dgamma, dbeta) = ops::layer_norm_vjp(
                        normalized,
                        inv_std,
                        &self.nodes[*gamma as usize].value,
                        &g,
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Concat { parts } => {
                    let tensors: Vec<&Tensor> =
                        parts.iter().map(|&p| &self.nodes[p as usize].value).collect();
                    let split = ops::concat_vjp(&tensors, &g);
                    for (&p, dp) in parts.iter().zip(split) {
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::Slice { a, axis, start } => {
                    let da = ops::slice_vjp(
                        self.nodes[*a as usize].value.shape(),
                        *axis,
                        *start,
                        &g,
                    );
                    accumulate(&mut grads, *a, da);
                }
                Op::Permute { a, perm } => {
                    let da = ops::permute_fwd(&g, &ops::invert_perm(perm));
                    accumulate(&mut grads, *a, da);
                }
                Op::Reshape { a } => {
                    let da = g.reshape(self.nodes[*a as usize].value.shape().to_vec());
                    accumulate(&mut grads, *a, da);
                }
                Op::Dropout { a, mask } => {
                    let da = ops::mul_fwd(&g, mask);
                    accumulate(&mut grads, *a, da);
                }
                Op::MseLoss { pred, target } => {
                    let (dp, dt) = ops::mse_vjp(
                        &self.nodes[*pred as usize].value,
                        &self.nodes[*target as usize].value,
                        g.item(),
                    );
                    accumulate(&mut grads, *pred, dp);
                    accumulate(&mut grads, *target, dt);
                }
                Op::SumAll { a } => {
                    let shape = self.nodes[*a as usize].value.shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::filled(shape, g.item()));
                }
            }
        }

        Ok(Gradients { by_param })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: u32, delta: Tensor) {
    match &mut grads[idx as usize] {
        slot @ None => *slot = Some(delta),
        Some(existing) => accumulate_entry(existing, &delta),
    }
}

fn accumulate_entry(existing: &mut Tensor, delta: &Tensor) {
    debug_assert_eq!(existing.shape(), delta.shape());
    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
        *e += d;
    }
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn take(&mut self, id: ParamId) -> Option<Tensor> {
        self.by_param.remove(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, &v| m.max(v.abs()))
    }

    /// Global L2 norm over every parameter gradient.
    pub fn l2_norm(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Scales every gradient in place (used for norm clipping).
    pub fn scale_all(&mut self, factor: f64) {
        for t in self.by_param.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.by_param
            .values()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}
