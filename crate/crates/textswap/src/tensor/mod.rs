//! Minimal reverse-mode autodiff on `ndarray`.
//!
//! Networks in this crate are small and run on CPU, so the engine favors
//! exactness and introspection over raw speed: eager forward evaluation builds
//! a tape of [`Tensor`] nodes, [`Tensor::backward`] walks it once and returns a
//! [`GradStore`] keyed by node id. Everything is generic over [`Scalar`]
//! (`f32` for training, `f64` for finite-difference gradient checks), and all
//! operations are single-threaded and bitwise deterministic.

mod conv;
mod ops;
pub mod optim;

pub use conv::{conv2d_output_hw, conv_transpose2d_output_hw};

use ndarray::{ArrayD, IxDyn};
use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Element type of tensors: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn append_le_bytes(data: &[Self], out: &mut Vec<u8>);
    /// Decodes a little-endian byte slice; `None` if the length is not a
    /// multiple of the element size.
    fn from_le_bytes_vec(bytes: &[u8]) -> Option<Vec<Self>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn append_le_bytes(data: &[Self], out: &mut Vec<u8>) {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn from_le_bytes_vec(bytes: &[u8]) -> Option<Vec<Self>> {
        if bytes.len() % 4 != 0 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn append_le_bytes(data: &[Self], out: &mut Vec<u8>) {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn from_le_bytes_vec(bytes: &[u8]) -> Option<Vec<Self>> {
        if bytes.len() % 8 != 0 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
        )
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind<E> {
    Neg,
    Relu,
    LeakyRelu(E),
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Sqrt,
    Recip,
    Scale(E),
    AddScalar(E),
    SmoothL1(E),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

pub(crate) enum Op<E: Scalar> {
    Leaf,
    Unary {
        x: Tensor<E>,
        kind: UnaryKind<E>,
    },
    Binary {
        a: Tensor<E>,
        b: Tensor<E>,
        kind: BinaryKind,
    },
    BceWithLogits {
        x: Tensor<E>,
        target: Tensor<E>,
    },
    Matmul {
        a: Tensor<E>,
        b: Tensor<E>,
    },
    BatchMatmul {
        a: Tensor<E>,
        b: Tensor<E>,
    },
    SoftmaxLast {
        x: Tensor<E>,
    },
    SumAll {
        x: Tensor<E>,
    },
    MeanAll {
        x: Tensor<E>,
    },
    ReduceAxes {
        x: Tensor<E>,
        axes: Vec<usize>,
        mean: bool,
    },
    Reshape {
        x: Tensor<E>,
    },
    Permute {
        x: Tensor<E>,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Tensor<E>>,
        axis: usize,
    },
    Conv2d {
        x: Tensor<E>,
        w: Tensor<E>,
        b: Option<Tensor<E>>,
        stride: usize,
        pad: usize,
        dilation: usize,
    },
    ConvTranspose2d {
        x: Tensor<E>,
        w: Tensor<E>,
        b: Option<Tensor<E>>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
}

impl<E: Scalar> Op<E> {
    fn parents(&self) -> Vec<&Tensor<E>> {
        match self {
            Op::Leaf => vec![],
            Op::Unary { x, .. }
            | Op::SoftmaxLast { x }
            | Op::SumAll { x }
            | Op::MeanAll { x }
            | Op::ReduceAxes { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. } => vec![x],
            Op::Binary { a, b, .. } | Op::Matmul { a, b } | Op::BatchMatmul { a, b } => {
                vec![a, b]
            }
            Op::BceWithLogits { x, target } => vec![x, target],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                if let Some(b) = b {
                    v.push(b);
                }
                v
            }
        }
    }
}

struct Node<E: Scalar> {
    id: u64,
    value: RefCell<ArrayD<E>>,
    op: Op<E>,
    requires_grad: bool,
}

/// A node in the autodiff graph. Cheap to clone (reference counted).
pub struct Tensor<E: Scalar>(Rc<Node<E>>);

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<E: Scalar> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.0.id, self.shape())
    }
}

impl<E: Scalar> Tensor<E> {
    pub(crate) fn from_op(value: ArrayD<E>, op: Op<E>) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.0.requires_grad);
        Tensor(Rc::new(Node {
            id: fresh_id(),
            value: RefCell::new(value),
            op,
            requires_grad,
        }))
    }

    /// A leaf that does not receive gradients (inputs, targets).
    pub fn constant(value: ArrayD<E>) -> Self {
        Tensor(Rc::new(Node {
            id: fresh_id(),
            value: RefCell::new(value),
            op: Op::Leaf,
            requires_grad: false,
        }))
    }

    /// A trainable leaf; gradients accumulate for it during `backward`.
    pub fn leaf_param(value: ArrayD<E>) -> Self {
        Tensor(Rc::new(Node {
            id: fresh_id(),
            value: RefCell::new(value),
            op: Op::Leaf,
            requires_grad: true,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn value(&self) -> Ref<'_, ArrayD<E>> {
        self.0.value.borrow()
    }

    pub fn to_array(&self) -> ArrayD<E> {
        self.0.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.0.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> E {
        let v = self.0.value.borrow();
        assert_eq!(v.len(), 1, "item() on tensor with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    /// Overwrites the value of a leaf in place (optimizer updates). Panics on
    /// non-leaf nodes or shape changes.
    pub fn set_value(&self, value: ArrayD<E>) {
        assert!(matches!(self.0.op, Op::Leaf), "set_value on non-leaf tensor");
        let mut v = self.0.value.borrow_mut();
        assert_eq!(v.shape(), value.shape(), "set_value shape mismatch");
        *v = value;
    }

    /// Applies `f` to the leaf's value in place.
    pub fn update_value(&self, f: impl FnOnce(&mut ArrayD<E>)) {
        assert!(matches!(self.0.op, Op::Leaf), "update_value on non-leaf tensor");
        f(&mut self.0.value.borrow_mut());
    }

    /// A new constant leaf sharing this tensor's current value; gradients do
    /// not flow past it.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::constant(self.to_array())
    }

    pub fn has_non_finite(&self) -> bool {
        self.0.value.borrow().iter().any(|v| !v.is_finite())
    }

    /// Reverse-mode sweep from a single-element tensor, seeding d(self)=1.
    pub fn backward(&self) -> GradStore<E> {
        assert_eq!(self.len(), 1, "backward() requires a scalar tensor");
        let seed = ArrayD::from_elem(IxDyn(self.shape().as_slice()), E::one());
        self.backward_with(seed)
    }

    pub fn backward_with(&self, seed: ArrayD<E>) -> GradStore<E> {
        assert_eq!(seed.shape(), self.shape().as_slice(), "seed shape mismatch");
        let mut store = GradStore::new();
        if !self.0.requires_grad {
            return store;
        }
        store.accum(self.0.id, seed);

        // Children always have larger ids than their parents, so descending
        // id order is a valid topological order.
        let order = self.collect_reachable();
        for node in order {
            let Some(grad) = store.map.remove(&node.0.id) else {
                continue;
            };
            ops::backprop_node(&node, &grad, &mut store);
            store.map.insert(node.0.id, grad);
        }
        store
    }

    fn collect_reachable(&self) -> Vec<Tensor<E>> {
        let mut seen: HashSet<u64> = HashSet::new();
        let mut out: Vec<Tensor<E>> = Vec::new();
        let mut stack: Vec<Tensor<E>> = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.0.requires_grad || !seen.insert(t.0.id) {
                continue;
            }
            for p in t.0.op.parents() {
                stack.push(p.clone());
            }
            out.push(t);
        }
        out.sort_by(|a, b| b.0.id.cmp(&a.0.id));
        out
    }

    pub(crate) fn op(&self) -> &Op<E> {
        &self.0.op
    }
}

/// Gradients from one backward sweep, keyed by tensor id.
pub struct GradStore<E: Scalar> {
    map: HashMap<u64, ArrayD<E>>,
}

impl<E: Scalar> GradStore<E> {
    fn new() -> Self {
        GradStore { map: HashMap::new() }
    }

    pub fn get(&self, t: &Tensor<E>) -> Option<&ArrayD<E>> {
        self.map.get(&t.id())
    }

    pub(crate) fn accum(&mut self, id: u64, delta: ArrayD<E>) {
        match self.map.entry(id) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                *e.get_mut() += &delta;
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(delta);
            }
        }
    }
}

/// What a parameter is, for initialization policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Conv / deconv / linear weight.
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Attention residual gate (the scalar gamma).
    Gate,
}

/// A named trainable tensor.
#[derive(Clone)]
pub struct Param<E: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<E>,
}

impl<E: Scalar> Param<E> {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: ArrayD<E>) -> Self {
        Param {
            name: name.into(),
            kind,
            tensor: Tensor::leaf_param(value),
        }
    }

    pub fn count(&self) -> usize {
        self.tensor.len()
    }
}

#[cfg(test)]
mod tests;
