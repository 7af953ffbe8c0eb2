//! Dense rank-1/2 tensors with reverse-mode differentiation on an explicit
//! Wengert tape.
//!
//! A [`Tensor`] is an immutable value plus an optional gradient accumulator;
//! a [`Tape`] records executed operations with parent links and local-gradient
//! closures. Ops record themselves only when some input participates in
//! gradient flow, so inference-time calls carry no tape overhead. Each
//! training run owns its tape; nothing here is shared global state.

pub(crate) mod kernels;
pub mod gradcheck;
pub mod ops;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    /// (tape id, node id) once this tensor has been touched by a recorded op.
    node: Cell<Option<(u64, usize)>>,
}

/// Dense 64-bit tensor; cheap to clone (shared storage). Values are immutable
/// after construction, only the gradient accumulator mutates.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Domain {
                op: "tensor",
                message: format!("rank must be 1 or 2, got shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "tensor",
                message: "non-finite value in tensor data".to_string(),
            });
        }
        Ok(Tensor(Rc::new(Inner {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            node: Cell::new(None),
        })))
    }

    /// Constant tensor (not differentiated).
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        Self::build(shape, data, false)
    }

    /// Trainable tensor: participates in gradient flow as a leaf.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        Self::build(shape, data, true)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Self::from_vec(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Tensor> {
        let len = data.len();
        Self::from_vec(vec![len], data)
    }

    pub fn scalar_value(v: f64) -> Result<Tensor> {
        Self::from_vec(vec![1], vec![v])
    }

    /// Internal constructor for op outputs; shapes are already validated and
    /// op outputs on finite inputs stay finite by construction.
    fn output(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Inner {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            node: Cell::new(None),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    /// Row count; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        if self.0.shape.len() == 2 {
            self.0.shape[0]
        } else {
            1
        }
    }

    /// Column count; for rank-1 this is the length.
    pub fn cols(&self) -> usize {
        *self.0.shape.last().expect("tensor rank >= 1")
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// The single value of a scalar tensor.
    pub fn value(&self) -> f64 {
        assert!(self.is_scalar(), "value() on non-scalar tensor");
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Copy of the accumulated gradient, if any backward pass reached this
    /// tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Clears the gradient accumulator.
    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A constant copy cut off from gradient flow.
    pub fn detach(&self) -> Tensor {
        Tensor::output(self.0.shape.clone(), self.0.data.clone(), false)
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }
}

/// Per-node gradient buffers keyed by node id. Slots materialize as zeroed
/// storage on first touch so backward closures can accumulate in place.
pub(crate) struct GradStore {
    slots: Vec<Vec<f64>>,
}

impl GradStore {
    fn new(n: usize) -> GradStore {
        GradStore {
            slots: vec![Vec::new(); n],
        }
    }

    pub(crate) fn slot(&mut self, node: usize, len: usize) -> &mut [f64] {
        let s = &mut self.slots[node];
        if s.is_empty() {
            s.resize(len, 0.0);
        }
        debug_assert_eq!(s.len(), len);
        s
    }

    fn take(&mut self, node: usize) -> Vec<f64> {
        std::mem::take(&mut self.slots[node])
    }

    fn is_set(&self, node: usize) -> bool {
        !self.slots[node].is_empty()
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &mut GradStore)>;

struct Node {
    tensor: Tensor,
    backward: Option<BackwardFn>,
}

/// Ordered record of differentiable operations for one forward pass. Nodes
/// are appended in execution order, so every node's parents precede it and a
/// single reverse sweep visits each node exactly once.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node id of `t` on this tape, registering it as a leaf if it is a
    /// trainable tensor seen for the first time. `None` means `t` does not
    /// participate in gradient flow here.
    pub(crate) fn input_id(&self, t: &Tensor) -> Option<usize> {
        if let Some((tape_id, node_id)) = t.0.node.get() {
            if tape_id == self.id {
                return Some(node_id);
            }
        }
        if !t.0.requires_grad {
            return None;
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            tensor: t.clone(),
            backward: None,
        });
        t.0.node.set(Some((self.id, id)));
        Some(id)
    }

    /// Records `out` as produced by an op whose local gradients are applied
    /// by `backward`.
    pub(crate) fn record(&self, out: Tensor, backward: BackwardFn) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            tensor: out.clone(),
            backward: Some(backward),
        });
        out.0.node.set(Some((self.id, id)));
        out
    }

    /// Reverse pass from a scalar loss. Every `requires_grad` tensor reachable
    /// from `loss` gets its gradient accumulator populated; repeated calls
    /// without `zero_grad` accumulate.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::Contract {
                op: "backward",
                message: format!("loss must be scalar, got shape {:?}", loss.shape()),
            });
        }
        let loss_node = match loss.0.node.get() {
            Some((tape_id, node_id)) if tape_id == self.id => node_id,
            _ => {
                return Err(Error::Contract {
                    op: "backward",
                    message: "loss was not produced on this tape".to_string(),
                })
            }
        };

        let nodes = self.nodes.borrow();
        let mut store = GradStore::new(nodes.len());
        store.slot(loss_node, 1)[0] = 1.0;

        for id in (0..=loss_node).rev() {
            if !store.is_set(id) {
                continue;
            }
            let upstream = store.take(id);
            let node = &nodes[id];
            if node.tensor.0.requires_grad {
                node.tensor.accumulate_grad(&upstream);
            }
            if let Some(backward) = &node.backward {
                backward(&upstream, &mut store);
            }
        }
        Ok(())
    }
}
