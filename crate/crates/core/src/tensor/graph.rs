//! Recording graph for reverse-mode differentiation.
//!
//! A `Graph` is one logical execution context: tensors produced by its ops
//! are immutable, and the backward closures captured at record time hold
//! shared references to whatever forward values they need. Distinct graphs
//! (e.g. one per episode) are fully independent.

use alloc::boxed::Box;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) type BackFn<T> = Box<dyn Fn(&[T], &mut GradStore<T>)>;

struct NodeRec<T> {
    back: Option<BackFn<T>>,
}

/// Recording context. `Graph::new()` records backward closures;
/// `Graph::eval()` runs the same ops without recording.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<NodeRec<T>>>,
    recording: bool,
    id: u64,
}

/// Handle to a tensor inside a graph. `node == None` marks a constant that
/// receives no gradient.
#[derive(Clone, Debug)]
pub struct Var<T: Scalar> {
    pub value: Tensor<T>,
    pub(crate) node: Option<usize>,
    pub(crate) graph: u64,
}

impl<T: Scalar> Var<T> {
    pub fn dims(&self) -> &[usize] {
        self.value.dims()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub(crate) fn shared(&self) -> Arc<Vec<T>> {
        self.value.shared_data()
    }

    /// Same buffer and node under a new shape.
    pub fn reshape(&self, dims: &[usize]) -> Result<Var<T>> {
        Ok(Var {
            value: self.value.reshape(dims)?,
            node: self.node,
            graph: self.graph,
        })
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
        }
    }

    /// Non-recording context for inference.
    pub fn eval() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: false,
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Tracked leaf: participates in differentiation.
    pub fn var(&self, value: Tensor<T>) -> Var<T> {
        if !self.recording {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(NodeRec { back: None });
        Var {
            value,
            node: Some(id),
            graph: self.id,
        }
    }

    /// Untracked constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            value,
            node: None,
            graph: self.id,
        }
    }

    pub(crate) fn check(&self, v: &Var<T>, op: &'static str) -> Result<()> {
        if v.node.is_some() && v.graph != self.id {
            return Err(Error::Eval(format!(
                "{op}: tensor belongs to a different execution context"
            )));
        }
        Ok(())
    }

    /// Records a computed node. When not recording (or no input is tracked),
    /// the caller should pass `record = false` and gets a constant back.
    pub(crate) fn push(&self, value: Tensor<T>, record: bool, back: BackFn<T>) -> Var<T> {
        if !(self.recording && record) {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(NodeRec { back: Some(back) });
        Var {
            value,
            node: Some(id),
            graph: self.id,
        }
    }

    pub(crate) fn any_tracked(&self, vars: &[&Var<T>]) -> bool {
        self.recording && vars.iter().any(|v| v.node.is_some())
    }

    /// Reverse pass from a scalar loss. Gradients for leaves (and only
    /// leaves) are retained in the returned store.
    pub fn backward(&self, loss: &Var<T>) -> Result<GradStore<T>> {
        let loss_node = loss.node.ok_or_else(|| {
            Error::Eval("backward: loss is not tracked in this context".into())
        })?;
        if loss.value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got dims {:?}", loss.value.dims()),
            });
        }
        if !loss.value.data()[0].is_finite() {
            return Err(Error::Eval("backward: non-finite loss".into()));
        }
        let nodes = self.nodes.borrow();
        let mut store = GradStore {
            slots: vec![Vec::new(); nodes.len()],
        };
        store.slots[loss_node] = vec![T::one()];
        for i in (0..=loss_node).rev() {
            let grad = core::mem::take(&mut store.slots[i]);
            if grad.is_empty() {
                continue;
            }
            match &nodes[i].back {
                Some(back) => back(&grad, &mut store),
                None => store.slots[i] = grad, // leaf: keep for the caller
            }
        }
        Ok(store)
    }

    #[cfg(test)]
    pub(crate) fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

/// Per-node gradient buffers; an empty slot means zero gradient.
pub struct GradStore<T> {
    slots: Vec<Vec<T>>,
}

impl<T: Scalar> GradStore<T> {
    /// Gradient of the loss w.r.t. a leaf, if any flowed into it.
    pub fn get(&self, v: &Var<T>) -> Option<&[T]> {
        let id = v.node?;
        let slot = &self.slots[id];
        if slot.is_empty() {
            None
        } else {
            Some(slot)
        }
    }

    /// Accumulates into a node's slot (no-op for constants).
    pub(crate) fn accumulate(&mut self, node: Option<usize>, len: usize, f: impl FnOnce(&mut [T])) {
        let Some(id) = node else { return };
        let slot = &mut self.slots[id];
        if slot.is_empty() {
            slot.resize(len, T::zero());
        }
        f(slot);
    }
}
