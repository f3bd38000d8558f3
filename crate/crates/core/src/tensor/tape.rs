//! Reverse-mode gradient recording.
//!
//! A [`Tape`] records every primitive applied to [`Var`]s during a forward
//! pass. [`Tape::backprop`] then walks the record backwards once, in exact
//! reverse insertion order (a valid reverse topological order, since a node
//! can only reference nodes created before it).

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    op: &'static str,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    /// Set for named trainable leaves.
    param: Option<String>,
    leaf_shape: Option<Vec<usize>>,
}

struct TapeInner {
    nodes: Vec<Node>,
    recording: bool,
    consumed: bool,
    saturations: usize,
}

/// Single-threaded gradient recorder. Cloning yields another handle to
/// the same record.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// A tensor value living on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: NodeId,
    value: Rc<Tensor>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.value.shape()).finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward closures for trainable inputs.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape on which parameters behave as constants. Forward values are
    /// bit-identical to a recording tape; nothing is retained for backprop.
    pub fn no_grad() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), recording, consumed: false, saturations: 0 })),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Number of likelihood evaluations clamped to their floor so far.
    pub fn saturation_count(&self) -> usize {
        self.inner.borrow().saturations
    }

    pub(crate) fn note_saturations(&self, n: usize) {
        if n > 0 {
            self.inner.borrow_mut().saturations += n;
        }
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push_leaf("constant", value, false, None)
    }

    /// A named trainable leaf. Gradients are reported by name; several
    /// leaves registered under one name have their gradients summed.
    pub fn param(&self, name: &str, value: Tensor) -> Var {
        let rec = self.is_recording();
        self.push_leaf("param", value, rec, Some(name.to_string()))
    }

    /// A constant sharing storage with an existing value.
    pub(crate) fn constant_rc(&self, value: Rc<Tensor>) -> Var {
        self.push_leaf("constant", value, false, None)
    }

    /// An unnamed trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        let rec = self.is_recording();
        self.push_leaf("leaf", value, rec, None)
    }

    fn push_leaf(
        &self,
        op: &'static str,
        value: impl Into<Rc<Tensor>>,
        requires_grad: bool,
        param: Option<String>,
    ) -> Var {
        let value: Rc<Tensor> = value.into();
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param,
            leaf_shape: requires_grad.then(|| value.shape().to_vec()),
        });
        Var { tape: self.clone(), id, value }
    }

    /// Records a primitive. `backward` maps the output gradient to one
    /// gradient per parent, each shaped like that parent's value.
    pub(crate) fn push<F>(&self, op: &'static str, parents: &[&Var], value: impl Into<Rc<Tensor>>, backward: F) -> Var
    where
        F: Fn(&Tensor) -> Vec<Tensor> + 'static,
    {
        for p in parents {
            assert!(p.tape.same_as(self), "{op}: operands live on different tapes");
        }
        let mut inner = self.inner.borrow_mut();
        let requires_grad = inner.recording && parents.iter().any(|p| inner.nodes[p.id].requires_grad);
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            requires_grad,
            param: None,
            leaf_shape: None,
        });
        Var { tape: self.clone(), id, value: value.into() }
    }

    /// Gradient of the scalar `output` with respect to every trainable leaf.
    ///
    /// The record is consumed: a second call on the same tape fails.
    pub fn backprop(&self, output: &Var) -> Result<Gradients> {
        if !output.tape.same_as(self) {
            return Err(Error::contract("backprop output belongs to another tape"));
        }
        if output.value.len() != 1 {
            return Err(Error::contract(format!(
                "backprop needs a scalar output, got shape {:?}",
                output.value.shape()
            )));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::contract("tape already consumed by a previous backprop"));
        }
        inner.consumed = true;

        let n = output.id + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[output.id] = Some(Tensor::full(output.value.shape(), 1.0));
        let mut leaf_grads = HashMap::new();
        let mut visited = Vec::new();

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            visited.push(id);
            match &node.backward {
                None => {
                    leaf_grads.insert(id, g);
                }
                Some(backward) => {
                    let parent_grads = backward(&g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        if !inner.nodes[p].requires_grad {
                            continue;
                        }
                        if pg.has_nan() {
                            return Err(Error::Numeric { node: id, op: node.op });
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
        }

        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        for (id, node) in inner.nodes.iter().enumerate() {
            let (Some(name), Some(shape)) = (&node.param, &node.leaf_shape) else { continue };
            let g = leaf_grads.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(shape));
            match params.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    params.insert(name.clone(), g);
                }
            }
        }
        Ok(Gradients { nodes: leaf_grads, params, visited })
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }
}

/// Result of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: HashMap<NodeId, Tensor>,
    params: BTreeMap<String, Tensor>,
    visited: Vec<NodeId>,
}

impl Gradients {
    /// Gradient for a trainable leaf, `None` if no path reached it.
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.nodes.get(&var.id)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Node ids in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[NodeId] {
        &self.visited
    }
}
