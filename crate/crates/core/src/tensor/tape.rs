use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Maps the upstream gradient of a node to gradients for each of its parents
/// (in parent order). `None` means "no contribution".
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Records differentiable operations in execution order.
///
/// A tape is single-threaded and lives for one forward/backward pass.
/// Every op also reports its multiply-accumulate count to the tape, which
/// doubles as the runtime FLOP counter.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    macs: Cell<u64>,
    marks: RefCell<Vec<String>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("recording", &self.recording)
            .field("macs", &self.macs.get())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            macs: Cell::new(0),
            marks: RefCell::new(Vec::new()),
        }
    }

    /// A tape that evaluates values but keeps no backward closures.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients flow into.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf without gradient participation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(Node {
            op: "leaf",
            value: Rc::new(value),
            requires_grad: requires_grad && self.recording,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub(crate) fn push_op(
        &self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'_>],
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'_> {
        let requires_grad = self.recording && parents.iter().any(|p| p.requires_grad());
        self.push_node(Node {
            op,
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn add_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    /// Multiply-accumulates executed on this tape so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    /// Appends a label to the tape's event log.
    pub fn mark(&self, label: impl Into<String>) {
        self.marks.borrow_mut().push(label.into());
    }

    pub fn marks(&self) -> Vec<String> {
        self.marks.borrow().clone()
    }

    /// Reverse-mode sweep from a rank-0 `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.rank() != 0 {
            return Err(Error::Contract(format!(
                "backward needs a rank-0 loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !self.recording {
            return Err(Error::Contract(
                "backward on an inference tape".to_string(),
            ));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));
        let mut visited = Vec::new();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let (lower, upper) = grads.split_at_mut(id);
            let Some(upstream) = upper[0].as_ref() else {
                continue;
            };
            visited.push(id);
            let contributions = backward(upstream);
            debug_assert_eq!(contributions.len(), node.parents.len(), "op {}", node.op);
            for (&parent, contribution) in node.parents.iter().zip(contributions) {
                let Some(g) = contribution else { continue };
                if !nodes[parent].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    nodes[parent].value.shape(),
                    "gradient shape from op {}",
                    node.op
                );
                match &mut lower[parent] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn value_rc(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }
}

/// Gradients produced by one backward sweep, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }

    /// Node ids whose backward closure ran, in the order they ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |nodes| &*nodes[self.id].value)
    }

    pub(crate) fn rc(&self) -> Rc<Tensor> {
        self.tape.value_rc(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        (*self.rc()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.tape.nodes.borrow()[self.id].op
    }
}
