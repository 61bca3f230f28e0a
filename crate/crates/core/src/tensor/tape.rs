use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Local derivative rule of a recorded operation.
///
/// `inputs` are the operation's input values in recording order, `output`
/// is the value it produced and `grad` the upstream gradient with the same
/// shape as `output`. Implementations return one entry per input and may
/// skip inputs whose `needs_grad` flag is false.
pub trait Backward {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor>>;
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

struct Node {
    value: Option<Rc<Tensor>>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
    is_param: bool,
}

/// Records operations in creation order for a single reverse sweep.
///
/// A tape is single-use: [`Tape::backward`] frees every node and any later
/// call returns [`Error::TapeConsumed`]. It is deliberately `!Send`; a
/// forward pass and its backward pass run on one thread.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    no_grad: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            no_grad: false,
        }
    }

    /// Forward-only tape: parameters are plain constants, no backward rules
    /// are kept and [`Tape::release`] frees intermediate values.
    pub fn inference() -> Self {
        Tape {
            no_grad: true,
            ..Self::new()
        }
    }

    pub fn is_inference(&self) -> bool {
        self.no_grad
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self.id,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Node {
            value: Some(Rc::new(value)),
            inputs: Vec::new(),
            op: None,
            requires_grad: false,
            is_param: false,
        })
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Var {
        self.push(Node {
            value: Some(Rc::new(value)),
            inputs: Vec::new(),
            op: None,
            requires_grad: !self.no_grad,
            is_param: !self.no_grad,
        })
    }

    /// Appends the result of an operation. The backward rule is kept only
    /// when at least one input participates in differentiation.
    pub fn record(&self, inputs: &[Var], output: Tensor, op: Box<dyn Backward>) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        self.push(Node {
            value: Some(Rc::new(output)),
            inputs: inputs.iter().map(|v| v.id).collect(),
            op: requires_grad.then_some(op),
            requires_grad,
            is_param: false,
        })
    }

    fn check(&self, v: Var) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        if v.tape != self.id || v.id >= self.nodes.borrow().len() {
            return Err(Error::Detached);
        }
        Ok(())
    }

    /// Current value of a recorded variable.
    pub fn value(&self, v: Var) -> Result<Rc<Tensor>> {
        self.check(v)?;
        self.nodes.borrow()[v.id]
            .value
            .as_ref()
            .map(Rc::clone)
            .ok_or_else(|| Error::contract(format!("value {} was released", v.id)))
    }

    /// Drops the value of an intermediate that is no longer needed. Only an
    /// inference tape frees anything; on a gradient tape this is a no-op.
    pub fn release(&self, v: Var) {
        if self.no_grad && v.tape == self.id {
            if let Some(node) = self.nodes.borrow_mut().get_mut(v.id) {
                node.value = None;
            }
        }
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        Ok(self.value(v)?.shape().to_vec())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes
            .borrow()
            .get(v.id)
            .map(|n| n.requires_grad)
            .unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a scalar loss. Visits nodes in strict reverse
    /// creation order and frees each node once it has been processed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.no_grad {
            return Err(Error::contract("backward on an inference tape"));
        }
        self.check(loss)?;
        let loss_shape = self.shape(loss)?;
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {loss_shape:?}"
            )));
        }
        let mut nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(&loss_shape));

        let mut out = HashMap::new();
        for id in (0..=loss.id).rev() {
            let grad = grads[id].take();
            if nodes[id].is_param {
                let value = nodes[id].value.take().expect("leaf value");
                out.insert(id, grad.unwrap_or_else(|| Tensor::zeros(value.shape())));
                continue;
            }
            let op = nodes[id].op.take();
            if let (Some(grad), Some(op)) = (grad, op) {
                let output = nodes[id].value.take().expect("node value");
                let input_ids = std::mem::take(&mut nodes[id].inputs);
                let inputs: Vec<Rc<Tensor>> = input_ids
                    .iter()
                    .map(|&i| Rc::clone(nodes[i].value.as_ref().expect("input value")))
                    .collect();
                let input_refs: Vec<&Tensor> = inputs.iter().map(|t| t.as_ref()).collect();
                let needs: Vec<bool> = input_ids.iter().map(|&i| nodes[i].requires_grad).collect();
                let input_grads = op.backward(&grad, &input_refs, &output, &needs);
                debug_assert_eq!(input_grads.len(), input_ids.len(), "{}", op.name());
                for ((&i, g), need) in input_ids.iter().zip(input_grads).zip(needs) {
                    if let (Some(g), true) = (g, need) {
                        match &mut grads[i] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
            nodes[id].value = None;
        }
        // Parameters created after the loss cannot influence it.
        for (id, node) in nodes.iter().enumerate().skip(loss.id + 1) {
            if node.is_param {
                if let Some(v) = &node.value {
                    out.insert(id, Tensor::zeros(v.shape()));
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }
}

/// Gradients of every `requires_grad` leaf after a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(&v.id)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.remove(&v.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
