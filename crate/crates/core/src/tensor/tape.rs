use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::{Array, TensorError};

type BackwardFn = Box<dyn Fn(&Array) -> Vec<Array>>;

struct Node {
    op: &'static str,
    value: Rc<Array>,
    grad: Option<Array>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Records array operations so gradients can be propagated backwards.
///
/// The graph is rebuilt on every forward pass. Nodes are appended in
/// evaluation order, so reverse insertion order is a valid reverse
/// topological order. Gradient buffers accumulate across `backward` calls.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
    poisoned: Cell<Option<(usize, &'static str)>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            poisoned: Cell::new(None),
        }
    }

    /// A tape that evaluates values only. `backward` on it is an error.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input or parameter array.
    pub fn leaf(&self, value: Array) -> Var<'_> {
        self.push("leaf", value, &[], None::<fn(&Array) -> Vec<Array>>)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Array::scalar(value))
    }

    pub(crate) fn push<F>(
        &self,
        op: &'static str,
        value: Array,
        parents: &[Var<'_>],
        backward: Option<F>,
    ) -> Var<'_>
    where
        F: Fn(&Array) -> Vec<Array> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.poisoned.get().is_none() && !value.is_finite() {
            self.poisoned.set(Some((id, op)));
        }
        let (parents, backward) = if self.grad_enabled {
            (
                parents.iter().map(|p| p.id).collect(),
                backward.map(|f| Box::new(f) as BackwardFn),
            )
        } else {
            (Vec::new(), None)
        };
        nodes.push(Node {
            op,
            value: Rc::new(value),
            grad: None,
            parents,
            backward,
        });
        Var { tape: self, id }
    }

    pub fn value(&self, v: Var<'_>) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    /// Accumulated gradient of a node; zeros when nothing reached it.
    pub fn grad(&self, v: Var<'_>) -> Array {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        node.grad
            .clone()
            .unwrap_or_else(|| Array::zeros(node.value.shape()))
    }

    /// Fails if any recorded value is NaN or infinite.
    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.poisoned.get() {
            Some((index, op)) => Err(TensorError::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    /// Propagates d(loss)/d(node) to every node reachable from `loss`,
    /// adding into the persistent gradient buffers.
    pub fn backward(&self, loss: Var<'_>) -> Result<(), TensorError> {
        if !self.grad_enabled {
            return Err(TensorError::GradDisabled);
        }
        self.check_finite()?;
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut adjoints: Vec<Option<Array>> = vec![None; loss.id + 1];
        adjoints[loss.id] = Some(Array::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(upstream) = adjoints[id].take() else {
                continue;
            };
            let node = &mut nodes[id];
            if let Some(backward) = &node.backward {
                let parent_grads = backward(&upstream);
                debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                for (&parent, g) in node.parents.iter().zip(parent_grads) {
                    match &mut adjoints[parent] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            match &mut node.grad {
                Some(acc) => acc.add_assign(&upstream),
                slot @ None => *slot = Some(upstream),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.nodes.borrow();
        f.debug_struct("Tape")
            .field("nodes", &nodes.len())
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// First element; the value of a scalar node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn grad(&self) -> Array {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<(), TensorError> {
        self.tape.backward(*self)
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("op", &node.op)
            .field("shape", &node.value.shape())
            .finish()
    }
}
