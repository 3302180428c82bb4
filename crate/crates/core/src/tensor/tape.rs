use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// What a backward rule sees when the tape replays an operation.
pub(crate) struct GradCtx<'a, S: Scalar> {
    pub inputs: &'a [Rc<Tensor<S>>],
    pub output: &'a Tensor<S>,
    /// Upstream gradient, same length as `output`.
    pub gout: &'a [S],
    /// Which inputs need a gradient at all.
    pub needs: &'a [bool],
}

/// Returns one optional gradient buffer per input, in input order.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&GradCtx<'_, S>) -> Result<Vec<Option<Vec<S>>>>>;

struct Node<S: Scalar> {
    value: Rc<Tensor<S>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    requires_grad: bool,
}

/// Linear record of operations, appended in execution order.
///
/// Node ids are assigned in creation order, so the node list is already a
/// topological order and the reverse sweep visits each node once.
pub struct Tape<S: Scalar = f32> {
    nodes: RefCell<Vec<Node<S>>>,
    leaf_grads: RefCell<BTreeMap<usize, Vec<S>>>,
    tracking: bool,
    macs: Cell<u64>,
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, S: Scalar = f32> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<S: Scalar> Copy for Var<'_, S> {}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(BTreeMap::new()),
            tracking: true,
            macs: Cell::new(0),
        }
    }

    /// A tape that records values only; nothing on it can be differentiated.
    pub fn no_grad() -> Self {
        Tape {
            tracking: false,
            ..Tape::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts a leaf. Gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<'_, S> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.tracking,
        })
    }

    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, true)
    }

    fn push(&self, node: Node<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Appends the result of an operation on `inputs`.
    pub(crate) fn record(
        &self,
        inputs: &[Var<'_, S>],
        value: Tensor<S>,
        backward: impl Fn(&GradCtx<'_, S>) -> Result<Vec<Option<Vec<S>>>> + 'static,
    ) -> Result<Var<'_, S>> {
        for v in inputs {
            if !std::ptr::eq(v.tape, self) {
                return Err(Error::Tracking("operand belongs to another tape".into()));
            }
        }
        #[cfg(debug_assertions)]
        {
            let finite_in = inputs.iter().all(|v| v.value().is_finite());
            debug_assert!(
                !finite_in || value.is_finite(),
                "non-finite output from finite inputs"
            );
        }
        let requires_grad = self.tracking && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        let backward: Option<BackwardFn<S>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        Ok(self.push(Node {
            value: Rc::new(value),
            parents: inputs.iter().map(|v| v.id).collect(),
            backward,
            requires_grad,
        }))
    }

    pub(crate) fn add_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    /// Multiply-accumulates performed by conv, linear and matmul ops so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    /// Propagates d(root)/d(leaf) into every leaf that requires a gradient.
    ///
    /// Leaf gradients add into whatever earlier calls left behind; call
    /// [`Tape::zero_grads`] to reset them.
    pub fn backward(&self, root: Var<'_, S>) -> Result<()> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::Tracking("root was not recorded on this tape".into()));
        }
        if !self.tracking {
            return Err(Error::Tracking("backward on a no-grad tape".into()));
        }
        let nodes = self.nodes.borrow();
        if root.id >= nodes.len() {
            return Err(Error::Tracking("root id out of range".into()));
        }
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        if !root_node.requires_grad {
            return Err(Error::Tracking(
                "root does not depend on any tracked leaf".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<S>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![S::one()]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    if node.requires_grad && node.parents.is_empty() {
                        match leaf_grads.get_mut(&id) {
                            Some(acc) => add_into(acc, &g),
                            None => {
                                leaf_grads.insert(id, g);
                            }
                        }
                    }
                }
                Some(rule) => {
                    let inputs: Vec<Rc<Tensor<S>>> = node
                        .parents
                        .iter()
                        .map(|&p| Rc::clone(&nodes[p].value))
                        .collect();
                    let needs: Vec<bool> =
                        node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let ctx = GradCtx {
                        inputs: &inputs,
                        output: &node.value,
                        gout: &g,
                        needs: &needs,
                    };
                    let parent_grads = rule(&ctx)?;
                    for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        if pg.len() != nodes[p].value.len() {
                            return Err(Error::shape(format!(
                                "backward produced {} gradient values for a {}-element input",
                                pg.len(),
                                nodes[p].value.len()
                            )));
                        }
                        match &mut grads[p] {
                            Some(acc) => add_into(acc, &pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var<'_, S>) -> Option<Tensor<S>> {
        let g = self.leaf_grads.borrow().get(&v.id).cloned()?;
        Tensor::new(&v.shape(), g).ok()
    }

    pub fn zero_grads(&self) {
        self.leaf_grads.borrow_mut().clear();
    }
}

fn add_into<S: Scalar>(acc: &mut [S], g: &[S]) {
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<S>> {
        self.tape.grad(*self)
    }
}
