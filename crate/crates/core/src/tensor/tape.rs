use std::cell::RefCell;
use std::fmt;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Computes input gradients from the output gradient. The flag slice says
/// which inputs actually need one; entries for the others may be `None`.
pub(crate) type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>>>;

struct Node<F: Element> {
    value: Tensor<F>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
    is_param: bool,
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// Nodes are stored in recording order, which is a topological order;
/// [`Tape::backward`] walks them in exact reverse. The tape is never
/// modified by `backward`, so it may be run repeatedly.
pub struct Tape<F: Element = f32> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Element = f32> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<F>) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            is_param: false,
        })
    }

    /// Records a trainable leaf; [`Tape::backward`] reports its gradient.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            is_param: true,
        })
    }

    pub(crate) fn record(
        &self,
        value: Tensor<F>,
        parents: &[Var<'_, F>],
        backward: BackwardFn<F>,
    ) -> Var<'_, F> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            is_param: false,
        })
    }

    fn value(&self, id: usize) -> Tensor<F> {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if !std::ptr::eq(self, loss.tape) {
            return Err(Error::DetachedFromTape);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; loss.id + 1];
        let mut params: Vec<Option<Tensor<F>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.is_param {
                params[id] = Some(grad);
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&parent, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else {
                    continue;
                };
                debug_assert_eq!(
                    g.shape(),
                    nodes[parent].value.shape(),
                    "gradient shape for node {parent}"
                );
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { by_node: params })
    }
}

/// Gradients of a loss with respect to every parameter leaf on a tape.
pub struct Gradients<F: Element> {
    by_node: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    /// Gradient of `param`; zeros when the loss does not depend on it.
    pub fn get(&self, param: Var<'_, F>) -> Tensor<F> {
        self.by_node
            .get(param.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(param.tape.shape(param.id)))
    }

    pub fn contains(&self, param: Var<'_, F>) -> bool {
        matches!(self.by_node.get(param.id), Some(Some(_)))
    }
}

impl<'t, F: Element> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Tensor<F> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn backward(&self) -> Result<Gradients<F>> {
        self.tape.backward(*self)
    }
}

impl<F: Element> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}
