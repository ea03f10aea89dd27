use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Inputs handed to a backward rule.
pub(crate) struct Backward<'a> {
    /// Gradient flowing into the node's output.
    pub grad: &'a Tensor,
    /// Forward values of the node's parents, in the order they were recorded.
    pub inputs: &'a [Rc<Tensor>],
    /// Forward value of the node itself.
    pub output: &'a Tensor,
    /// Which parents need a gradient at all.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn = Box<dyn Fn(&Backward<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// A tape of recorded operations for one forward pass.
///
/// Nodes are appended in execution order, so parents always precede their
/// children and reverse insertion order is a valid topological order.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    non_finite: Cell<Option<&'static str>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fails if any recorded forward value contained NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite.get() {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.note_finite("leaf", &value);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn note_finite(&self, op: &'static str, value: &Tensor) {
        if self.non_finite.get().is_none() && !value.is_finite() {
            self.non_finite.set(Some(op));
        }
    }

    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'_>],
        backward: BackwardFn,
    ) -> Var<'_> {
        self.note_finite(op, &value);
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(rule) = &node.backward {
                let inputs: Vec<Rc<Tensor>> =
                    node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect();
                let parent_grads = rule(&Backward {
                    grad: &grad,
                    inputs: &inputs,
                    output: &node.value,
                    needs: &needs,
                });
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                    let Some(g) = g else { continue };
                    if !need {
                        continue;
                    }
                    assert!(p < id, "graph cycle: parent {p} of node {id}");
                    debug_assert_eq!(g.shape(), nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            if node.parents.is_empty() && node.requires_grad {
                grads[id] = Some(grad);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of one backward pass, indexed by the leaves they belong to.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `var`; a zero tensor when `var` does not influence the loss.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        self.grads
            .get(var.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub(crate) fn same_graph(&self, other: &Var<'_>) -> bool {
        std::ptr::eq(self.graph, other.graph)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let g = Graph::new();
        let x = g.param(Tensor::new(&[3], vec![1.0, -2.0, 5.0]).unwrap());
        let grads = g.backward(x.sum()).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares() {
        let g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let grads = g.backward(x.square().sum()).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_param_gets_zeros() {
        let g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let y = g.param(Tensor::ones(&[3, 2]));
        let grads = g.backward(x.sum()).unwrap();
        assert_eq!(grads.get(y), Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let g = Graph::new();
        let x = g.param(Tensor::new(&[1], vec![3.0]).unwrap());
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).data(), &[7.0]);
    }

    #[test]
    fn non_finite_values_are_flagged() {
        let g = Graph::new();
        let x = g.param(Tensor::new(&[1], vec![-1.0]).unwrap());
        let _ = x.log();
        assert!(matches!(g.check_finite(), Err(Error::NonFinite { op: "log" })));
    }
}
