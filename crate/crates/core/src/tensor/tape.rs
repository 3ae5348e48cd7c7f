use std::cell::RefCell;
use std::rc::Rc;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Backward rule: given the output gradient and which inputs need one,
/// returns a gradient per input (`None` where not needed).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of primitive applications. Node ids follow creation order,
/// so reverse id order is a valid reverse topological order.
pub struct Tape<T> {
    nodes: Rc<RefCell<Vec<Node<T>>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Registers a differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        let id = self.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            value,
            node: Some((self.clone(), id)),
        }
    }

    fn same(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }
}

/// A tensor value, optionally attached to a tape node.
#[derive(Clone)]
pub struct Var<T> {
    value: Tensor<T>,
    node: Option<(Tape<T>, usize)>,
}

impl<T: Element> Var<T> {
    /// A value that is not tracked for differentiation.
    pub fn constant(value: Tensor<T>) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.node.as_ref().map(|(t, _)| t)
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    /// Drops the tape link, keeping the value.
    pub fn detach(&self) -> Self {
        Var::constant(self.value.clone())
    }

    /// Records a primitive application. Untracked when no input is on a tape.
    pub(crate) fn record(
        value: Tensor<T>,
        inputs: &[&Var<T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        let mut tape: Option<&Tape<T>> = None;
        for v in inputs {
            if let Some((t, _)) = &v.node {
                match tape {
                    None => tape = Some(t),
                    Some(prev) => assert!(prev.same(t), "inputs recorded on different tapes"),
                }
            }
        }
        let Some(tape) = tape else {
            return Var::constant(value);
        };
        let parents = inputs.iter().map(|v| v.node_id()).collect();
        let id = tape.push(Node {
            parents,
            backward: Some(Box::new(backward)),
        });
        Var {
            value,
            node: Some((tape.clone(), id)),
        }
    }

    /// Reverse sweep from a single-element output. Seeds the output gradient with 1.
    pub fn backward(&self) -> Result<Grads<T>> {
        if self.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        self.backward_with(Tensor::full(self.shape(), T::one()))
    }

    /// Reverse sweep seeded with an explicit output gradient.
    pub fn backward_with(&self, seed: Tensor<T>) -> Result<Grads<T>> {
        if seed.shape() != self.shape() {
            return Err(Error::dim("backward seed", seed.shape(), self.shape()));
        }
        let Some((tape, root)) = &self.node else {
            return Ok(Grads { grads: Vec::new() });
        };
        let nodes = tape.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[*root] = Some(seed);
        for id in (0..=*root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
                let parent_grads = backward(&g, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (parent, pg) in node.parents.iter().zip(parent_grads) {
                    let (Some(p), Some(pg)) = (parent, pg) else { continue };
                    grads[*p] = Some(match grads[*p].take() {
                        None => pg,
                        Some(acc) => accumulate(acc, &pg),
                    });
                }
            }
            if node.backward.is_none() {
                grads[id] = Some(g);
            }
        }
        Ok(Grads { grads })
    }
}

impl<T: std::fmt::Debug> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.value)
            .field("node", &self.node.as_ref().map(|(_, id)| *id))
            .finish()
    }
}

fn accumulate<T: Element>(acc: Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    assert_eq!(acc.shape(), g.shape(), "gradient shape drift");
    let mut data = acc.to_vec();
    for (a, &b) in data.iter_mut().zip(g.data()) {
        *a = *a + b;
    }
    Tensor::raw(acc.shape().to_vec(), data)
}

/// Gradients produced by a reverse sweep. Only leaves retain their gradient.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Grads<T> {
    /// Gradient with respect to `var`; `None` when it did not influence the output.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node_id().and_then(|id| self.grads.get(id)?.as_ref())
    }

    /// Gradient or zeros of the var's shape.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
