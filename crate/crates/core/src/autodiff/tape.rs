use std::cell::{Cell, Ref, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What a backward rule sees: the gradient flowing into the node's output,
/// the recorded input values, the output value, and which inputs need a gradient.
pub(crate) struct BackwardCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: &'a [Rc<Tensor<T>>],
    pub output: &'a Tensor<T>,
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Records operations in execution order so `backward` can replay them in reverse.
///
/// A tape is single-owner (`!Send`). Independent tapes may live on separate threads.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<Vec<(String, usize)>>,
    grad_enabled: bool,
    consumed: Cell<bool>,
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            grad_enabled: true,
            consumed: Cell::new(false),
        }
    }

    /// A tape that never records backward rules. Used for inference.
    pub fn no_grad() -> Self {
        Tape {
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

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let requires_grad = requires_grad && self.grad_enabled;
        self.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// A leaf bound to a named model parameter; its gradient is reported under `name`.
    pub fn param(&self, name: &str, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let v = self.leaf(value, requires_grad);
        self.params.borrow_mut().push((name.to_string(), v.id));
        v
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| p.requires_grad());
        self.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
        })
    }

    /// Reverse pass from a scalar `loss`. The tape's backward rules are released afterwards.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Contract("tape already consumed by backward()".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
        }
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                if node.parents.is_empty() && node.requires_grad {
                    leaf_grads[id] = Some(g);
                }
                continue;
            };
            let inputs: Vec<Rc<Tensor<T>>> =
                node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let ctx = BackwardCtx {
                grad: &g,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            };
            let parent_grads = rule(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        for node in nodes.iter_mut() {
            node.backward = None;
        }
        let mut by_name: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, id) in self.params.borrow().iter() {
            let node = &nodes[*id];
            if !node.requires_grad {
                continue;
            }
            let g = leaf_grads[*id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
            // A parameter bound more than once collects the sum of its uses.
            match by_name.get_mut(name) {
                Some(acc) => Tensor::add_assign(acc, &g),
                None => {
                    by_name.insert(name.clone(), g);
                }
            }
        }
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        Ok(Gradients {
            leaves: leaf_grads,
            requires,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            by_name,
        })
    }

    fn node_value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    requires: Vec<bool>,
    shapes: Vec<Vec<usize>>,
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf. `None` when the leaf does not require a gradient;
    /// zeros when it does but was unreachable from the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        if !self.requires.get(v.id).copied().unwrap_or(false) {
            return None;
        }
        Some(
            self.leaves[v.id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone())),
        )
    }

    pub fn by_name(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.by_name
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.node_value(self.id)
    }

    /// Borrow the value without cloning the `Rc`.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        let nodes: Ref<'_, Vec<Node<T>>> = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.with_value(|t| t.numel())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> T {
        self.with_value(|t| t.item())
    }

    /// Record `value` computed from `parents`.
    pub(crate) fn derive(
        &self,
        value: Tensor<T>,
        parents: &[Var<'t, T>],
        backward: BackwardFn<T>,
    ) -> Var<'t, T> {
        self.tape.record(value, parents, backward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_scalar_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(5.0), true);
        let y = x.mul_scalar(2.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 2.0);
    }

    #[test]
    fn square_gradient_is_six_at_three() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.param("a", Tensor::scalar(1.0), true);
        let b = tape.param("b", Tensor::from_vec([2], vec![1.0, 2.0]).unwrap(), true);
        let loss = a.mul_scalar(3.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(b).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.by_name()["b"].data(), &[0.0, 0.0]);
        assert_eq!(g.by_name()["a"].item(), 3.0);
    }

    #[test]
    fn frozen_leaf_has_no_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(1.0), false);
        let b = tape.leaf(Tensor::scalar(2.0), true);
        let loss = a.mul(b).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(a).is_none());
        assert_eq!(g.wrt(b).unwrap().item(), 1.0);
    }

    #[test]
    fn non_scalar_root_is_a_contract_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec([2], vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn tape_is_consumed_by_backward() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let y = x.mul_scalar(2.0);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn no_grad_tape_records_no_gradients() {
        let tape = Tape::<f32>::no_grad();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        assert!(!x.requires_grad());
        let y = x.mul_scalar(2.0);
        assert!(!y.requires_grad());
    }
}
