use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use super::param::Param;
use super::Scalar;

/// Everything a backward closure may look at: the upstream gradient, the
/// parent values and the node's own output value.
pub struct BackwardCtx<'a, F: Scalar> {
    pub grad: &'a ArrayD<F>,
    pub parents: &'a [Rc<ArrayD<F>>],
    pub output: &'a ArrayD<F>,
}

pub(crate) type GradFn<F> = Box<dyn Fn(&BackwardCtx<'_, F>) -> Vec<Option<ArrayD<F>>>>;

struct Node<F: Scalar> {
    value: Rc<ArrayD<F>>,
    parents: Vec<usize>,
    grad_fn: Option<GradFn<F>>,
    requires_grad: bool,
    is_param: bool,
}

/// Define-by-run computation graph. One tape records one forward pass; drop
/// it to release all intermediates.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    // param uid -> node id, so a parameter used twice maps to a single leaf
    param_leaves: RefCell<HashMap<u64, usize>>,
}

/// Handle to a node on a tape. Copyable; all operators live on this type.
pub struct Tensor<'g, F: Scalar> {
    pub(crate) tape: &'g Tape<F>,
    pub(crate) id: usize,
}

impl<F: Scalar> Clone for Tensor<'_, F> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<F: Scalar> Copy for Tensor<'_, F> {}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            param_leaves: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf holding a constant input; gradients do not flow into it.
    pub fn input(&self, value: ArrayD<F>) -> Tensor<'_, F> {
        self.push(value, vec![], None, false, false)
    }

    /// Leaf for a trainable parameter. Repeated registration of the same
    /// parameter returns the same node.
    pub fn param(&self, p: &Param<F>) -> Tensor<'_, F> {
        if let Some(&id) = self.param_leaves.borrow().get(&p.uid()) {
            return Tensor { tape: self, id };
        }
        let t = self.push_rc(p.value(), vec![], None, true, true);
        self.param_leaves.borrow_mut().insert(p.uid(), t.id);
        t
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<F>,
        parents: Vec<usize>,
        grad_fn: Option<GradFn<F>>,
        requires_grad: bool,
        is_param: bool,
    ) -> Tensor<'_, F> {
        // keep every stored value in standard layout; reshape and the
        // slice-based conv kernels rely on it
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.push_rc(Rc::new(value), parents, grad_fn, requires_grad, is_param)
    }

    fn push_rc(
        &self,
        value: Rc<ArrayD<F>>,
        parents: Vec<usize>,
        grad_fn: Option<GradFn<F>>,
        requires_grad: bool,
        is_param: bool,
    ) -> Tensor<'_, F> {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite tensor value");
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            grad_fn,
            requires_grad,
            is_param,
        });
        Tensor { tape: self, id }
    }

    pub(crate) fn apply(
        &self,
        value: ArrayD<F>,
        parents: Vec<usize>,
        grad_fn: GradFn<F>,
    ) -> Tensor<'_, F> {
        let requires = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        let grad_fn = if requires { Some(grad_fn) } else { None };
        self.push(value, parents, grad_fn, requires, false)
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<ArrayD<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a scalar (0-d) node. Returns gradients for every
    /// parameter leaf reachable from it.
    pub fn backward(&self, loss: Tensor<'_, F>) -> Grads<F> {
        let nodes = self.nodes.borrow();
        assert!(
            nodes[loss.id].value.ndim() == 0,
            "backward starts from a scalar loss, got shape {:?}",
            nodes[loss.id].value.shape()
        );
        let mut grads: Vec<Option<ArrayD<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(ArrayD::from_elem(IxDyn(&[]), F::one()));

        for id in (0..=loss.id).rev() {
            if grads[id].is_none() || !nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let node = &nodes[id];
            let Some(grad_fn) = &node.grad_fn else {
                // leaf: keep parameter grads, drop the rest
                if !node.is_param {
                    grads[id] = None;
                }
                continue;
            };
            let grad = grads[id].take().expect("grad present");
            let parent_vals: Vec<Rc<ArrayD<F>>> = node
                .parents
                .iter()
                .map(|&p| Rc::clone(&nodes[p].value))
                .collect();
            let ctx = BackwardCtx {
                grad: &grad,
                parents: &parent_vals,
                output: &node.value,
            };
            let parent_grads = grad_fn(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[pid].requires_grad {
                    continue;
                }
                if let Some(pg) = pg {
                    debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                    match &mut grads[pid] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }

        let mut by_uid = HashMap::new();
        for (&uid, &node_id) in self.param_leaves.borrow().iter() {
            if let Some(g) = grads[node_id].take() {
                by_uid.insert(uid, g);
            }
        }
        Grads { by_uid }
    }
}

/// Gradients keyed by parameter identity, as produced by [`Tape::backward`].
pub struct Grads<F: Scalar> {
    by_uid: HashMap<u64, ArrayD<F>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, p: &Param<F>) -> Option<&ArrayD<F>> {
        self.by_uid.get(&p.uid())
    }

    pub fn is_empty(&self) -> bool {
        self.by_uid.is_empty()
    }

    pub fn len(&self) -> usize {
        self.by_uid.len()
    }
}

impl<'g, F: Scalar> Tensor<'g, F> {
    pub fn value(&self) -> Rc<ArrayD<F>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Extract the value of a 0-d tensor.
    pub fn scalar(&self) -> F {
        let v = self.value();
        assert_eq!(v.ndim(), 0, "scalar() on non-scalar tensor");
        v[IxDyn(&[])]
    }

    /// Cut the graph: same value, no gradient flow.
    pub fn detach(&self) -> Tensor<'g, F> {
        self.tape
            .push_rc_public(self.value())
    }
}

impl<F: Scalar> Tape<F> {
    fn push_rc_public(&self, value: Rc<ArrayD<F>>) -> Tensor<'_, F> {
        self.push_rc(value, vec![], None, false, false)
    }
}
