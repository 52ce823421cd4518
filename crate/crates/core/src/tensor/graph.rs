use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::{Float, Tensor};

/// Computes parent gradients from the output gradient. The mask says which
/// parents actually need one; entries for the others may be `None`.
pub(crate) type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>>>;

struct Node<F: Float> {
    value: Arc<Tensor<F>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    param: Option<usize>,
}

/// A single-use recording of a forward pass.
///
/// Built with [`Graph::new`] for training (records backward closures) or
/// [`Graph::inference`] (values only).
pub struct Graph<F: Float = f32> {
    nodes: RefCell<Vec<Node<F>>>,
    record: bool,
}

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F: Float = f32> {
    pub(crate) graph: &'g Graph<F>,
    pub(crate) id: usize,
}

/// Parameter gradients keyed by parameter id.
#[derive(Debug, Default)]
pub struct Grads<F: Float = f32> {
    by_param: BTreeMap<usize, Tensor<F>>,
}

impl<F: Float> Grads<F> {
    pub fn get(&self, param: usize) -> Option<&Tensor<F>> {
        self.by_param.get(&param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<F>)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: true }
    }

    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, t: Tensor<F>) -> Var<'_, F> {
        self.constant_arc(Arc::new(t))
    }

    pub fn constant_arc(&self, t: Arc<Tensor<F>>) -> Var<'_, F> {
        self.push_node(Node {
            value: t,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
            param: None,
        })
    }

    /// A trainable leaf. Gradients flowing into it are reported under `id`.
    pub fn param(&self, id: usize, t: Arc<Tensor<F>>) -> Var<'_, F> {
        let record = self.record;
        self.push_node(Node {
            value: t,
            requires_grad: record,
            parents: Vec::new(),
            backward: None,
            param: Some(id),
        })
    }

    fn push_node(&self, node: Node<F>) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub(crate) fn push_op(
        &self,
        value: Tensor<F>,
        parents: &[usize],
        backward: impl Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>> + 'static,
    ) -> Var<'_, F> {
        let requires_grad = self.record && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_node(Node {
            value: Arc::new(value),
            requires_grad,
            parents: parents.to_vec(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            param: None,
        })
    }

    pub(crate) fn value(&self, id: usize) -> Arc<Tensor<F>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Grads<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), F::one()));
        let mut out = Grads::default();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(p) = node.param {
                match out.by_param.get_mut(&p) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.by_param.insert(p, g);
                    }
                }
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = bw(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(mask) {
                let (Some(pg), true) = (pg, need) else { continue };
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        out
    }
}

impl<'g, F: Float> Var<'g, F> {
    pub fn value(&self) -> Arc<Tensor<F>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value(self.id).shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }
}
