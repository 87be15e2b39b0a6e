//! Reverse-mode differentiation over a linear tape. Each forward op appends
//! one node holding its result and a closure that maps the upstream gradient
//! to per-parent gradients; backward walks the tape in exact reverse order.

use crate::kernel::tensor::Tensor;

/// Index of a node on a [`Tape`].
pub type VarId = usize;

/// (parent values, node value, upstream gradient) -> one gradient per parent.
type GradFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<VarId>,
    grad_fn: Option<GradFn>,
}

/// Single-use recording of a forward computation. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A leaf node: a parameter or constant input.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.nodes.push(Node { value, parents: Vec::new(), grad_fn: None });
        self.nodes.len() - 1
    }

    /// An interior node produced by an op.
    pub fn push(&mut self, value: Tensor, parents: Vec<VarId>, grad_fn: GradFn) -> VarId {
        debug_assert!(parents.iter().all(|&p| p < self.nodes.len()));
        self.nodes.push(Node { value, parents, grad_fn: Some(grad_fn) });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradients of the scalar at `root` with respect to every node, by
    /// reverse accumulation. Nodes that do not influence the root get None.
    pub fn backward(&self, root: VarId) -> Vec<Option<Tensor>> {
        let rv = &self.nodes[root].value;
        assert_eq!(rv.shape(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            let Some(grad_fn) = &node.grad_fn else { continue };
            let Some(upstream) = grads[id].clone() else { continue };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pgrads = grad_fn(&parent_vals, &node.value, &upstream);
            assert_eq!(pgrads.len(), node.parents.len(), "grad_fn arity mismatch");
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                assert_eq!(
                    pg.shape(),
                    self.nodes[p].value.shape(),
                    "gradient shape mismatch for node {p}"
                );
                match &mut grads[p] {
                    Some(g) => g.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::ops;

    #[test]
    fn square_via_repeated_parent_accumulates_both_slots() {
        // y = x·x with both parents the same node: dy/dx = 2x.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let val = ops::matmul(tape.value(x), tape.value(x));
        let y = tape.push(
            val,
            vec![x, x],
            Box::new(|ps, _, g| {
                vec![
                    ops::matmul(g, &ops::transpose(ps[1])),
                    ops::matmul(&ops::transpose(ps[0]), g),
                ]
            }),
        );
        let grads = tape.backward(y);
        assert_eq!(grads[x].as_ref().unwrap().at(0, 0), 6.0);
    }

    #[test]
    fn unused_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let unused = tape.leaf(Tensor::scalar(9.0));
        let y = tape.push(
            ops::scale(tape.value(x), 2.0),
            vec![x],
            Box::new(|_, _, g| vec![ops::scale(g, 2.0)]),
        );
        let grads = tape.backward(y);
        assert!(grads[x].is_some());
        assert!(grads[unused].is_none());
    }

    #[test]
    #[should_panic(expected = "scalar")]
    fn backward_from_non_scalar_panics() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        tape.backward(x);
    }
}
