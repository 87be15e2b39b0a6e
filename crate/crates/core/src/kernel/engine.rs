//! One forward implementation, two execution modes. Model code is written
//! against [`Engine`]; [`EvalEngine`] runs it as plain tensor math and
//! [`TapeEngine`] records every op for reverse-mode gradients. Both modes
//! call the identical kernels in `ops`, so values agree bit for bit.

use std::rc::Rc;

use crate::kernel::ops::{self, AttnMask};
use crate::kernel::tape::{Tape, VarId};
use crate::kernel::tensor::Tensor;

/// A differentiable op that is cheaper to implement as one fused node than
/// as a composition of primitives (CTC loss, label-smoothed cross-entropy).
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;
    /// One gradient per input, given input values, forward output, upstream.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

pub trait Engine {
    type T: Clone;

    /// Bring a tensor into the engine (as a leaf when recording).
    fn lift(&mut self, t: &Tensor) -> Self::T;
    /// Current value of an engine tensor.
    fn value(&self, t: &Self::T) -> Tensor;

    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    /// a[R,C] + broadcast bias[1,C].
    fn add_bias(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn relu(&mut self, a: &Self::T) -> Self::T;
    fn scale(&mut self, a: &Self::T, s: f64) -> Self::T;
    fn transpose(&mut self, a: &Self::T) -> Self::T;
    fn masked_softmax(&mut self, a: &Self::T, mask: &AttnMask) -> Self::T;
    fn log_softmax(&mut self, a: &Self::T) -> Self::T;
    fn layer_norm(&mut self, x: &Self::T, gain: &Self::T, bias: &Self::T, eps: f64) -> Self::T;
    fn slice_cols(&mut self, a: &Self::T, lo: usize, hi: usize) -> Self::T;
    fn concat_cols(&mut self, parts: &[Self::T]) -> Self::T;
    /// Rows of `table` at `idx`, in order (embedding lookup).
    fn gather_rows(&mut self, table: &Self::T, idx: &[usize]) -> Self::T;
    fn unfold_causal(&mut self, a: &Self::T, taps: usize, stride: usize) -> Self::T;
    fn unfold_ahead(&mut self, a: &Self::T, taps: usize) -> Self::T;
    /// Σ a ⊙ w with constant w; reduces to a scalar for gradient checks.
    fn weighted_sum(&mut self, a: &Self::T, w: &Tensor) -> Self::T;
    fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[Self::T]) -> Self::T;
}

/// Plain evaluation: engine tensors are the tensors themselves.
#[derive(Default)]
pub struct EvalEngine;

impl EvalEngine {
    pub fn new() -> Self {
        EvalEngine
    }
}

impl Engine for EvalEngine {
    type T = Tensor;

    fn lift(&mut self, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn value(&self, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        ops::matmul(a, b)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        ops::add(a, b)
    }

    fn add_bias(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        ops::add_bias(a, b)
    }

    fn relu(&mut self, a: &Tensor) -> Tensor {
        ops::relu(a)
    }

    fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        ops::scale(a, s)
    }

    fn transpose(&mut self, a: &Tensor) -> Tensor {
        ops::transpose(a)
    }

    fn masked_softmax(&mut self, a: &Tensor, mask: &AttnMask) -> Tensor {
        ops::masked_softmax(a, mask)
    }

    fn log_softmax(&mut self, a: &Tensor) -> Tensor {
        ops::log_softmax_rows(a)
    }

    fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
        ops::layer_norm_rows(x, gain, bias, eps)
    }

    fn slice_cols(&mut self, a: &Tensor, lo: usize, hi: usize) -> Tensor {
        ops::slice_cols(a, lo, hi)
    }

    fn concat_cols(&mut self, parts: &[Tensor]) -> Tensor {
        let refs: Vec<&Tensor> = parts.iter().collect();
        ops::concat_cols(&refs)
    }

    fn gather_rows(&mut self, table: &Tensor, idx: &[usize]) -> Tensor {
        ops::gather_rows(table, idx)
    }

    fn unfold_causal(&mut self, a: &Tensor, taps: usize, stride: usize) -> Tensor {
        ops::unfold_causal(a, taps, stride)
    }

    fn unfold_ahead(&mut self, a: &Tensor, taps: usize) -> Tensor {
        ops::unfold_ahead(a, taps)
    }

    fn weighted_sum(&mut self, a: &Tensor, w: &Tensor) -> Tensor {
        ops::weighted_sum(a, w)
    }

    fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[Tensor]) -> Tensor {
        let refs: Vec<&Tensor> = inputs.iter().collect();
        op.forward(&refs)
    }
}

/// Recording engine: engine tensors are node ids on an owned tape.
#[derive(Default)]
pub struct TapeEngine {
    tape: Tape,
}

impl TapeEngine {
    pub fn new() -> Self {
        TapeEngine { tape: Tape::new() }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: VarId) -> Vec<Option<Tensor>> {
        self.tape.backward(root)
    }
}

impl Engine for TapeEngine {
    type T = VarId;

    fn lift(&mut self, t: &Tensor) -> VarId {
        self.tape.leaf(t.clone())
    }

    fn value(&self, t: &VarId) -> Tensor {
        self.tape.value(*t).clone()
    }

    fn matmul(&mut self, a: &VarId, b: &VarId) -> VarId {
        let v = ops::matmul(self.tape.value(*a), self.tape.value(*b));
        self.tape.push(
            v,
            vec![*a, *b],
            Box::new(|ps, _, g| {
                vec![
                    ops::matmul(g, &ops::transpose(ps[1])),
                    ops::matmul(&ops::transpose(ps[0]), g),
                ]
            }),
        )
    }

    fn add(&mut self, a: &VarId, b: &VarId) -> VarId {
        let v = ops::add(self.tape.value(*a), self.tape.value(*b));
        self.tape.push(
            v,
            vec![*a, *b],
            Box::new(|_, _, g| vec![g.clone(), g.clone()]),
        )
    }

    fn add_bias(&mut self, a: &VarId, b: &VarId) -> VarId {
        let v = ops::add_bias(self.tape.value(*a), self.tape.value(*b));
        self.tape.push(
            v,
            vec![*a, *b],
            Box::new(|_, _, g| vec![g.clone(), ops::col_sums(g)]),
        )
    }

    fn relu(&mut self, a: &VarId) -> VarId {
        let v = ops::relu(self.tape.value(*a));
        self.tape.push(
            v,
            vec![*a],
            Box::new(|ps, _, g| vec![ops::relu_back(ps[0], g)]),
        )
    }

    fn scale(&mut self, a: &VarId, s: f64) -> VarId {
        let v = ops::scale(self.tape.value(*a), s);
        self.tape.push(
            v,
            vec![*a],
            Box::new(move |_, _, g| vec![ops::scale(g, s)]),
        )
    }

    fn transpose(&mut self, a: &VarId) -> VarId {
        let v = ops::transpose(self.tape.value(*a));
        self.tape.push(
            v,
            vec![*a],
            Box::new(|_, _, g| vec![ops::transpose(g)]),
        )
    }

    fn masked_softmax(&mut self, a: &VarId, mask: &AttnMask) -> VarId {
        let v = ops::masked_softmax(self.tape.value(*a), mask);
        let mask = mask.clone();
        self.tape.push(
            v,
            vec![*a],
            Box::new(move |_, out, g| vec![ops::masked_softmax_back(out, &mask, g)]),
        )
    }

    fn log_softmax(&mut self, a: &VarId) -> VarId {
        let v = ops::log_softmax_rows(self.tape.value(*a));
        self.tape.push(
            v,
            vec![*a],
            Box::new(|_, out, g| vec![ops::log_softmax_back(out, g)]),
        )
    }

    fn layer_norm(&mut self, x: &VarId, gain: &VarId, bias: &VarId, eps: f64) -> VarId {
        let v = ops::layer_norm_rows(
            self.tape.value(*x),
            self.tape.value(*gain),
            self.tape.value(*bias),
            eps,
        );
        self.tape.push(
            v,
            vec![*x, *gain, *bias],
            Box::new(move |ps, _, g| {
                let (dx, dgain, dbias) = ops::layer_norm_back(ps[0], ps[1], eps, g);
                vec![dx, dgain, dbias]
            }),
        )
    }

    fn slice_cols(&mut self, a: &VarId, lo: usize, hi: usize) -> VarId {
        let v = ops::slice_cols(self.tape.value(*a), lo, hi);
        self.tape.push(
            v,
            vec![*a],
            Box::new(move |ps, _, g| {
                let mut da = Tensor::zeros(ps[0].rows(), ps[0].cols());
                for r in 0..g.rows() {
                    da.row_mut(r)[lo..hi].copy_from_slice(g.row(r));
                }
                vec![da]
            }),
        )
    }

    fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.tape.value(p)).collect();
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let v = ops::concat_cols(&vals);
        self.tape.push(
            v,
            parts.to_vec(),
            Box::new(move |_, _, g| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    grads.push(ops::slice_cols(g, off, off + w));
                    off += w;
                }
                grads
            }),
        )
    }

    fn gather_rows(&mut self, table: &VarId, idx: &[usize]) -> VarId {
        let v = ops::gather_rows(self.tape.value(*table), idx);
        let idx = idx.to_vec();
        self.tape.push(
            v,
            vec![*table],
            Box::new(move |ps, _, g| {
                vec![ops::gather_rows_back(ps[0].rows(), ps[0].cols(), &idx, g)]
            }),
        )
    }

    fn unfold_causal(&mut self, a: &VarId, taps: usize, stride: usize) -> VarId {
        let v = ops::unfold_causal(self.tape.value(*a), taps, stride);
        self.tape.push(
            v,
            vec![*a],
            Box::new(move |ps, _, g| {
                vec![ops::unfold_causal_back(ps[0].rows(), ps[0].cols(), taps, stride, g)]
            }),
        )
    }

    fn unfold_ahead(&mut self, a: &VarId, taps: usize) -> VarId {
        let v = ops::unfold_ahead(self.tape.value(*a), taps);
        self.tape.push(
            v,
            vec![*a],
            Box::new(move |ps, _, g| {
                vec![ops::unfold_ahead_back(ps[0].rows(), ps[0].cols(), taps, g)]
            }),
        )
    }

    fn weighted_sum(&mut self, a: &VarId, w: &Tensor) -> VarId {
        let v = ops::weighted_sum(self.tape.value(*a), w);
        let w = w.clone();
        self.tape.push(
            v,
            vec![*a],
            Box::new(move |_, _, g| vec![ops::scale(&w, g.at(0, 0))]),
        )
    }

    fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[VarId]) -> VarId {
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.tape.value(i)).collect();
        let v = op.forward(&vals);
        self.tape.push(
            v,
            inputs.to_vec(),
            Box::new(move |ps, out, g| op.backward(ps, out, g)),
        )
    }
}
