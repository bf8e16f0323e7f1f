//! Reverse-mode differentiation over a linear tape of primitive operations.
//!
//! Nodes are appended in evaluation order, so a node's parents always precede it
//! and the backward pass is a single reverse sweep.

use super::tensor::{matmul_at_acc, matmul_bt_acc, matmul_into, TensorBuffer};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Smooth elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Activate(NodeId, Activation),
    SumSquares(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: TensorBuffer,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<TensorBuffer>>,
}

impl Gradients {
    /// `None` for nodes that do not depend on a differentiable leaf.
    pub fn get(&self, id: NodeId) -> Option<&TensorBuffer> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<TensorBuffer> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &TensorBuffer {
        &self.nodes[id].value
    }

    /// Records a leaf. Only leaves with `requires_grad` receive adjoints.
    pub fn leaf(&mut self, value: TensorBuffer, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    fn push(&mut self, op: Op, value: TensorBuffer, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn check(&self, id: NodeId, prim: &str) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::invalid(format!("{prim}: unknown node {id}")));
        }
        Ok(())
    }

    fn grad_flag(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Matrix product of `[m, k]` and `[k, n]` operands.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::invalid(format!(
                "matmul: incompatible shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = TensorBuffer::zeros(&[m, n]);
        matmul_into(av.data(), bv.data(), out.data_mut(), m, k, n);
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    /// Elementwise sum. `b` may also be a row (`[n]` or `[1, n]`) broadcast over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "add")?;
        self.check(b, "add")?;
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let mut out = av.clone();
        if av.shape() == bv.shape() {
            for (o, &y) in out.data_mut().iter_mut().zip(bv.data()) {
                *o += y;
            }
        } else if is_row_broadcast(av, bv) {
            let cols = bv.len();
            for row in out.data_mut().chunks_mut(cols) {
                for (o, &y) in row.iter_mut().zip(bv.data()) {
                    *o += y;
                }
            }
        } else {
            return Err(Error::invalid(format!(
                "add: incompatible shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.check(a, "scale")?;
        if !factor.is_finite() {
            return Err(Error::invalid("scale: non-finite factor"));
        }
        let mut out = self.nodes[a].value.clone();
        out.data_mut().iter_mut().for_each(|x| *x *= factor);
        let rg = self.grad_flag(&[a]);
        Ok(self.push(Op::Scale(a, factor), out, rg))
    }

    pub fn activate(&mut self, a: NodeId, act: Activation) -> Result<NodeId> {
        self.check(a, "activate")?;
        let mut out = self.nodes[a].value.clone();
        out.data_mut().iter_mut().for_each(|x| *x = act.apply(*x));
        let rg = self.grad_flag(&[a]);
        Ok(self.push(Op::Activate(a, act), out, rg))
    }

    /// Sum of squared entries, as a `[1]` tensor.
    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "sum_squares")?;
        let s = self.nodes[a].value.data().iter().map(|x| x * x).sum();
        let rg = self.grad_flag(&[a]);
        Ok(self.push(Op::SumSquares(a), TensorBuffer::scalar(s), rg))
    }

    /// Propagates adjoints from a scalar output back to every differentiable node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        self.check(output, "backward")?;
        if self.nodes[output].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: output node has shape {:?}, expected a scalar",
                self.nodes[output].value.shape()
            )));
        }
        let mut grads: Vec<Option<TensorBuffer>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output].requires_grad {
            return Ok(Gradients { grads });
        }
        let mut seed = TensorBuffer::zeros(self.nodes[output].value.shape());
        seed.data_mut()[0] = 1.0;
        grads[output] = Some(seed);

        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            match self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if self.nodes[a].requires_grad {
                        let ga = accumulator(&mut grads, a, av);
                        matmul_bt_acc(g.data(), bv.data(), ga.data_mut(), m, k, n);
                    }
                    if self.nodes[b].requires_grad {
                        let gb = accumulator(&mut grads, b, bv);
                        matmul_at_acc(av.data(), g.data(), gb.data_mut(), m, k, n);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a].requires_grad {
                        let ga = accumulator(&mut grads, a, &self.nodes[a].value);
                        for (o, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                            *o += x;
                        }
                    }
                    if self.nodes[b].requires_grad {
                        let bv = &self.nodes[b].value;
                        let gb = accumulator(&mut grads, b, bv);
                        let cols = bv.len();
                        for row in g.data().chunks(cols) {
                            for (o, &x) in gb.data_mut().iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                    }
                }
                Op::Scale(a, factor) => {
                    if self.nodes[a].requires_grad {
                        let ga = accumulator(&mut grads, a, &self.nodes[a].value);
                        for (o, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                            *o += factor * x;
                        }
                    }
                }
                Op::Activate(a, act) => {
                    if self.nodes[a].requires_grad {
                        let av = &self.nodes[a].value;
                        let ga = accumulator(&mut grads, a, av);
                        for ((o, &x), &gy) in ga.data_mut().iter_mut().zip(av.data()).zip(g.data())
                        {
                            *o += act.derivative(x) * gy;
                        }
                    }
                }
                Op::SumSquares(a) => {
                    if self.nodes[a].requires_grad {
                        let av = &self.nodes[a].value;
                        let gy = g.data()[0];
                        let ga = accumulator(&mut grads, a, av);
                        for (o, &x) in ga.data_mut().iter_mut().zip(av.data()) {
                            *o += 2.0 * x * gy;
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn is_row_broadcast(a: &TensorBuffer, b: &TensorBuffer) -> bool {
    let cols = match a.shape() {
        [_, c] => *c,
        _ => return false,
    };
    matches!(b.shape(), [n] if *n == cols) || matches!(b.shape(), [1, n] if *n == cols)
}

fn accumulator<'a>(
    grads: &'a mut [Option<TensorBuffer>],
    id: NodeId,
    like: &TensorBuffer,
) -> &'a mut TensorBuffer {
    grads[id].get_or_insert_with(|| TensorBuffer::zeros(like.shape()))
}

/// One instruction of a straight-line program. Operand indices refer to the
/// program's value list: the inputs first, then each instruction's result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    MatMul(usize, usize),
    Add(usize, usize),
    Scale(usize, f64),
    Activate(usize, Activation),
    SumSquares(usize),
}

/// Records `inputs` as differentiable leaves, runs `program`, and returns the
/// node holding the final value (the last input for an empty program).
pub fn forward(tape: &mut Tape, inputs: &[TensorBuffer], program: &[Primitive]) -> Result<NodeId> {
    if inputs.is_empty() {
        return Err(Error::invalid("forward: no inputs"));
    }
    let mut slots: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    for (i, prim) in program.iter().enumerate() {
        let slot = |j: usize| -> Result<NodeId> {
            slots.get(j).copied().ok_or_else(|| {
                Error::invalid(format!("{prim:?} (instruction {i}): operand {j} not yet defined"))
            })
        };
        let id = match *prim {
            Primitive::MatMul(a, b) => tape.matmul(slot(a)?, slot(b)?),
            Primitive::Add(a, b) => tape.add(slot(a)?, slot(b)?),
            Primitive::Scale(a, f) => tape.scale(slot(a)?, f),
            Primitive::Activate(a, act) => tape.activate(slot(a)?, act),
            Primitive::SumSquares(a) => tape.sum_squares(slot(a)?),
        }?;
        slots.push(id);
    }
    Ok(*slots.last().expect("inputs nonempty"))
}
