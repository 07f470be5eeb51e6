//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive applied through a [`Tape`] appends a node holding its
//! output and whatever it needs for the backward sweep. [`Tape::backward`]
//! walks the nodes in reverse, returns the gradient of every registered
//! parameter and empties the tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry, PoolSpec};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    Conv2d {
        input: Var,
        weights: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Add(Var, Var),
    Concat {
        parts: Vec<Var>,
        channels: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    Sum(Var),
    Dot {
        input: Var,
        coeffs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameter gradients keyed by the slot passed to [`Tape::param`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_slot: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Tensor> {
        self.by_slot.get(&slot)
    }

    pub fn take(&mut self, slot: usize) -> Option<Tensor> {
        self.by_slot.remove(&slot)
    }

    pub fn len(&self) -> usize {
        self.by_slot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_slot.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.by_slot.iter().map(|(&k, v)| (k, v))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a constant with no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Records a trainable tensor under `slot`.
    pub fn param(&mut self, slot: usize, t: Tensor) -> Var {
        self.push(t, Op::Param(slot))
    }

    pub fn conv2d(&mut self, input: Var, weights: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let out = ops::conv2d_forward(self.value(input), self.value(weights), self.value(bias), geom)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weights,
                bias,
                geom,
            },
        ))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = ops::dense_forward(self.value(input), self.value(weights), self.value(bias))?;
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weights,
                bias,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu_forward(self.value(input));
        self.push(out, Op::Relu(input))
    }

    pub fn maxpool(&mut self, input: Var, spec: PoolSpec) -> Result<Var> {
        let (out, argmax) = ops::maxpool_forward(self.value(input), spec)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    /// Flattens `[B, ...]` to `[B, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let b = t.shape()[0];
        let rest = t.len() / b;
        let out = t.clone().reshape(vec![b, rest])?;
        Ok(self.push(out, Op::Reshape(input)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add_forward(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&tensors)?;
        let channels = tensors.iter().map(|t| t.shape()[1]).collect();
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                channels,
            },
        ))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let loss = ops::cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(s), Op::Sum(input))
    }

    /// `Σ coeffs ⊙ input`; a scalar probe used by gradient checks.
    pub fn dot(&mut self, input: Var, coeffs: Tensor) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != coeffs.shape() {
            return Err(Error::shape(
                "dot",
                format!("{:?} vs {:?}", x.shape(), coeffs.shape()),
            ));
        }
        let s = x.data().iter().zip(coeffs.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { input, coeffs }))
    }

    /// Back-propagates from the scalar `loss` and clears the tape.
    ///
    /// Every registered parameter receives a gradient, zero if it did not
    /// influence `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("loss handle does not belong to this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            let Some(g) = grads[idx].take() else {
                if let Op::Param(slot) = node.op {
                    out.by_slot
                        .entry(slot)
                        .or_insert_with(|| Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => match out.by_slot.get_mut(slot) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        out.by_slot.insert(*slot, g);
                    }
                },
                Op::Conv2d {
                    input,
                    weights,
                    bias,
                    geom,
                } => {
                    let cg = ops::conv2d_backward(val(*input), val(*weights), val(*bias), *geom, &g)?;
                    accumulate(&mut grads[input.0], cg.input);
                    accumulate(&mut grads[weights.0], cg.weights);
                    accumulate(&mut grads[bias.0], cg.bias);
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let dg = ops::dense_backward(val(*input), val(*weights), val(*bias), &g)?;
                    accumulate(&mut grads[input.0], dg.input);
                    accumulate(&mut grads[weights.0], dg.weights);
                    accumulate(&mut grads[bias.0], dg.bias);
                }
                Op::Relu(input) => {
                    let gi = ops::relu_backward(val(*input), &g);
                    accumulate(&mut grads[input.0], gi);
                }
                Op::MaxPool { input, argmax } => {
                    let gi = ops::maxpool_backward(val(*input).shape(), argmax, &g);
                    accumulate(&mut grads[input.0], gi);
                }
                Op::Reshape(input) => {
                    let gi = g.reshape(val(*input).shape().to_vec())?;
                    accumulate(&mut grads[input.0], gi);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Concat { parts, channels } => {
                    for (p, gi) in parts.iter().zip(ops::split_channels(&g, channels)) {
                        accumulate(&mut grads[p.0], gi);
                    }
                }
                Op::CrossEntropy { logits, labels } => {
                    let gi = ops::cross_entropy_backward(val(*logits), labels, g.data()[0])?;
                    accumulate(&mut grads[logits.0], gi);
                }
                Op::Sum(input) => {
                    let gi = Tensor::full(val(*input).shape(), g.data()[0]);
                    accumulate(&mut grads[input.0], gi);
                }
                Op::Dot { input, coeffs } => {
                    let s = g.data()[0];
                    let data = coeffs.data().iter().map(|c| c * s).collect();
                    accumulate(&mut grads[input.0], Tensor::from_parts(coeffs.shape().to_vec(), data));
                }
            }
        }
        // Parameters recorded after the loss node cannot influence it.
        for node in &nodes[loss.0 + 1..] {
            if let Op::Param(slot) = node.op {
                out.by_slot
                    .entry(slot)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }
}
