//! Reverse-mode differentiation over a linear record of primitive calls.
//!
//! Values live on the tape and are addressed by [`Var`]. Each recorded op
//! keeps the ids of its operands (plus argmax indices where the forward
//! made a discrete choice), which is enough to replay its adjoint.

use super::ops::{self, ConvGeom};
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Pad { x: Var, pad: usize },
    AvgPool(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    ChannelMeanMax { x: Var, argmax: Vec<usize> },
    PixelShuffle { x: Var, r: usize },
    SumAll(Var),
    L1 { x: Var, target: Tensor<T> },
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of recorded ops the backward pass stepped through.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

#[derive(Debug, Default)]
pub struct GradTape<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    consumed: bool,
}

impl<T: Real> GradTape<T> {
    pub fn new() -> Self {
        Self { values: Vec::new(), ops: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.values[v.0].shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.values.push(value);
        self.ops.push(op);
        Ok(Var(self.values.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.ops.get(v.0), Some(Op::Leaf))
    }

    /// Every discrete choice the forward pass made: ReLU input signs, max-pool
    /// argmaxes and L1 residual signs. Two tapes of the same graph with equal
    /// decisions lie on the same smooth piece of the function.
    pub fn decisions(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for op in &self.ops {
            match op {
                Op::Relu(x) => out.extend(self.value(*x).data().iter().map(|&v| usize::from(v > T::zero()))),
                Op::MaxPool { argmax, .. } | Op::ChannelMeanMax { argmax, .. } => out.extend_from_slice(argmax),
                Op::L1 { x, target } => out.extend(
                    self.value(*x).data().iter().zip(target.data()).map(|(&a, &b)| (a > b) as usize + (a >= b) as usize),
                ),
                _ => {}
            }
        }
        out
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = ops::conv2d_raw(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        self.push(out, Op::Conv2d { x, w, b, geom })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = ops::scale(self.value(x), s)?;
        self.push(out, Op::Scale(x, s))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&refs)?;
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_channels(self.value(x), start, len)?;
        self.push(out, Op::Slice { x, start })
    }

    pub fn pad2d(&mut self, x: Var, pad: usize) -> Result<Var> {
        let out = ops::pad2d(self.value(x), pad);
        self.push(out, Op::Pad { x, pad })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        self.push(out, Op::AvgPool(x))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::global_max_pool_with_argmax(self.value(x))?;
        self.push(out, Op::MaxPool { x, argmax })
    }

    pub fn channel_mean_max(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::channel_mean_max_with_argmax(self.value(x))?;
        self.push(out, Op::ChannelMeanMax { x, argmax })
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = ops::pixel_shuffle(self.value(x), r)?;
        self.push(out, Op::PixelShuffle { x, r })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = ops::sum_all(self.value(x))?;
        self.push(out, Op::SumAll(x))
    }

    pub fn l1_loss(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        let out = ops::l1_loss(self.value(x), &target)?;
        self.push(out, Op::L1 { x, target })
    }

    /// Propagates `loss_grad` from the scalar `loss` back through every recorded op.
    ///
    /// The tape can be replayed once; a second call returns [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: Var, loss_grad: T) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), loss_grad));
        let mut visited = 0;

        for i in (0..self.ops.len()).rev() {
            visited += 1;
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.adjoint(i, &g)?;
            for (v, d) in contributions {
                accumulate(&mut grads[v.0], d)?;
            }
        }
        for (grad, op) in grads.iter_mut().zip(&self.ops) {
            if !matches!(op, Op::Leaf) {
                *grad = None;
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn adjoint(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let out = &self.values[i];
        Ok(match &self.ops[i] {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = ops::conv2d_backward(self.value(*x), self.value(*w), b.is_some(), *geom, g)?;
                let mut v = vec![(*x, dx), (*w, dw)];
                if let (Some(b), Some(db)) = (b, db) {
                    v.push((*b, db));
                }
                v
            }
            Op::Relu(x) => vec![(*x, ops::relu_backward(self.value(*x), g))],
            Op::Sigmoid(x) => vec![(*x, ops::sigmoid_backward(out, g))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let (da, db) = ops::mul_backward(self.value(*a), self.value(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, s) => vec![(*x, g.map(|v| v * *s))],
            Op::Concat(parts) => {
                let mut start = 0;
                let mut v = Vec::with_capacity(parts.len());
                for p in parts {
                    let c = self.value(*p).channels();
                    v.push((*p, ops::slice_channels(g, start, c)?));
                    start += c;
                }
                v
            }
            Op::Slice { x, start } => vec![(*x, ops::slice_channels_backward(self.shape(*x), *start, g))],
            Op::Pad { x, pad } => vec![(*x, ops::pad2d_backward(*pad, g))],
            Op::AvgPool(x) => vec![(*x, ops::global_avg_pool_backward(self.shape(*x), g))],
            Op::MaxPool { x, argmax } => vec![(*x, ops::scatter_backward(self.shape(*x), argmax, g))],
            Op::ChannelMeanMax { x, argmax } => {
                vec![(*x, ops::channel_mean_max_backward(self.shape(*x), argmax, g))]
            }
            Op::PixelShuffle { x, r } => vec![(*x, ops::pixel_unshuffle(g, *r)?)],
            Op::SumAll(x) => vec![(*x, Tensor::full(self.shape(*x), g.data()[0]))],
            Op::L1 { x, target } => vec![(*x, ops::l1_loss_backward(self.value(*x), target, g.data()[0]))],
        })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, d: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(d),
        Some(acc) => {
            if acc.shape() != d.shape() {
                return Err(Error::shape("backward", format!("gradient {:?} vs {:?}", d.shape(), acc.shape())));
            }
            acc.data_mut().iter_mut().zip(d.data()).for_each(|(a, &b)| *a += b);
        }
    }
    Ok(())
}
