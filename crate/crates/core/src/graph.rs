//! One forward definition, two execution strategies.
//!
//! Blocks are written against [`Graph`]. [`Eager`] evaluates ops directly and
//! keeps nothing (inference); [`TapeGraph`] records onto a [`GradTape`] so the
//! same forward can be differentiated (training, gradient checks).

use std::collections::HashMap;

use crate::error::Result;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{self, ConvGeom, GradTape, Gradients, Real, Tensor, Var};

pub trait Graph<T: Real> {
    type Value: Clone;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;
    fn input(&mut self, t: Tensor<T>) -> Result<Self::Value>;
    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Self::Value>;

    fn conv2d(&mut self, x: &Self::Value, w: &Self::Value, b: Option<&Self::Value>, geom: ConvGeom) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn sigmoid(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn concat_channels(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn slice_channels(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn global_avg_pool(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn global_max_pool(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn channel_mean_max(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn pixel_shuffle(&mut self, x: &Self::Value, r: usize) -> Result<Self::Value>;
}

/// Direct evaluation without recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<T: Real> Graph<T> for Eager {
    type Value = Tensor<T>;

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn input(&mut self, t: Tensor<T>) -> Result<Tensor<T>> {
        Ok(t)
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Tensor<T>> {
        Ok(store.tensor(id).clone())
    }

    fn conv2d(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, geom: ConvGeom) -> Result<Tensor<T>> {
        tensor::conv2d_raw(x, w, b, geom)
    }

    fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(tensor::relu(x))
    }

    fn sigmoid(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(tensor::sigmoid(x))
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::add(a, b)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::mul(a, b)
    }

    fn concat_channels(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let refs: Vec<_> = parts.iter().collect();
        tensor::concat_channels(&refs)
    }

    fn slice_channels(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        tensor::slice_channels(x, start, len)
    }

    fn global_avg_pool(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::global_avg_pool(x)
    }

    fn global_max_pool(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::global_max_pool(x)
    }

    fn channel_mean_max(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::channel_mean_max(x)
    }

    fn pixel_shuffle(&mut self, x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
        tensor::pixel_shuffle(x, r)
    }
}

/// Records onto a tape, binding each parameter to a single leaf.
#[derive(Debug, Default)]
pub struct TapeGraph<T> {
    pub tape: GradTape<T>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Real> TapeGraph<T> {
    pub fn new() -> Self {
        Self { tape: GradTape::new(), bound: HashMap::new() }
    }

    /// The leaf a parameter was bound to during the forward pass, if it was used.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    /// Gradient of every parameter in `store` (zeros for parameters the forward never touched).
    pub fn param_grads(&self, store: &ParamStore<T>, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| {
                self.param_var(id)
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(store.tensor(id).shape()))
            })
            .collect()
    }
}

impl<T: Real> Graph<T> for TapeGraph<T> {
    type Value = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.tape.value(*v)
    }

    fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.tape.leaf(t)
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound.get(&id) {
            return Ok(*v);
        }
        let v = self.tape.leaf(store.tensor(id).clone())?;
        self.bound.insert(id, v);
        Ok(v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, geom: ConvGeom) -> Result<Var> {
        self.tape.conv2d(*x, *w, b.copied(), geom)
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        self.tape.relu(*x)
    }

    fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        self.tape.sigmoid(*x)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.mul(*a, *b)
    }

    fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.tape.concat_channels(parts)
    }

    fn slice_channels(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        self.tape.slice_channels(*x, start, len)
    }

    fn global_avg_pool(&mut self, x: &Var) -> Result<Var> {
        self.tape.global_avg_pool(*x)
    }

    fn global_max_pool(&mut self, x: &Var) -> Result<Var> {
        self.tape.global_max_pool(*x)
    }

    fn channel_mean_max(&mut self, x: &Var) -> Result<Var> {
        self.tape.channel_mean_max(*x)
    }

    fn pixel_shuffle(&mut self, x: &Var, r: usize) -> Result<Var> {
        self.tape.pixel_shuffle(*x, r)
    }
}
