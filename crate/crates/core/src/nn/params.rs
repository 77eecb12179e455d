use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{ConvGeom, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors. Insertion order is the canonical order
/// used by checkpoints, optimizers and the parameter census.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let (i, _) = self.entries.insert_full(name, tensor);
        Ok(ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.values_mut()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> u64 {
        self.entries.values().map(|t| t.numel() as u64).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Zeroes every parameter whose name starts with `prefix`; returns how many tensors matched.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut hit = 0;
        for (name, t) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
                hit += 1;
            }
        }
        hit
    }
}

/// Deterministic weight initialisation: fan-in scaled uniform `U(-1/√fan_in, 1/√fan_in)`
/// for weights, zeros for biases. Values are drawn as `f32` so a model built in
/// `f64` from the same seed is the exact upcast of the `f32` one.
#[derive(Debug)]
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform<T: Real>(&mut self, shape: [usize; 4], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        Tensor::from_fn(shape, |_, _, _, _| T::of(self.rng.gen_range(-bound..=bound) as f64))
    }
}

/// A convolution whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv {
    /// Registers `{name}.weight` (and `{name}.bias`) with "same" zero padding.
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("{name}: kernel {kernel} must be odd")));
        }
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::Config(format!(
                "{name}: channels {in_channels}->{out_channels} not divisible by groups {groups}"
            )));
        }
        let cin_g = in_channels / groups;
        let w = init.uniform(
            [out_channels, cin_g, kernel, kernel],
            cin_g * kernel * kernel,
        );
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([out_channels, 1, 1, 1]))?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            geom: ConvGeom { stride: 1, padding: kernel / 2, groups },
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        let w = g.param(store, self.weight)?;
        let b = match self.bias {
            Some(id) => Some(g.param(store, id)?),
            None => None,
        };
        g.conv2d(x, &w, b.as_ref(), self.geom)
    }

    pub fn param_count(&self) -> u64 {
        let w = self.out_channels * (self.in_channels / self.geom.groups) * self.kernel * self.kernel;
        (w + if self.bias.is_some() { self.out_channels } else { 0 }) as u64
    }
}
