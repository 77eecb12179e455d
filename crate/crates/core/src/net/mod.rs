//! The full network: shallow extractor, residual-in-residual body of ghost
//! residual groups, sub-pixel upscaler and reconstruction conv.

mod checkpoint;

pub use checkpoint::{Checkpoint, OptimizerState, CHECKPOINT_VERSION};

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::config::{join_list, KeyValues};
use crate::error::{Error, Result};
use crate::graph::{Eager, Graph};
use crate::nn::{AttentionConfig, Conv, ConvKind, GhostConfig, Grab, GrabConfig, Init, ParamStore};
use crate::tensor::{Real, Tensor};

pub const SUPPORTED_SCALES: [usize; 4] = [2, 3, 4, 8];

/// The ablation variants: which body convolution and which attention halves a block uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Standard 3×3 convolutions + channel attention (an RCAB).
    Ab1,
    /// Ghost modules + channel attention.
    Ab2,
    /// Ghost modules + channel and spatial attention (the default block).
    Ab3,
    /// Ghost modules + spatial attention.
    Ab4,
    /// Ghost modules only.
    Ab5,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Ab1, Variant::Ab2, Variant::Ab3, Variant::Ab4, Variant::Ab5];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ab1 => "ab1",
            Variant::Ab2 => "ab2",
            Variant::Ab3 => "ab3",
            Variant::Ab4 => "ab4",
            Variant::Ab5 => "ab5",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected ab1..ab5)")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub n_groups: usize,
    pub n_blocks: usize,
    pub channels: usize,
    pub scale: usize,
    pub colors: usize,
    pub body: ConvKind,
    /// Biases on the standard and ghost convolutions.
    pub bias: bool,
    pub ghost_q: usize,
    pub ghost_primary_kernel: usize,
    pub ghost_kernels: Vec<usize>,
    pub attention: AttentionConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            n_groups: 10,
            n_blocks: 20,
            channels: 64,
            scale: 2,
            colors: 3,
            body: ConvKind::Ghost,
            bias: true,
            ghost_q: 3,
            ghost_primary_kernel: 1,
            ghost_kernels: vec![3, 5],
            attention: AttentionConfig::default(),
        }
    }
}

impl NetConfig {
    pub fn tiny(n_groups: usize, n_blocks: usize, channels: usize, scale: usize) -> Self {
        Self { n_groups, n_blocks, channels, scale, ..Self::default() }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        let (body, channel, spatial) = match v {
            Variant::Ab1 => (ConvKind::Standard, true, false),
            Variant::Ab2 => (ConvKind::Ghost, true, false),
            Variant::Ab3 => (ConvKind::Ghost, true, true),
            Variant::Ab4 => (ConvKind::Ghost, false, true),
            Variant::Ab5 => (ConvKind::Ghost, false, false),
        };
        self.body = body;
        self.attention.channel = channel;
        self.attention.spatial = spatial;
        self
    }

    pub fn ghost(&self) -> GhostConfig {
        GhostConfig {
            in_channels: self.channels,
            out_channels: self.channels,
            q: self.ghost_q,
            primary_kernel: self.ghost_primary_kernel,
            kernels: self.ghost_kernels.clone(),
            bias: self.bias,
        }
    }

    pub fn grab(&self) -> GrabConfig {
        GrabConfig {
            channels: self.channels,
            body: self.body,
            bias: self.bias,
            ghost: self.ghost(),
            attention: self.attention.clone(),
        }
    }

    /// Sub-pixel stages: ×2 and ×3 in one step, ×4 and ×8 as repeated ×2.
    pub fn upscale_stages(&self) -> Result<Vec<usize>> {
        match self.scale {
            2 => Ok(vec![2]),
            3 => Ok(vec![3]),
            4 => Ok(vec![2, 2]),
            8 => Ok(vec![2, 2, 2]),
            s => Err(Error::Config(format!("scale {s} not supported (expected one of {:?})", SUPPORTED_SCALES))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.upscale_stages()?;
        for (name, v) in [
            ("groups", self.n_groups),
            ("blocks", self.n_blocks),
            ("channels", self.channels),
            ("colors", self.colors),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("net.{name} must be at least 1")));
            }
        }
        self.grab().validate()
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("net.groups", self.n_groups);
        kv.set("net.blocks", self.n_blocks);
        kv.set("net.channels", self.channels);
        kv.set("net.scale", self.scale);
        kv.set("net.colors", self.colors);
        kv.set("net.body", if self.body == ConvKind::Ghost { "ghost" } else { "standard" });
        kv.set("net.bias", self.bias);
        kv.set("net.ghost.q", self.ghost_q);
        kv.set("net.ghost.primary_kernel", self.ghost_primary_kernel);
        kv.set("net.ghost.kernels", join_list(&self.ghost_kernels));
        kv.set("net.attention.reduction", self.attention.reduction);
        kv.set("net.attention.spatial_kernel", self.attention.spatial_kernel);
        kv.set("net.attention.channel", self.attention.channel);
        kv.set("net.attention.spatial", self.attention.spatial);
        kv.set("net.attention.dual_pool", self.attention.dual_pool);
        kv
    }

    /// Reads the `net.` section of `kv`, starting from defaults. Unknown `net.` keys are rejected.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let mut s = kv.take_section("net");
        let mut c = NetConfig::default();
        if let Some(v) = s.take("variant")? {
            c = c.with_variant(v);
        }
        macro_rules! field {
            ($key:literal, $dst:expr) => {
                if let Some(v) = s.take($key)? {
                    $dst = v;
                }
            };
        }
        field!("groups", c.n_groups);
        field!("blocks", c.n_blocks);
        field!("channels", c.channels);
        field!("scale", c.scale);
        field!("colors", c.colors);
        if let Some(b) = s.take::<String>("body")? {
            c.body = match b.as_str() {
                "ghost" => ConvKind::Ghost,
                "standard" => ConvKind::Standard,
                other => return Err(Error::Config(format!("net.body = {other:?} (expected ghost|standard)"))),
            };
        }
        field!("bias", c.bias);
        field!("ghost.q", c.ghost_q);
        field!("ghost.primary_kernel", c.ghost_primary_kernel);
        if let Some(k) = s.take_list("ghost.kernels")? {
            c.ghost_kernels = k;
        }
        field!("attention.reduction", c.attention.reduction);
        field!("attention.spatial_kernel", c.attention.spatial_kernel);
        field!("attention.channel", c.attention.channel);
        field!("attention.spatial", c.attention.spatial);
        field!("attention.dual_pool", c.attention.dual_pool);
        s.finish("net")?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug)]
pub struct Group {
    pub blocks: Vec<Grab>,
    pub tail: Conv,
}

/// A built network and its parameters.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub config: NetConfig,
    pub params: ParamStore<T>,
    head: Conv,
    groups: Vec<Group>,
    body_tail: Conv,
    upsample: Vec<(Conv, usize)>,
    tail: Conv,
}

impl<T: Real> Model<T> {
    /// Builds the network with weights drawn deterministically from `seed`.
    pub fn build(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let c = config.channels;
        let head = Conv::build(&mut store, &mut init, "head", config.colors, c, 3, 1, config.bias)?;
        let grab = config.grab();
        let mut groups = Vec::with_capacity(config.n_groups);
        for gi in 0..config.n_groups {
            let blocks = (0..config.n_blocks)
                .map(|bi| Grab::build(&mut store, &mut init, &format!("groups.{gi}.blocks.{bi}"), &grab))
                .collect::<Result<Vec<_>>>()?;
            let tail = Conv::build(&mut store, &mut init, &format!("groups.{gi}.tail"), c, c, 3, 1, config.bias)?;
            groups.push(Group { blocks, tail });
        }
        let body_tail = Conv::build(&mut store, &mut init, "body_tail", c, c, 3, 1, config.bias)?;
        let upsample = config
            .upscale_stages()?
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                Conv::build(&mut store, &mut init, &format!("upsample.{i}"), c, c * r * r, 3, 1, config.bias).map(|conv| (conv, r))
            })
            .collect::<Result<Vec<_>>>()?;
        let tail = Conv::build(&mut store, &mut init, "tail", c, config.colors, 3, 1, config.bias)?;
        Ok(Self { config: config.clone(), params: store, head, groups, body_tail, upsample, tail })
    }

    /// Rebuilds the structure for `config` and installs `params`, which must
    /// match the expected names and shapes exactly.
    pub fn from_params(config: &NetConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::shape(
                "model",
                format!("config expects {} parameter tensors, got {}", model.params.len(), params.len()),
            ));
        }
        for ((want, wt), (got, gt)) in model.params.iter().zip(params.iter()) {
            if want != got || wt.shape() != gt.shape() {
                return Err(Error::shape(
                    "model",
                    format!("expected {want} {:?}, found {got} {:?}", wt.shape(), gt.shape()),
                ));
            }
        }
        model.params = params;
        Ok(model)
    }

    /// Same structure and weights in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            head: self.head.clone(),
            groups: self.groups.clone(),
            body_tail: self.body_tail.clone(),
            upsample: self.upsample.clone(),
            tail: self.tail.clone(),
        }
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn param_count(&self) -> u64 {
        self.params.count()
    }

    /// Parameter count per layer, keyed by layer name (parameter name minus `.weight`/`.bias`).
    pub fn census(&self) -> IndexMap<String, u64> {
        let mut out = IndexMap::new();
        for (name, t) in self.params.iter() {
            let layer = name.rsplit_once('.').map_or(name, |(l, _)| l);
            *out.entry(layer.to_string()).or_insert(0) += t.numel() as u64;
        }
        out
    }

    /// Shallow features `F_0`.
    pub fn extract<G: Graph<T>>(&self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        self.extract_with(g, &self.params, x)
    }

    /// Groups with short skips, then the body tail conv: `F_G` before the long skip.
    pub fn body<G: Graph<T>>(&self, g: &mut G, f0: &G::Value) -> Result<G::Value> {
        self.body_with(g, &self.params, f0)
    }

    /// Sub-pixel upscaling and reconstruction of `features`.
    pub fn reconstruct<G: Graph<T>>(&self, g: &mut G, features: &G::Value) -> Result<G::Value> {
        self.reconstruct_with(g, &self.params, features)
    }

    pub fn forward<G: Graph<T>>(&self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        self.forward_with(g, &self.params, x)
    }

    /// Forward pass using `params` in place of the model's own weights (same names and shapes).
    pub fn forward_with<G: Graph<T>>(&self, g: &mut G, params: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        let f0 = self.extract_with(g, params, x)?;
        let fg = self.body_with(g, params, &f0)?;
        let merged = g.add(&f0, &fg)?;
        self.reconstruct_with(g, params, &merged)
    }

    fn extract_with<G: Graph<T>>(&self, g: &mut G, params: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        let [_, c, h, w] = g.value(x).shape();
        if c != self.config.colors {
            return Err(Error::shape("model", format!("expected {} color channels, got {}", self.config.colors, c)));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("model", format!("input spatial size {h}x{w} must be positive")));
        }
        self.head.forward(g, params, x)
    }

    fn body_with<G: Graph<T>>(&self, g: &mut G, params: &ParamStore<T>, f0: &G::Value) -> Result<G::Value> {
        let mut x = f0.clone();
        for group in &self.groups {
            let mut h = x.clone();
            for block in &group.blocks {
                h = block.forward(g, params, &h)?;
            }
            let h = group.tail.forward(g, params, &h)?;
            x = g.add(&x, &h)?;
        }
        self.body_tail.forward(g, params, &x)
    }

    fn reconstruct_with<G: Graph<T>>(&self, g: &mut G, params: &ParamStore<T>, features: &G::Value) -> Result<G::Value> {
        let mut x = features.clone();
        for (conv, r) in &self.upsample {
            let h = conv.forward(g, params, &x)?;
            x = g.pixel_shuffle(&h, *r)?;
        }
        self.tail.forward(g, params, &x)
    }

    /// Inference without recording: `[N, colors, H, W] → [N, colors, sH, sW]`.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Eager;
        self.forward(&mut g, x)
    }
}

#[cfg(test)]
mod tests;
