//! Building blocks: ghost module, channel/spatial attention, CSAM and the
//! ghost residual attention block (GRAB).

mod params;

pub use params::{Conv, Init, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Real;

/// Shape of a ghost module.
///
/// A 1×1 (by default) primary convolution yields `m = ceil(N/q)` intrinsic
/// channels. The output is `[identity, Ψ_1, …, Ψ_{q-1}]` concatenated over
/// channels and cut to `N`, where each `Ψ_j` is a depthwise `k_j × k_j`
/// convolution of the intrinsic maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GhostConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub q: usize,
    pub primary_kernel: usize,
    /// One kernel size per cheap branch; `q - 1` entries.
    pub kernels: Vec<usize>,
    pub bias: bool,
}

impl GhostConfig {
    /// Identity, Ψ1 (3×3) and Ψ2 (5×5): the kernels used for training.
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self { in_channels, out_channels, q: 3, primary_kernel: 1, kernels: vec![3, 5], bias: true }
    }

    /// Same module with Ψ1 = 1×1 and Ψ2 = 3×3, the kernels quoted in the
    /// parameter-count discussion.
    pub fn small_kernels(in_channels: usize, out_channels: usize) -> Self {
        Self { kernels: vec![1, 3], ..Self::new(in_channels, out_channels) }
    }

    pub fn intrinsic(&self) -> usize {
        self.out_channels.div_ceil(self.q)
    }

    /// Channels actually produced by each cheap branch after cutting the
    /// concatenation to `out_channels`. A zero-width branch is dropped.
    pub fn branch_widths(&self) -> Vec<usize> {
        let m = self.intrinsic();
        (1..self.q).map(|j| m.min(self.out_channels.saturating_sub(j * m))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("ghost module: {msg}")));
        if self.q < 2 {
            return fail(format!("q = {} must be at least 2", self.q));
        }
        if self.kernels.len() != self.q - 1 {
            return fail(format!("{} branch kernels given for q = {}", self.kernels.len(), self.q));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        for &k in self.kernels.iter().chain([&self.primary_kernel]) {
            if k == 0 || k % 2 == 0 {
                return fail(format!("kernel {k} must be odd and positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub reduction: usize,
    pub spatial_kernel: usize,
    pub channel: bool,
    pub spatial: bool,
    /// Add a max-pooled descriptor to the channel gate (CBAM style).
    pub dual_pool: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { reduction: 16, spatial_kernel: 7, channel: true, spatial: true, dual_pool: false }
    }
}

impl AttentionConfig {
    pub fn reduced(&self, channels: usize) -> usize {
        (channels / self.reduction.max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 {
            return Err(Error::Config("attention reduction must be positive".into()));
        }
        if self.spatial_kernel == 0 || self.spatial_kernel % 2 == 0 {
            return Err(Error::Config(format!("spatial kernel {} must be odd", self.spatial_kernel)));
        }
        Ok(())
    }
}

/// Convolution type used inside the residual body of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Ghost,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrabConfig {
    pub channels: usize,
    pub body: ConvKind,
    /// Bias on standard body convolutions; ghost modules follow `ghost.bias`.
    pub bias: bool,
    pub ghost: GhostConfig,
    pub attention: AttentionConfig,
}

impl GrabConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            body: ConvKind::Ghost,
            bias: true,
            ghost: GhostConfig::new(channels, channels),
            attention: AttentionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ghost.in_channels != self.channels || self.ghost.out_channels != self.channels {
            return Err(Error::Config(format!(
                "block with {} channels needs a {}->{} ghost module, got {}->{}",
                self.channels, self.channels, self.channels, self.ghost.in_channels, self.ghost.out_channels
            )));
        }
        self.ghost.validate()?;
        self.attention.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Ghost {
    pub config: GhostConfig,
    pub primary: Conv,
    /// `(width, Ψ_j)`; zero-width branches are omitted.
    pub branches: Vec<(usize, Conv)>,
}

impl Ghost {
    pub fn build<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cfg: &GhostConfig) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.intrinsic();
        let primary = Conv::build(
            store,
            init,
            &format!("{name}.primary"),
            cfg.in_channels,
            m,
            cfg.primary_kernel,
            1,
            cfg.bias,
        )?;
        let mut branches = Vec::new();
        for (j, (&width, &k)) in cfg.branch_widths().iter().zip(&cfg.kernels).enumerate() {
            if width == 0 {
                continue;
            }
            let conv = Conv::build(store, init, &format!("{name}.cheap{}", j + 1), width, width, k, width, cfg.bias)?;
            branches.push((width, conv));
        }
        Ok(Self { config: cfg.clone(), primary, branches })
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        let c = g.value(x).channels();
        if c != self.config.in_channels {
            return Err(Error::shape("ghost", format!("expected {} input channels, got {}", self.config.in_channels, c)));
        }
        let m = self.config.intrinsic();
        let intrinsic = self.primary.forward(g, store, x)?;
        let mut parts = vec![intrinsic.clone()];
        for (width, conv) in &self.branches {
            let src = if *width == m { intrinsic.clone() } else { g.slice_channels(&intrinsic, 0, *width)? };
            parts.push(conv.forward(g, store, &src)?);
        }
        g.concat_channels(&parts)
    }

    pub fn param_count(&self) -> u64 {
        self.primary.param_count() + self.branches.iter().map(|(_, c)| c.param_count()).sum::<u64>()
    }
}

/// Squeeze-and-excitation gate: `M_c = σ(W_up · relu(W_down · avgpool(x)))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub down: Conv,
    pub up: Conv,
    pub dual_pool: bool,
}

impl ChannelAttention {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        let r = cfg.reduced(channels);
        Ok(Self {
            down: Conv::build(store, init, &format!("{name}.down"), channels, r, 1, 1, false)?,
            up: Conv::build(store, init, &format!("{name}.up"), r, channels, 1, 1, true)?,
            dual_pool: cfg.dual_pool,
        })
    }

    /// The `[N, C, 1, 1]` gate, each entry in (0, 1).
    pub fn gate<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        let avg = g.global_avg_pool(x)?;
        let mut logits = self.mlp(g, store, &avg)?;
        if self.dual_pool {
            let max = g.global_max_pool(x)?;
            let other = self.mlp(g, store, &max)?;
            logits = g.add(&logits, &other)?;
        }
        g.sigmoid(&logits)
    }

    fn mlp<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        let h = self.down.forward(g, store, x)?;
        let h = g.relu(&h)?;
        self.up.forward(g, store, &h)
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        let gate = self.gate(g, store, x)?;
        g.mul(x, &gate)
    }

    pub fn param_count(&self) -> u64 {
        self.down.param_count() + self.up.param_count()
    }
}

/// `M_s = σ(conv_k([mean_c(x), max_c(x)]))`, broadcast over channels.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv,
}

impl SpatialAttention {
    pub fn build<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { conv: Conv::build(store, init, &format!("{name}.conv"), 2, 1, cfg.spatial_kernel, 1, true)? })
    }

    /// The `[N, 1, H, W]` gate, each entry in (0, 1).
    pub fn gate<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        let desc = g.channel_mean_max(x)?;
        let logits = self.conv.forward(g, store, &desc)?;
        g.sigmoid(&logits)
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        let gate = self.gate(g, store, x)?;
        g.mul(x, &gate)
    }

    pub fn param_count(&self) -> u64 {
        self.conv.param_count()
    }
}

/// Channel attention followed by spatial attention. Either half can be
/// disabled for the ablation variants.
#[derive(Clone, Debug, Default)]
pub struct Csam {
    pub channel: Option<ChannelAttention>,
    pub spatial: Option<SpatialAttention>,
}

impl Csam {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let channel = if cfg.channel {
            Some(ChannelAttention::build(store, init, &format!("{name}.ca"), channels, cfg)?)
        } else {
            None
        };
        let spatial = if cfg.spatial {
            Some(SpatialAttention::build(store, init, &format!("{name}.sa"), cfg)?)
        } else {
            None
        };
        Ok(Self { channel, spatial })
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        let mut y = x.clone();
        if let Some(ca) = &self.channel {
            y = ca.forward(g, store, &y)?;
        }
        if let Some(sa) = &self.spatial {
            y = sa.forward(g, store, &y)?;
        }
        Ok(y)
    }

    pub fn param_count(&self) -> u64 {
        self.channel.as_ref().map_or(0, |c| c.param_count()) + self.spatial.as_ref().map_or(0, |s| s.param_count())
    }
}

#[derive(Clone, Debug)]
pub enum BodyConv {
    Standard(Conv),
    Ghost(Ghost),
}

impl BodyConv {
    fn build<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cfg: &GrabConfig) -> Result<Self> {
        Ok(match cfg.body {
            ConvKind::Standard => {
                BodyConv::Standard(Conv::build(store, init, name, cfg.channels, cfg.channels, 3, 1, cfg.bias)?)
            }
            ConvKind::Ghost => BodyConv::Ghost(Ghost::build(store, init, name, &cfg.ghost)?),
        })
    }

    fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        match self {
            BodyConv::Standard(c) => c.forward(g, store, x),
            BodyConv::Ghost(gh) => gh.forward(g, store, x),
        }
    }

    pub fn param_count(&self) -> u64 {
        match self {
            BodyConv::Standard(c) => c.param_count(),
            BodyConv::Ghost(gh) => gh.param_count(),
        }
    }
}

/// Ghost residual attention block: `y = x + csam(conv2(relu(conv1(x))))`.
#[derive(Clone, Debug)]
pub struct Grab {
    pub config: GrabConfig,
    pub conv1: BodyConv,
    pub conv2: BodyConv,
    pub attention: Csam,
}

impl Grab {
    pub fn build<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cfg: &GrabConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            config: cfg.clone(),
            conv1: BodyConv::build(store, init, &format!("{name}.conv1"), cfg)?,
            conv2: BodyConv::build(store, init, &format!("{name}.conv2"), cfg)?,
            attention: Csam::build(store, init, name, cfg.channels, &cfg.attention)?,
        })
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        let c = g.value(x).channels();
        if c != self.config.channels {
            return Err(Error::shape("grab", format!("expected {} channels, got {}", self.config.channels, c)));
        }
        let h = self.conv1.forward(g, store, x)?;
        let h = g.relu(&h)?;
        let h = self.conv2.forward(g, store, &h)?;
        let h = self.attention.forward(g, store, &h)?;
        g.add(x, &h)
    }

    pub fn param_count(&self) -> u64 {
        self.conv1.param_count() + self.conv2.param_count() + self.attention.param_count()
    }
}
