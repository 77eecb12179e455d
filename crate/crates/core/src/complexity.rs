//! Static parameter and multiply-accumulate accounting.
//!
//! Nothing here builds or runs a network: layer lists are derived from a
//! [`NetConfig`] directly, so the live model's census is an independent check.
//!
//! Counting convention: one multiply-add is one MAC and "FLOPs" means MACs
//! unless [`AnalyzeOptions::flops_x2`] is set. Convolutions cost
//! `C_out·H'·W'·(C_in/groups)·k²`. Attention costs are counted exactly in the
//! default mode: pooled descriptors cost one op per input element, gating
//! costs one multiply per gated element, and the channel-attention MLP runs
//! once per image. Bias additions and activations are free.

use std::fmt::Write as _;

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::nn::{ConvKind, GhostConfig};

/// LR input size used when none is given.
pub const DEFAULT_INPUT_HW: (usize, usize) = (60, 60);

/// How the cheap ghost operations Ψ are costed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CountMode {
    /// Ψ_j is a depthwise `k_j × k_j` convolution (what the network builds).
    #[default]
    Depthwise,
    /// Ψ_j is a dense `m → m` convolution, the literal parameter formula. Requires q = 3.
    Dense,
}

impl std::str::FromStr for CountMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depthwise" => Ok(CountMode::Depthwise),
            "dense" => Ok(CountMode::Dense),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected depthwise|dense)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AnalyzeOptions {
    pub mode: CountMode,
    /// Drop attention layers and biases, matching the closed-form cost formulas.
    pub closed_form: bool,
    /// Report FLOPs as 2 × MACs.
    pub flops_x2: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Ghost,
    ChannelAttention,
    SpatialAttention,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Ghost => "ghost",
            LayerKind::ChannelAttention => "channel_attn",
            LayerKind::SpatialAttention => "spatial_attn",
        }
    }
}

/// One layer to be costed. `res` is the output resolution as a multiple of the LR input size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { name: String, kernel: usize, c_in: usize, c_out: usize, groups: usize, bias: bool, res: usize },
    Ghost { name: String, cfg: GhostConfig, res: usize },
    ChannelAttention { name: String, channels: usize, reduced: usize, dual_pool: bool, res: usize },
    SpatialAttention { name: String, channels: usize, kernel: usize, res: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRow {
    pub name: String,
    pub kind: LayerKind,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub rows: Vec<LayerRow>,
    pub input_hw: (usize, usize),
    pub options: AnalyzeOptions,
}

impl ComplexityReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.total_macs() * if self.options.flops_x2 { 2 } else { 1 }
    }

    /// `(params ratio, MACs ratio)` of `self` over `reference`.
    pub fn ratio_to(&self, reference: &ComplexityReport) -> (f64, f64) {
        (
            self.total_params() as f64 / reference.total_params() as f64,
            self.total_macs() as f64 / reference.total_macs() as f64,
        )
    }

    pub fn render_table(&self) -> String {
        let unit = if self.options.flops_x2 { "FLOPs" } else { "MACs" };
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:<12}  {:>12}  {:>16}", "layer", "kind", "params", unit);
        let _ = writeln!(s, "{}", "-".repeat(w + 46));
        let scale = if self.options.flops_x2 { 2 } else { 1 };
        for r in &self.rows {
            let _ = writeln!(s, "{:<w$}  {:<12}  {:>12}  {:>16}", r.name, r.kind.name(), r.params, r.macs * scale);
        }
        let _ = writeln!(s, "{}", "-".repeat(w + 46));
        let _ = writeln!(s, "{:<w$}  {:<12}  {:>12}  {:>16}", "total", "", self.total_params(), self.total_flops());
        let _ = writeln!(
            s,
            "params {:.3}M  {} {:.3}G  (input {}x{})",
            self.total_params() as f64 / 1e6,
            unit,
            self.total_flops() as f64 / 1e9,
            self.input_hw.0,
            self.input_hw.1
        );
        s
    }

    /// Machine-readable form, one `key=value` per line.
    pub fn render_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input.h={}", self.input_hw.0);
        let _ = writeln!(s, "input.w={}", self.input_hw.1);
        for r in &self.rows {
            let _ = writeln!(s, "layer.{}.params={}", r.name, r.params);
            let _ = writeln!(s, "layer.{}.macs={}", r.name, r.macs);
        }
        let _ = writeln!(s, "total.params={}", self.total_params());
        let _ = writeln!(s, "total.macs={}", self.total_macs());
        let _ = writeln!(s, "total.flops={}", self.total_flops());
        s
    }
}

/// `k·k·M·N`, plus `N` with bias.
pub fn count_conv_params(k: usize, m: usize, n: usize, bias: bool) -> u64 {
    (k * k * m * n + if bias { n } else { 0 }) as u64
}

/// Parameters of one ghost module; biases follow `g.bias`.
pub fn count_ghost_params(g: &GhostConfig, mode: CountMode) -> Result<u64> {
    g.validate()?;
    let m = g.intrinsic();
    let b = |c: usize| if g.bias { c as u64 } else { 0 };
    let primary = (g.primary_kernel * g.primary_kernel * g.in_channels * m) as u64 + b(m);
    let cheap: u64 = match mode {
        CountMode::Depthwise => {
            g.branch_widths().iter().zip(&g.kernels).map(|(&w, &k)| (k * k * w) as u64 + b(w)).sum()
        }
        CountMode::Dense => {
            require_q3(g)?;
            g.kernels.iter().map(|&k| (k * k * m * m) as u64 + b(m)).sum()
        }
    };
    Ok(primary + cheap)
}

fn require_q3(g: &GhostConfig) -> Result<()> {
    if g.q != 3 {
        return Err(Error::Unsupported(format!("dense ghost counting is defined for q = 3 only (got q = {})", g.q)));
    }
    Ok(())
}

/// `n·h'·w'·c·k·k`.
pub fn conv_macs(k: usize, c: usize, n: usize, h: usize, w: usize) -> u64 {
    (n * h * w * c * k * k) as u64
}

/// `m·h'·w'·c·k_p² + Σ_j cost(Ψ_j)` where a depthwise Ψ_j costs `w_j·h'·w'·k_j²`.
pub fn ghost_macs(g: &GhostConfig, h: usize, w: usize, mode: CountMode) -> Result<u64> {
    g.validate()?;
    let m = g.intrinsic();
    let primary = conv_macs(g.primary_kernel, g.in_channels, m, h, w);
    let cheap: u64 = match mode {
        CountMode::Depthwise => g.branch_widths().iter().zip(&g.kernels).map(|(&bw, &k)| conv_macs(k, 1, bw, h, w)).sum(),
        CountMode::Dense => {
            require_q3(g)?;
            g.kernels.iter().map(|&k| conv_macs(k, m, m, h, w)).sum()
        }
    };
    Ok(primary + cheap)
}

/// Closed-form conv-vs-ghost speed-up `q·c·k² / (c·k² + (q−1)·d²)`, exactly.
pub fn speed_ratio_exact(q: u64, c: u64, k: u64, d: u64) -> Ratio<u64> {
    Ratio::new(q * c * k * k, c * k * k + (q - 1) * d * d)
}

pub fn speed_ratio(q: u64, c: u64, k: u64, d: u64) -> f64 {
    let r = speed_ratio_exact(q, c, k, d);
    *r.numer() as f64 / *r.denom() as f64
}

fn layer_row(spec: &LayerSpec, (h0, w0): (usize, usize), opts: AnalyzeOptions) -> Result<Option<LayerRow>> {
    let bias_ok = !opts.closed_form;
    Ok(Some(match spec {
        LayerSpec::Conv { name, kernel, c_in, c_out, groups, bias, res } => {
            let (h, w) = (h0 * res, w0 * res);
            LayerRow {
                name: name.clone(),
                kind: LayerKind::Conv,
                params: count_conv_params(*kernel, c_in / groups, *c_out, *bias && bias_ok),
                macs: conv_macs(*kernel, c_in / groups, *c_out, h, w),
            }
        }
        LayerSpec::Ghost { name, cfg, res } => {
            let cfg = GhostConfig { bias: cfg.bias && bias_ok, ..cfg.clone() };
            LayerRow {
                name: name.clone(),
                kind: LayerKind::Ghost,
                params: count_ghost_params(&cfg, opts.mode)?,
                macs: ghost_macs(&cfg, h0 * res, w0 * res, opts.mode)?,
            }
        }
        LayerSpec::ChannelAttention { .. } | LayerSpec::SpatialAttention { .. } if opts.closed_form => return Ok(None),
        LayerSpec::ChannelAttention { name, channels, reduced, dual_pool, res } => {
            let hw = (h0 * res * w0 * res) as u64;
            let (c, r) = (*channels as u64, *reduced as u64);
            let paths = if *dual_pool { 2 } else { 1 };
            LayerRow {
                name: name.clone(),
                kind: LayerKind::ChannelAttention,
                params: c * r + r * c + c,
                macs: paths * (c * hw + 2 * c * r) + c * hw,
            }
        }
        LayerSpec::SpatialAttention { name, channels, kernel, res } => {
            let hw = (h0 * res * w0 * res) as u64;
            let (c, k) = (*channels as u64, *kernel as u64);
            LayerRow {
                name: name.clone(),
                kind: LayerKind::SpatialAttention,
                params: 2 * k * k + 1,
                macs: 2 * c * hw + 2 * k * k * hw + c * hw,
            }
        }
    }))
}

pub fn analyze_layers(layers: &[LayerSpec], input_hw: (usize, usize), opts: AnalyzeOptions) -> Result<ComplexityReport> {
    let rows = layers
        .iter()
        .map(|l| layer_row(l, input_hw, opts))
        .filter_map(Result::transpose)
        .collect::<Result<Vec<_>>>()?;
    Ok(ComplexityReport { rows, input_hw, options: opts })
}

/// Layer list of the network described by `cfg`, named like the built model's layers.
pub fn net_layers(cfg: &NetConfig) -> Result<Vec<LayerSpec>> {
    cfg.validate()?;
    let c = cfg.channels;
    let conv = |name: String, c_in: usize, c_out: usize, res: usize| LayerSpec::Conv {
        name,
        kernel: 3,
        c_in,
        c_out,
        groups: 1,
        bias: cfg.bias,
        res,
    };
    let mut layers = vec![conv("head".into(), cfg.colors, c, 1)];
    for g in 0..cfg.n_groups {
        for b in 0..cfg.n_blocks {
            let base = format!("groups.{g}.blocks.{b}");
            for which in ["conv1", "conv2"] {
                let name = format!("{base}.{which}");
                layers.push(match cfg.body {
                    ConvKind::Standard => conv(name, c, c, 1),
                    ConvKind::Ghost => LayerSpec::Ghost { name, cfg: cfg.ghost(), res: 1 },
                });
            }
            if cfg.attention.channel {
                layers.push(LayerSpec::ChannelAttention {
                    name: format!("{base}.ca"),
                    channels: c,
                    reduced: cfg.attention.reduced(c),
                    dual_pool: cfg.attention.dual_pool,
                    res: 1,
                });
            }
            if cfg.attention.spatial {
                layers.push(LayerSpec::SpatialAttention {
                    name: format!("{base}.sa"),
                    channels: c,
                    kernel: cfg.attention.spatial_kernel,
                    res: 1,
                });
            }
        }
        layers.push(conv(format!("groups.{g}.tail"), c, c, 1));
    }
    layers.push(conv("body_tail".into(), c, c, 1));
    let mut res = 1;
    for (i, r) in cfg.upscale_stages()?.into_iter().enumerate() {
        layers.push(conv(format!("upsample.{i}"), c, c * r * r, res));
        res *= r;
    }
    layers.push(conv("tail".into(), c, cfg.colors, res));
    Ok(layers)
}

pub fn analyze(cfg: &NetConfig, input_hw: (usize, usize), opts: AnalyzeOptions) -> Result<ComplexityReport> {
    analyze_layers(&net_layers(cfg)?, input_hw, opts)
}
