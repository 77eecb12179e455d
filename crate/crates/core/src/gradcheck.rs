//! Central finite-difference checks of the reverse-mode adjoints, in `f64`.
//!
//! Each check builds a scalar loss `Σ f(inputs) ⊙ R` for a fixed random
//! projection `R`, runs one backward pass, then perturbs sampled input
//! coordinates by `±ε` and compares `(L(x+ε) − L(x−ε)) / 2ε` against the
//! recorded gradient. The per-entry error is `|a − n| / max(|a|, |n|, 1e-6)`.
//!
//! A coordinate whose ±ε evaluations make a different discrete choice than the
//! base point (a ReLU flips, a max moves) sits on a kink where the derivative
//! is undefined; it is counted as skipped rather than compared.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, TapeGraph};
use crate::net::{Model, NetConfig};
use crate::nn::{AttentionConfig, ChannelAttention, GhostConfig, Ghost, Grab, GrabConfig, Init, ParamStore, SpatialAttention};
use crate::tensor::{ConvGeom, GradTape, Shape, Tensor, Var};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Coordinates within ε of a kink.
    pub skipped: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < TOLERANCE
    }

    fn new(name: &str) -> Self {
        Self { name: name.to_string(), max_rel_error: 0.0, checked: 0, skipped: 0 }
    }

    fn merge(&mut self, other: GradCheck) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }

    fn record(&mut self, analytic: f64, plus: (f64, Vec<usize>), minus: (f64, Vec<usize>), base: &[usize], eps: f64) {
        if plus.1 != base || minus.1 != base {
            self.skipped += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * eps);
        self.max_rel_error = self.max_rel_error.max(rel_error(analytic, numeric));
        self.checked += 1;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Settings {
    pub eps: f64,
    /// Coordinates sampled per input tensor (all of them if the tensor is smaller).
    pub coords_per_tensor: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self { eps: 1e-3, coords_per_tensor: 48 }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Values in (−1, 1) whose pairwise gaps and distance from zero are at least
/// `0.7 / numel`, which keeps direct inputs of ReLU and max away from kinks.
pub fn separated(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut slots: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        slots.swap(i, rng.gen_range(0..=i));
    }
    let mut data = Vec::with_capacity(n);
    for &s in &slots {
        let u = (s as f64 + 0.35 + 0.3 * rng.gen::<f64>()) / n as f64;
        data.push(2.0 * u - 1.0);
    }
    Tensor::new(shape, data).expect("length matches shape")
}

fn projection(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn project(tape: &mut GradTape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.leaf(r.clone())?;
    let p = tape.mul(y, rv)?;
    tape.sum_all(p)
}

fn coords(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        sample(rng, n, k).into_vec()
    }
}

/// Checks `f` with respect to every tensor in `inputs`.
pub fn check_op<F>(name: &str, inputs: &[Tensor<f64>], settings: Settings, seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let build = |tape: &mut GradTape<f64>, xs: &[Tensor<f64>], r: Option<&Tensor<f64>>| -> Result<(Var, Vec<Var>, Var)> {
        let vars = xs.iter().map(|x| tape.leaf(x.clone())).collect::<Result<Vec<_>>>()?;
        let y = f(tape, &vars)?;
        let loss = match r {
            Some(r) => project(tape, y, r)?,
            None => y,
        };
        Ok((y, vars, loss))
    };

    let mut probe = GradTape::new();
    let (y, _, _) = build(&mut probe, inputs, None)?;
    let r = projection(probe.shape(y), &mut rng);

    let mut tape = GradTape::new();
    let (_, vars, loss) = build(&mut tape, inputs, Some(&r))?;
    let mut grads = tape.backward(loss, 1.0)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let base = tape.decisions();
    let eval = |xs: &[Tensor<f64>]| -> Result<(f64, Vec<usize>)> {
        let mut t = GradTape::new();
        let (_, _, l) = build(&mut t, xs, Some(&r))?;
        Ok((t.value(l).data()[0], t.decisions()))
    };

    let mut out = GradCheck::new(name);
    let mut xs = inputs.to_vec();
    for (ti, a) in analytic.iter().enumerate() {
        for i in coords(a.numel(), settings.coords_per_tensor, &mut rng) {
            let orig = xs[ti].data()[i];
            xs[ti].data_mut()[i] = orig + settings.eps;
            let plus = eval(&xs)?;
            xs[ti].data_mut()[i] = orig - settings.eps;
            let minus = eval(&xs)?;
            xs[ti].data_mut()[i] = orig;
            out.record(a.data()[i], plus, minus, &base, settings.eps);
        }
    }
    Ok(out)
}

/// Checks a parameterised forward pass with respect to every parameter in `store` and the input `x`.
pub fn check_params<F>(
    name: &str,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    settings: Settings,
    seed: u64,
    forward: F,
) -> Result<GradCheck>
where
    F: Fn(&mut TapeGraph<f64>, &ParamStore<f64>, &Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7f4a_7c15);
    let run = |store: &ParamStore<f64>, x: &Tensor<f64>, r: Option<&Tensor<f64>>| -> Result<(TapeGraph<f64>, Var, Var)> {
        let mut g = TapeGraph::new();
        let xv = g.input(x.clone())?;
        let y = forward(&mut g, store, &xv)?;
        let loss = match r {
            Some(r) => project(&mut g.tape, y, r)?,
            None => y,
        };
        Ok((g, xv, loss))
    };

    let (probe, _, y) = run(store, x, None)?;
    let r = projection(probe.tape.shape(y), &mut rng);

    let (mut g, xv, loss) = run(store, x, Some(&r))?;
    let mut grads = g.tape.backward(loss, 1.0)?;
    let dx = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    let dparams = g.param_grads(store, &mut grads);

    let base = g.tape.decisions();
    let eval = |store: &ParamStore<f64>, x: &Tensor<f64>| -> Result<(f64, Vec<usize>)> {
        let (g, _, l) = run(store, x, Some(&r))?;
        Ok((g.tape.value(l).data()[0], g.tape.decisions()))
    };

    let mut out = GradCheck::new(name);

    let mut xs = x.clone();
    for i in coords(x.numel(), settings.coords_per_tensor, &mut rng) {
        let orig = xs.data()[i];
        xs.data_mut()[i] = orig + settings.eps;
        let plus = eval(store, &xs)?;
        xs.data_mut()[i] = orig - settings.eps;
        let minus = eval(store, &xs)?;
        xs.data_mut()[i] = orig;
        out.record(dx.data()[i], plus, minus, &base, settings.eps);
    }

    let mut ps = store.clone();
    let ids: Vec<_> = store.ids().collect();
    for (id, a) in ids.into_iter().zip(&dparams) {
        for i in coords(a.numel(), settings.coords_per_tensor, &mut rng) {
            let orig = ps.tensor(id).data()[i];
            ps.tensor_mut(id).data_mut()[i] = orig + settings.eps;
            let plus = eval(&ps, x)?;
            ps.tensor_mut(id).data_mut()[i] = orig - settings.eps;
            let minus = eval(&ps, x)?;
            ps.tensor_mut(id).data_mut()[i] = orig;
            out.record(a.data()[i], plus, minus, &base, settings.eps);
        }
    }
    Ok(out)
}

/// Gives biases random values so their gradients are exercised away from zero init.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += scale * rng.gen_range(-1.0..1.0));
    }
}

type Case = fn(u64, Settings) -> Result<GradCheck>;

fn primitive_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d", |seed, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = separated([2, 3, 6, 5], &mut rng);
            let w = separated([4, 3, 3, 3], &mut rng);
            let b = separated([4, 1, 1, 1], &mut rng);
            check_op("conv2d", &[x, w, b], s, seed, |t, v| t.conv2d(v[0], v[1], Some(v[2]), ConvGeom::same(3)))
        }),
        ("conv2d_strided", |seed, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = separated([1, 4, 7, 7], &mut rng);
            let w = separated([4, 2, 3, 3], &mut rng);
            let geom = ConvGeom { stride: 2, padding: 1, groups: 2 };
            check_op("conv2d_strided", &[x, w], s, seed, move |t, v| t.conv2d(v[0], v[1], None, geom))
        }),
        ("depthwise_conv2d", |seed, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = separated([2, 3, 6, 6], &mut rng);
            let w = separated([3, 1, 5, 5], &mut rng);
            let b = separated([3, 1, 1, 1], &mut rng);
            check_op("depthwise_conv2d", &[x, w, b], s, seed, |t, v| {
                t.conv2d(v[0], v[1], Some(v[2]), ConvGeom::depthwise(5, 3))
            })
        }),
        ("relu", |seed, s| {
            let x = separated([2, 3, 4, 4], &mut ChaCha8Rng::seed_from_u64(seed));
            check_op("relu", &[x], s, seed, |t, v| t.relu(v[0]))
        }),
        ("sigmoid", |seed, s| {
            let x = separated([2, 3, 4, 4], &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| 4.0 * v);
            check_op("sigmoid", &[x], s, seed, |t, v| t.sigmoid(v[0]))
        }),
        ("add", |seed, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = separated([2, 3, 4, 4], &mut rng);
            let b = separated([2, 3, 4, 4], &mut rng);
            check_op("add", &[a, b], s, seed, |t, v| t.add(v[0], v[1]))
        }),
        ("mul", |seed, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = separated([2, 3, 4, 5], &mut rng);
            let b = separated([2, 3, 4, 5], &mut rng);
            check_op("mul", &[a, b], s, seed, |t, v| t.mul(v[0], v[1]))
        }),
        ("mul_broadcast", |seed, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = separated([2, 3, 4, 5], &mut rng);
            let c = separated([2, 3, 1, 1], &mut rng);
            let p = separated([2, 1, 4, 5], &mut rng);
            check_op("mul_broadcast", &[a, c, p], s, seed, |t, v| {
                let y = t.mul(v[0], v[1])?;
                t.mul(y, v[2])
            })
        }),
        ("scale", |seed, s| {
            let x = separated([1, 2, 3, 3], &mut ChaCha8Rng::seed_from_u64(seed));
            check_op("scale", &[x], s, seed, |t, v| t.scale(v[0], -1.75))
        }),
        ("concat_slice", |seed, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = separated([2, 2, 3, 3], &mut rng);
            let b = separated([2, 3, 3, 3], &mut rng);
            check_op("concat_slice", &[a, b], s, seed, |t, v| {
                let c = t.concat_channels(&[v[0], v[1]])?;
                t.slice_channels(c, 1, 3)
            })
        }),
        ("pad2d", |seed, s| {
            let x = separated([1, 2, 3, 4], &mut ChaCha8Rng::seed_from_u64(seed));
            check_op("pad2d", &[x], s, seed, |t, v| t.pad2d(v[0], 2))
        }),
        ("global_avg_pool", |seed, s| {
            let x = separated([2, 3, 4, 5], &mut ChaCha8Rng::seed_from_u64(seed));
            check_op("global_avg_pool", &[x], s, seed, |t, v| t.global_avg_pool(v[0]))
        }),
        ("global_max_pool", |seed, s| {
            let x = separated([2, 3, 4, 5], &mut ChaCha8Rng::seed_from_u64(seed));
            check_op("global_max_pool", &[x], s, seed, |t, v| t.global_max_pool(v[0]))
        }),
        ("channel_mean_max", |seed, s| {
            let x = separated([2, 5, 3, 4], &mut ChaCha8Rng::seed_from_u64(seed));
            check_op("channel_mean_max", &[x], s, seed, |t, v| t.channel_mean_max(v[0]))
        }),
        ("pixel_shuffle", |seed, s| {
            let x = separated([1, 8, 3, 2], &mut ChaCha8Rng::seed_from_u64(seed));
            check_op("pixel_shuffle", &[x], s, seed, |t, v| t.pixel_shuffle(v[0], 2))
        }),
        ("l1_loss", |seed, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = separated([1, 3, 4, 4], &mut rng);
            let target = x.map(|v| v + if v > 0.0 { 0.01 } else { -0.01 });
            check_op("l1_loss", &[x], s, seed, move |t, v| t.l1_loss(v[0], target.clone()))
        }),
    ]
}

fn block_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("ghost", |seed, s| {
            let mut store = ParamStore::new();
            let mut init = Init::new(seed);
            let cfg = GhostConfig::new(6, 7);
            let ghost = Ghost::build(&mut store, &mut init, "g", &cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            randomize(&mut store, &mut rng, 0.1);
            let x = separated([2, 6, 5, 5], &mut rng);
            check_params("ghost", &store, &x, s, seed, |g, p, x| ghost.forward(g, p, x))
        }),
        ("channel_attention", |seed, s| {
            let mut store = ParamStore::new();
            let mut init = Init::new(seed);
            let cfg = AttentionConfig { reduction: 4, dual_pool: true, ..AttentionConfig::default() };
            let ca = ChannelAttention::build(&mut store, &mut init, "ca", 8, &cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            randomize(&mut store, &mut rng, 0.1);
            let x = separated([2, 8, 4, 4], &mut rng);
            check_params("channel_attention", &store, &x, s, seed, |g, p, x| ca.forward(g, p, x))
        }),
        ("spatial_attention", |seed, s| {
            let mut store = ParamStore::new();
            let mut init = Init::new(seed);
            let sa = SpatialAttention::build(&mut store, &mut init, "sa", &AttentionConfig::default())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            randomize(&mut store, &mut rng, 0.1);
            let x = separated([2, 4, 6, 5], &mut rng);
            check_params("spatial_attention", &store, &x, s, seed, |g, p, x| sa.forward(g, p, x))
        }),
        ("grab", |seed, s| {
            let mut store = ParamStore::new();
            let mut init = Init::new(seed);
            let mut cfg = GrabConfig::new(8);
            cfg.attention.reduction = 4;
            let grab = Grab::build(&mut store, &mut init, "b", &cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            randomize(&mut store, &mut rng, 0.1);
            let x = separated([1, 8, 6, 6], &mut rng);
            check_params("grab", &store, &x, s, seed, |g, p, x| grab.forward(g, p, x))
        }),
    ]
}

fn model_case(seed: u64, s: Settings) -> Result<GradCheck> {
    let cfg = NetConfig::tiny(1, 1, 8, 2);
    let mut model = Model::<f64>::build(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randomize(&mut model.params, &mut rng, 0.05);
    let x = separated([1, 3, 8, 8], &mut rng).map(|v| 0.5 + 0.5 * v);
    let params = model.params.clone();
    check_params("model_tiny", &params, &x, s, seed, |g, p, x| model.forward_with(g, p, x))
}

/// Runs every check over `seeds`, keeping the worst error per check.
pub fn run_suite(seeds: &[u64], include_model: bool, settings: Settings) -> Result<Vec<GradCheck>> {
    if seeds.is_empty() {
        return Err(Error::Config("gradient check needs at least one seed".into()));
    }
    let mut cases = primitive_cases();
    cases.extend(block_cases());
    if include_model {
        cases.push(("model_tiny", model_case));
    }
    let mut out = Vec::with_capacity(cases.len());
    for (name, case) in cases {
        let mut acc = GradCheck::new(name);
        for &seed in seeds {
            acc.merge(case(seed, settings)?);
        }
        log::debug!(
            "{name}: max rel error {:.3e} over {} coordinates ({} at kinks)",
            acc.max_rel_error,
            acc.checked,
            acc.skipped
        );
        out.push(acc);
    }
    Ok(out)
}
