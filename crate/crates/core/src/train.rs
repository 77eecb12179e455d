//! Adam training on randomly sampled, augmented LR/HR patch batches.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::graph::TapeGraph;
use crate::imaging::{augment_tensor, bicubic_resize, degrade, list_dataset, load_png, Image, ImagePair, Scale};
use crate::metrics::{evaluate, quantized, EvalResult, MetricOptions};
use crate::net::{Checkpoint, Model, OptimizerState};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Adam moments in parameter order and the number of completed steps.
pub type AdamState = OptimizerState;

impl OptimizerState {
    /// Zero moments shaped like `params`, step 0.
    pub fn zeros(params: &ParamStore<f32>) -> Self {
        let z: Vec<Tensor<f32>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { step: 0, first: z.clone(), second: z }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Loss {
    #[default]
    L1,
}

impl std::str::FromStr for Loss {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "l1" => Ok(Loss::L1),
            other => Err(format!("unknown loss {other:?} (expected l1)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// LR patch side; HR patches are `scale` times larger.
    pub patch_size: usize,
    pub lr0: f64,
    /// Steps between learning-rate halvings.
    pub halving_interval: u64,
    pub adam: AdamParams,
    pub steps: u64,
    pub seed: u64,
    pub loss: Loss,
    pub augment: bool,
    /// Steps between log lines; 0 disables logging.
    pub log_every: u64,
    /// Steps between checkpoints written to `out_dir`; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub out_dir: Option<PathBuf>,
    /// Number of recent step losses averaged into the smoothed loss.
    pub smoothing: usize,
    /// Single-threaded execution for bit-exact reproducibility.
    pub strict: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            patch_size: 48,
            lr0: 1e-4,
            halving_interval: 200_000,
            adam: AdamParams::default(),
            steps: 1000,
            seed: 0,
            loss: Loss::L1,
            augment: true,
            log_every: 100,
            checkpoint_every: 0,
            out_dir: None,
            smoothing: 50,
            strict: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.patch_size == 0 || self.halving_interval == 0 || self.smoothing == 0 {
            return bad("train.batch_size, train.patch_size, train.halving_interval and train.smoothing must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("train.lr0 must be positive");
        }
        let AdamParams { beta1, beta2, eps } = self.adam;
        if !(0.0 < beta1 && beta1 < 1.0 && 0.0 < beta2 && beta2 < 1.0) {
            return bad("train.beta1 and train.beta2 must lie in (0, 1)");
        }
        if !(eps > 0.0) {
            return bad("train.eps must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.patch_size", self.patch_size);
        kv.set("train.lr0", self.lr0);
        kv.set("train.halving_interval", self.halving_interval);
        kv.set("train.beta1", self.adam.beta1);
        kv.set("train.beta2", self.adam.beta2);
        kv.set("train.eps", self.adam.eps);
        kv.set("train.steps", self.steps);
        kv.set("train.seed", self.seed);
        kv.set("train.loss", "l1");
        kv.set("train.augment", self.augment);
        kv.set("train.log_every", self.log_every);
        kv.set("train.checkpoint_every", self.checkpoint_every);
        if let Some(d) = &self.out_dir {
            kv.set("train.out_dir", d.display());
        }
        kv.set("train.smoothing", self.smoothing);
        kv.set("train.strict", self.strict);
        kv
    }

    /// Reads the `train.` section of `kv` over defaults; unknown `train.` keys are rejected.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let mut s = kv.take_section("train");
        let mut c = TrainConfig::default();
        macro_rules! field {
            ($key:literal, $dst:expr) => {
                if let Some(v) = s.take($key)? {
                    $dst = v;
                }
            };
        }
        field!("batch_size", c.batch_size);
        field!("patch_size", c.patch_size);
        field!("lr0", c.lr0);
        field!("halving_interval", c.halving_interval);
        field!("beta1", c.adam.beta1);
        field!("beta2", c.adam.beta2);
        field!("eps", c.adam.eps);
        field!("steps", c.steps);
        field!("seed", c.seed);
        field!("loss", c.loss);
        field!("augment", c.augment);
        field!("log_every", c.log_every);
        field!("checkpoint_every", c.checkpoint_every);
        if let Some(d) = s.take::<PathBuf>("out_dir")? {
            c.out_dir = Some(d);
        }
        field!("smoothing", c.smoothing);
        field!("strict", c.strict);
        s.finish("train")?;
        c.validate()?;
        Ok(c)
    }
}

/// `lr0 · 0.5^floor(step / interval)`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let halvings = (step / cfg.halving_interval).min(i32::MAX as u64) as i32;
    cfg.lr0 * 0.5f64.powi(halvings)
}

/// One bias-corrected Adam update of every parameter. Nothing changes if any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    lr: f64,
    hp: &AdamParams,
) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() || state.second.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameters, {} gradients, {}/{} moments", params.len(), grads.len(), state.first.len(), state.second.len()),
        ));
    }
    for ((id, g), (m, v)) in params.ids().zip(grads).zip(state.first.iter().zip(&state.second)) {
        let shape = params.tensor(id).shape();
        if g.shape() != shape || m.shape() != shape || v.shape() != shape {
            return Err(Error::shape("adam_step", format!("{} expects {shape:?}", params.name(id))));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "adam_step" });
        }
    }
    state.step += 1;
    let t = state.step.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = params.tensor_mut(id).data_mut();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, &g) in grads[i].data().iter().enumerate() {
            let g = g as f64;
            let mj = hp.beta1 * m[j] as f64 + (1.0 - hp.beta1) * g;
            let vj = hp.beta2 * v[j] as f64 + (1.0 - hp.beta2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + hp.eps);
            p[j] = (p[j] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// HR images prepared for patch sampling at a fixed scale.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub pairs: Vec<ImagePair>,
    pub scale: usize,
}

impl TrainSet {
    pub fn from_images(images: &[Image], scale: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let pairs = images.iter().map(|img| ImagePair::from_hr(img, scale)).collect::<Result<Vec<_>>>()?;
        Ok(Self { pairs, scale })
    }

    pub fn from_dir(dir: impl AsRef<Path>, scale: usize) -> Result<Self> {
        let images = list_dataset(dir)?.iter().map(load_png).collect::<Result<Vec<_>>>()?;
        Self::from_images(&images, scale)
    }

    /// A batch of patch pairs drawn with replacement, each with a uniformly drawn augmentation.
    pub fn sample_batch(&self, batch: usize, patch: usize, augment: bool, rng: &mut impl Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut lr = Vec::with_capacity(batch);
        let mut hr = Vec::with_capacity(batch);
        for _ in 0..batch {
            let pair = &self.pairs[rng.gen_range(0..self.pairs.len())];
            let p = pair.random_patch(patch, rng)?;
            let v = if augment { rng.gen_range(0..8) } else { 0 };
            lr.push(augment_tensor(&p.lr, v)?);
            hr.push(augment_tensor(&p.hr, v)?);
        }
        Ok((Tensor::stack(&lr.iter().collect::<Vec<_>>())?, Tensor::stack(&hr.iter().collect::<Vec<_>>())?))
    }
}

/// Mean of the most recent `window` values.
#[derive(Clone, Debug)]
pub struct Smoother {
    window: usize,
    values: VecDeque<f64>,
}

impl Smoother {
    pub fn new(window: usize) -> Self {
        Self { window: window.max(1), values: VecDeque::new() }
    }

    pub fn push(&mut self, v: f64) -> f64 {
        if self.values.len() == self.window {
            self.values.pop_front();
        }
        self.values.push_back(v);
        self.mean()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            f64::NAN
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }
}

/// Model, optimizer state and data for one training run.
pub struct Trainer {
    pub model: Model<f32>,
    pub state: AdamState,
    pub cfg: TrainConfig,
    pub data: TrainSet,
}

/// Forward, L1 loss and backward for one batch; returns the loss and per-parameter gradients.
pub fn loss_and_grads(model: &Model<f32>, lr: Tensor<f32>, hr: Tensor<f32>) -> Result<(f32, Vec<Tensor<f32>>)> {
    let mut g = TapeGraph::new();
    let x = g.tape.leaf(lr)?;
    let y = model.forward(&mut g, &x)?;
    let loss = g.tape.l1_loss(y, hr)?;
    let value = g.tape.value(loss).data()[0];
    let mut grads = g.tape.backward(loss, 1.0)?;
    Ok((value, g.param_grads(&model.params, &mut grads)))
}

impl Trainer {
    pub fn new(model: Model<f32>, data: TrainSet, cfg: TrainConfig) -> Result<Self> {
        let state = AdamState::zeros(&model.params);
        Self::with_state(model, state, data, cfg)
    }

    /// Continues from a checkpoint, reusing its optimizer state when present.
    pub fn resume(ck: Checkpoint, data: TrainSet, cfg: TrainConfig) -> Result<Self> {
        let state = ck.optimizer.clone();
        let model = ck.into_model()?;
        let state = state.unwrap_or_else(|| AdamState::zeros(&model.params));
        Self::with_state(model, state, data, cfg)
    }

    fn with_state(model: Model<f32>, state: AdamState, data: TrainSet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.scale != model.config.scale {
            return Err(Error::Config(format!(
                "training data prepared for x{} but the model upscales x{}",
                data.scale, model.config.scale
            )));
        }
        if state.first.len() != model.params.len() {
            return Err(Error::shape("trainer", "optimizer state does not match the model"));
        }
        Ok(Self { model, state, cfg, data })
    }

    /// Batch for `step`, drawn from a generator keyed on the seed and the step index alone.
    pub fn batch(&self, step: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);
        self.data.sample_batch(self.cfg.batch_size, self.cfg.patch_size, self.cfg.augment, &mut rng)
    }

    /// Runs one step and returns its loss. On error the model and state are untouched.
    pub fn step(&mut self) -> Result<f32> {
        let step = self.state.step;
        let (lr_batch, hr_batch) = self.batch(step)?;
        let (loss, grads) = loss_and_grads(&self.model, lr_batch, hr_batch)?;
        let lr = lr_schedule(step, &self.cfg);
        adam_step(&mut self.model.params, &grads, &mut self.state, lr, &self.cfg.adam)?;
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, Some(self.state.clone()))
    }
}

#[derive(Debug)]
pub enum Outcome {
    Completed,
    /// A step produced a non-finite value; the model holds the last good weights.
    Halted { step: u64, error: Error },
}

pub struct TrainReport {
    pub outcome: Outcome,
    /// Per-step losses of this run.
    pub losses: Vec<f32>,
    pub smoothed: Vec<f64>,
    pub checkpoint: Checkpoint,
}

impl TrainReport {
    /// Smoothed loss after the first full window and at the end.
    pub fn smoothed_first_last(&self, window: usize) -> Option<(f64, f64)> {
        let first = *self.smoothed.get(window.max(1) - 1)?;
        Some((first, *self.smoothed.last()?))
    }
}

pub fn format_log_line(step: u64, lr: f64, loss: f64) -> String {
    format!("step={step} lr={lr:e} loss={loss:.6}")
}

/// Trains until `cfg.steps` total steps have run, logging every `log_every`
/// steps and writing checkpoints to `out_dir` if set. The final (or last good)
/// checkpoint is always written there as `last.gran`.
pub fn train_loop(trainer: &mut Trainer, log: &mut (dyn FnMut(&str) + Send)) -> Result<TrainReport> {
    if trainer.cfg.strict {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Unsupported(format!("cannot build single-thread pool: {e}")))?;
        pool.install(|| run(trainer, log))
    } else {
        run(trainer, log)
    }
}

fn run(trainer: &mut Trainer, log: &mut (dyn FnMut(&str) + Send)) -> Result<TrainReport> {
    let cfg = trainer.cfg.clone();
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut smoother = Smoother::new(cfg.smoothing);
    let mut losses = Vec::new();
    let mut smoothed = Vec::new();
    let mut outcome = Outcome::Completed;
    while trainer.state.step < cfg.steps {
        let step = trainer.state.step;
        match trainer.step() {
            Ok(loss) => {
                losses.push(loss);
                smoothed.push(smoother.push(loss as f64));
            }
            Err(e @ Error::NonFinite { .. }) => {
                log(&format!("halted at step={step}: {e}"));
                outcome = Outcome::Halted { step, error: e };
                break;
            }
            Err(e) => return Err(e),
        }
        let done = trainer.state.step;
        if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == cfg.steps) {
            log(&format_log_line(done, lr_schedule(step, &cfg), smoother.mean()));
        }
        if let (Some(dir), true) = (&cfg.out_dir, cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            trainer.checkpoint().save(dir.join(format!("step_{done:08}.gran")))?;
        }
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = &cfg.out_dir {
        checkpoint.save(dir.join("last.gran"))?;
    }
    Ok(TrainReport { outcome, losses, smoothed, checkpoint })
}

/// Scores of a model and of plain bicubic upscaling on the same images.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub model: EvalResult,
    pub bicubic: EvalResult,
}

impl Benchmark {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model   PSNR {:.4} dB  SSIM {:.4}", self.model.mean_psnr, self.model.mean_ssim);
        let _ = writeln!(s, "bicubic PSNR {:.4} dB  SSIM {:.4}", self.bicubic.mean_psnr, self.bicubic.mean_ssim);
        s
    }
}

/// Degrades each HR image, then scores the model's reconstruction and the bicubic
/// upscale against it. Both outputs are quantised to 8 bits first.
pub fn benchmark(model: &Model<f32>, images: &[Image]) -> Result<Benchmark> {
    let scale = model.config.scale;
    let mut sr_items = Vec::with_capacity(images.len());
    let mut bic_items = Vec::with_capacity(images.len());
    for img in images {
        let (hr, lr) = degrade(img, scale)?;
        let lr = quantized(&lr);
        let sr = quantized(&Image::new(model.infer(&lr.tensor)?, img.source.clone())?);
        let bic = quantized(&bicubic_resize(&lr, Scale::from_integer(scale))?);
        sr_items.push((img.source.clone(), sr, hr.clone()));
        bic_items.push((img.source.clone(), bic, hr));
    }
    let opts = MetricOptions::for_scale(scale);
    Ok(Benchmark { model: evaluate(&sr_items, &opts)?, bicubic: evaluate(&bic_items, &opts)? })
}
