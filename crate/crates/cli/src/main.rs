//! `gran`: analyze, degrade, train, infer, eval and gradcheck from one binary.
//!
//! Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gran::complexity::{analyze, AnalyzeOptions, CountMode, DEFAULT_INPUT_HW};
use gran::config::KeyValues;
use gran::gradcheck::{run_suite, Settings, TOLERANCE};
use gran::imaging::{bicubic_resize, degrade, list_dataset, load_png, save_png, synthetic_image, Image, LumaRange, Scale};
use gran::metrics::{eval_dataset_with, quantized, MetricOptions};
use gran::train::{train_loop, Outcome, TrainConfig, TrainSet, Trainer};
use gran::{Checkpoint, Error, Model, NetConfig, Variant};

#[derive(Parser, Debug)]
#[command(name = "gran", version, about = "Ghost residual attention super-resolution toolkit")]
struct Cli {
    /// Key-value config file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set net.channels=32`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for weight initialisation and batch sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible execution (also enabled by GRAN_STRICT=1).
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print per-layer parameter and MAC counts.
    Analyze(AnalyzeArgs),
    /// Write bicubic low-resolution versions of a directory of HR images.
    Degrade(DegradeArgs),
    /// Train a network on HR images.
    Train(TrainArgs),
    /// Upscale images with a trained checkpoint.
    Infer(InferArgs),
    /// Score super-resolved images against HR references on luma.
    Eval(EvalArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Input size as HxW.
    #[arg(long, value_parser = parse_hw)]
    input_size: Option<(usize, usize)>,
    #[arg(long, value_parser = parse_mode, default_value = "depthwise")]
    mode: CountMode,
    /// Ablation variant (ab1..ab5).
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Drop attention rows and biases.
    #[arg(long)]
    closed_form: bool,
    /// Report FLOPs as 2 x MACs.
    #[arg(long)]
    flops_x2: bool,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Kv,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    hr_dir: PathBuf,
    out_dir: PathBuf,
    #[arg(long)]
    scale: usize,
    /// Also write the bicubic upscale of each LR image here.
    #[arg(long)]
    bicubic_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of HR training images (overrides `data.dir`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Train on this many generated images instead of a directory (overrides `data.synthetic`).
    #[arg(long)]
    synthetic: Option<usize>,
    /// Output directory for checkpoints (overrides `train.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total number of steps (overrides `train.steps`).
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    checkpoint: PathBuf,
    /// PNG files or directories of PNG files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Expected upscaling factor; refused if the checkpoint differs.
    #[arg(long)]
    scale: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    sr_dir: PathBuf,
    hr_dir: PathBuf,
    #[arg(long)]
    scale: usize,
    /// Border pixels ignored on each side (default: the scale).
    #[arg(long)]
    shave: Option<usize>,
    /// Round luma to 8-bit levels before scoring.
    #[arg(long)]
    round_luma: bool,
    /// Full-swing instead of studio-swing luma.
    #[arg(long)]
    full_range: bool,
    /// Write `name,psnr,ssim` rows plus a MEAN row here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Size::Tiny)]
    size: Size,
    /// Number of seeds, starting at `--seed` (default 0).
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Size {
    /// Primitives, blocks and a one-block model.
    Tiny,
    /// Primitives and blocks only.
    Ops,
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).unwrap_or((s, s));
    let p = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| format!("bad size {s:?} (expected HxW)"));
    Ok((p(h)?, p(w)?))
}

fn parse_mode(s: &str) -> Result<CountMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// An error carrying its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Config(_)) => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

/// Config file overlaid with `--set` overrides, `--seed` and strict mode.
struct Resolved {
    kv: KeyValues,
    strict: bool,
}

fn resolve(cli: &Cli) -> Result<Resolved, Failure> {
    let mut kv = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))
                .map_err(usage)?;
            KeyValues::parse(&text).with_context(|| format!("in {}", path.display())).map_err(usage)?
        }
        None => KeyValues::new(),
    };
    for o in &cli.overrides {
        let (k, v) = KeyValues::parse_override(o).map_err(|e| usage(e.into()))?;
        kv.set(k, v);
    }
    if let Some(seed) = cli.seed {
        kv.set("train.seed", seed);
    }
    let strict = cli.strict || std::env::var("GRAN_STRICT").is_ok_and(|v| v.trim() == "1");
    if strict {
        kv.set("train.strict", true);
    }
    Ok(Resolved { kv, strict })
}

/// Splits the config into network and training sections, rejecting anything else.
fn configs(kv: &KeyValues) -> Result<(NetConfig, TrainConfig, KeyValues), Failure> {
    let mut kv = kv.clone();
    let net = NetConfig::from_kv(&mut kv)?;
    let train = TrainConfig::from_kv(&mut kv)?;
    let data = kv.take_section("data");
    if let Some(k) = kv.keys().next() {
        return Err(usage(anyhow!("unknown config key {k}")));
    }
    Ok((net, train, data))
}

fn seed_of(kv: &KeyValues) -> u64 {
    kv.get("train.seed").and_then(|s| s.parse().ok()).unwrap_or(0)
}

fn cmd_analyze(r: &Resolved, a: &AnalyzeArgs) -> Result<(), Failure> {
    let mut kv = r.kv.clone();
    if let Some(v) = a.variant {
        // the variant preset applies first; explicit keys still override it
        kv.set("net.variant", v);
    }
    let (cfg, _, _) = configs(&kv)?;
    let opts = AnalyzeOptions { mode: a.mode, closed_form: a.closed_form, flops_x2: a.flops_x2 };
    let report = analyze(&cfg, a.input_size.unwrap_or(DEFAULT_INPUT_HW), opts)?;
    match a.format {
        Format::Table => print!("{}", report.render_table()),
        Format::Kv => print!("{}", report.render_kv()),
    }
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display())).map_err(Failure::from)
}

fn check_scale(scale: usize) -> Result<(), Failure> {
    if gran::net::SUPPORTED_SCALES.contains(&scale) {
        Ok(())
    } else {
        Err(usage(anyhow!("scale {scale} is not supported (expected one of {:?})", gran::net::SUPPORTED_SCALES)))
    }
}

fn cmd_degrade(a: &DegradeArgs) -> Result<(), Failure> {
    check_scale(a.scale)?;
    let files = list_dataset(&a.hr_dir)?;
    create_dir(&a.out_dir)?;
    if let Some(d) = &a.bicubic_dir {
        create_dir(d)?;
    }
    for f in &files {
        let (_, lr) = degrade(&load_png(f)?, a.scale)?;
        let lr = quantized(&lr);
        let name = file_name(f);
        save_png(&lr, a.out_dir.join(&name))?;
        if let Some(d) = &a.bicubic_dir {
            save_png(&bicubic_resize(&lr, Scale::from_integer(a.scale))?, d.join(&name))?;
        }
        log::info!("{name}: {}x{} -> {}x{}", lr.height() * a.scale, lr.width() * a.scale, lr.height(), lr.width());
    }
    println!("wrote {} images to {}", files.len(), a.out_dir.display());
    Ok(())
}

fn cmd_train(r: &Resolved, a: &TrainArgs) -> Result<(), Failure> {
    let mut kv = r.kv.clone();
    if let Some(out) = &a.out {
        kv.set("train.out_dir", out.display());
    }
    if let Some(steps) = a.steps {
        kv.set("train.steps", steps);
    }
    let (net, mut train, mut data) = configs(&kv)?;
    let dir: Option<PathBuf> = a.data.clone().or(data.take("dir")?);
    let synthetic: Option<usize> = a.synthetic.or(data.take("synthetic")?);
    data.finish("data")?;
    if train.out_dir.is_none() {
        train.out_dir = Some(PathBuf::from("runs"));
    }

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config.scale != net.scale {
                return Err(usage(anyhow!(
                    "checkpoint {} upscales x{} but the configuration asks for x{}",
                    path.display(),
                    ck.config.scale,
                    net.scale
                )));
            }
            let set = training_set(dir.as_deref(), synthetic, ck.config.scale, train.seed)?;
            Trainer::resume(ck, set, train)?
        }
        None => {
            let set = training_set(dir.as_deref(), synthetic, net.scale, train.seed)?;
            Trainer::new(Model::build(&net, train.seed)?, set, train)?
        }
    };
    let report = train_loop(&mut trainer, &mut |line| println!("{line}"))?;
    let out = trainer.cfg.out_dir.clone().unwrap_or_default().join("last.gran");
    match report.outcome {
        Outcome::Completed => {
            println!("saved {}", out.display());
            Ok(())
        }
        Outcome::Halted { step, error } => Err(Failure {
            code: 1,
            error: anyhow!("training halted at step {step}: {error}; last good checkpoint saved to {}", out.display()),
        }),
    }
}

fn training_set(dir: Option<&Path>, synthetic: Option<usize>, scale: usize, seed: u64) -> Result<TrainSet, Failure> {
    match (dir, synthetic) {
        (Some(_), Some(_)) => Err(usage(anyhow!("give either a data directory or a synthetic image count, not both"))),
        (Some(d), None) => Ok(TrainSet::from_dir(d, scale)?),
        (None, Some(n)) if n > 0 => {
            let images: Vec<Image> = (0..n as u64).map(|i| synthetic_image(128, 128, seed.wrapping_mul(1_000_003).wrapping_add(i))).collect();
            Ok(TrainSet::from_images(&images, scale)?)
        }
        _ => Err(usage(anyhow!("no training data: pass --data DIR or --synthetic N (or set data.dir)"))),
    }
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            files.extend(list_dataset(p)?);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(usage(anyhow!("input {} does not exist", p.display())));
        }
    }
    Ok(files)
}

fn cmd_infer(a: &InferArgs) -> Result<(), Failure> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if let Some(s) = a.scale {
        if s != ck.config.scale {
            return Err(usage(anyhow!(
                "checkpoint {} upscales x{} but x{s} was requested",
                a.checkpoint.display(),
                ck.config.scale
            )));
        }
    }
    let model = ck.into_model()?;
    let files = expand_inputs(&a.inputs)?;
    create_dir(&a.out)?;
    for f in &files {
        let lr = load_png(f)?;
        let sr = Image::new(model.infer(&lr.tensor)?, f.display().to_string())?;
        let out = a.out.join(file_name(f));
        save_png(&sr, &out)?;
        println!("{} ({}x{}) -> {} ({}x{})", f.display(), lr.height(), lr.width(), out.display(), sr.height(), sr.width());
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), Failure> {
    if a.scale == 0 {
        return Err(usage(anyhow!("scale must be positive")));
    }
    let opts = MetricOptions {
        shave: a.shave.unwrap_or(a.scale),
        luma: if a.full_range { LumaRange::Full } else { LumaRange::Studio },
        round_luma: a.round_luma,
    };
    let result = eval_dataset_with(&a.sr_dir, &a.hr_dir, a.scale, &opts)?;
    print!("{}", result.render_table());
    if let Some(csv) = &a.csv {
        fs::write(csv, result.to_csv()).with_context(|| format!("cannot write {}", csv.display()))?;
    }
    Ok(())
}

fn cmd_gradcheck(r: &Resolved, a: &GradcheckArgs) -> Result<(), Failure> {
    if a.seeds == 0 {
        return Err(usage(anyhow!("--seeds must be at least 1")));
    }
    let first = seed_of(&r.kv);
    let seeds: Vec<u64> = (first..first + a.seeds).collect();
    let checks = run_suite(&seeds, matches!(a.size, Size::Tiny), Settings::default())?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(4);
    let mut worst: f64 = 0.0;
    for c in &checks {
        worst = worst.max(c.max_rel_error);
        println!(
            "{:<width$}  {}  max rel error {:.3e}  ({} coords, {} near kinks)",
            c.name,
            if c.passed() { "ok  " } else { "FAIL" },
            c.max_rel_error,
            c.checked,
            c.skipped
        );
    }
    println!("max relative error {worst:.3e} (tolerance {TOLERANCE:e}) over {} seeds", seeds.len());
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(anyhow!("{failed} gradient checks failed").into());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let r = resolve(cli)?;
    if r.strict {
        // Read by rayon when its global pool starts.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    match &cli.command {
        Command::Analyze(a) => cmd_analyze(&r, a),
        Command::Degrade(a) => cmd_degrade(a),
        Command::Train(a) => cmd_train(&r, a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(&r, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
