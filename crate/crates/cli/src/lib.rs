//! Command-line front end: `preprocess`, `train`, `inpaint` and `evaluate`.
//!
//! Settings resolve as command-line flag, then `--config` TOML file, then
//! the built-in profile. Each command writes the effective configuration to
//! `config.toml` in its output directory and logs its hash and seed.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use degnet::checkpoint::{load_checkpoint, save_checkpoint};
use degnet::dataset::{load_bundle, save_bundle, Manifest, Split};
use degnet::evaluation::{evaluate, EvalOptions, TrainedModel};
use degnet::generator::composite;
use degnet::imageio;
use degnet::model::{self, Networks};
use degnet::preprocessing::{build_region_bundle, HoleSpec, LandmarkSet, RawSample, RegionBundle};
use degnet::training::{fit, read_loss_history, write_loss_history, FitOutput, LossRecord, TrainConfig, TrainState};
use degnet::Tensor;

const BUNDLE_EXT: &str = "degb";

#[derive(Debug, Parser)]
#[command(name = "degnet", version, about = "Domain-embedded GAN face inpainting")]
struct Cli {
    /// Log verbosity.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,

    /// Seed override; defaults to the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Compute device.
    #[arg(long, global = true, value_enum, default_value = "cpu")]
    device: Device,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Device {
    Cpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Profile {
    /// 256², full widths, batch 60.
    Paper,
    /// 64², widths ÷4, batch 8.
    Desk,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build region bundles from a manifest.
    Preprocess(PreprocessArgs),
    /// Train from a manifest or a bundle directory.
    Train(TrainArgs),
    /// Complete a single image.
    Inpaint(InpaintArgs),
    /// Score a checkpoint on a manifest split.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML file with training-config keys.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Built-in defaults.
    #[arg(long, value_enum, default_value = "paper")]
    profile: Profile,

    #[arg(long)]
    resolution: Option<usize>,

    #[arg(long)]
    width_divisor: Option<usize>,

    #[arg(long)]
    gamma: Option<f64>,

    /// Hole spec; repeatable. `O1`..`O6`, `rect:t,l,h,w`, `mask:<png>` or `none`.
    #[arg(long = "hole")]
    holes: Vec<String>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,

    #[arg(long)]
    out: PathBuf,

    /// Manifest split to process; all splits when omitted.
    #[arg(long)]
    split: Option<Split>,

    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, required_unless_present = "bundles", conflicts_with = "bundles")]
    manifest: Option<PathBuf>,

    /// Directory written by `preprocess`.
    #[arg(long)]
    bundles: Option<PathBuf>,

    #[arg(long)]
    out: PathBuf,

    /// Continue from this checkpoint; its config replaces the profile defaults.
    #[arg(long)]
    resume: Option<PathBuf>,

    /// Stop after this many steps in total.
    #[arg(long)]
    max_steps: Option<u64>,

    #[arg(long)]
    epochs: Option<usize>,

    #[arg(long)]
    batch_size: Option<usize>,

    #[arg(long)]
    learning_rate: Option<f64>,

    #[arg(long)]
    checkpoint_every: Option<u64>,

    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct InpaintArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    #[arg(long)]
    image: PathBuf,

    /// JSON array of 68 `[x, y]` points in image pixels.
    #[arg(long)]
    landmarks: PathBuf,

    #[arg(long)]
    hole: String,

    /// Output PNG.
    #[arg(long)]
    out: PathBuf,

    /// Write the raw generator output instead of compositing it into the input.
    #[arg(long)]
    no_composite: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    #[arg(long)]
    manifest: PathBuf,

    /// Comma-separated hole specs.
    #[arg(long, value_delimiter = ',', default_value = "O1,O2,O3,O4,O5,O6")]
    holes: Vec<String>,

    #[arg(long)]
    out: PathBuf,

    #[arg(long, default_value = "test")]
    split: Split,

    /// Score the composite rather than the raw generator output.
    #[arg(long)]
    composite: bool,
}

/// Parses `argv` (without the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = std::iter::once(OsString::from("degnet")).chain(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            1
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match cli.device {
        Device::Cpu => {}
    }
    match &cli.command {
        Command::Preprocess(a) => preprocess(a, cli.seed),
        Command::Train(a) => train(a, cli.seed),
        Command::Inpaint(a) => inpaint(a, cli.seed),
        Command::Evaluate(a) => run_evaluate(a, cli.seed),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn resolve_config(base: TrainConfig, a: &ConfigArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            require_file(path, "config file")?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::layered(&base, &text).with_context(|| format!("config {}", path.display()))?
        }
        None => base,
    };
    if let Some(v) = a.resolution {
        cfg.resolution = v;
    }
    if let Some(v) = a.width_divisor {
        cfg.width_divisor = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if !a.holes.is_empty() {
        cfg.holes = a.holes.clone();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn profile_defaults(p: Profile) -> TrainConfig {
    match p {
        Profile::Paper => TrainConfig::paper(),
        Profile::Desk => TrainConfig::desk(),
    }
}

/// Validates `cfg`, logs its hash and seed and writes it to `dir/config.toml`.
fn announce(cfg: &TrainConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    info!("config hash {} seed {}", cfg.hash(), cfg.seed);
    create_dir(dir)?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml_string()?).with_context(|| format!("writing {}", path.display()))
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    require_file(path, "manifest")?;
    Ok(Manifest::load(path)?)
}

fn bundle_file_name(b: &RegionBundle) -> String {
    let label: String = b
        .label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    format!("{}__{label}.{BUNDLE_EXT}", b.id)
}

fn preprocess(a: &PreprocessArgs, seed: Option<u64>) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let cfg = resolve_config(profile_defaults(a.cfg.profile), &a.cfg, seed)?;
    let specs = cfg.hole_specs()?;
    announce(&cfg, &a.out)?;
    let opts = cfg.bundle_options();
    let mut count = 0;
    for rec in &manifest.records {
        if a.split.is_some_and(|s| s != rec.split) {
            continue;
        }
        let raw = manifest.load_sample(rec)?;
        for spec in &specs {
            let b = build_region_bundle(&raw, spec, &opts)?;
            save_bundle(&b, cfg.gamma, &a.out.join(bundle_file_name(&b)))?;
            count += 1;
        }
    }
    info!("wrote {count} bundles to {}", a.out.display());
    Ok(())
}

fn load_bundle_dir(dir: &Path, resolution: usize) -> Result<Vec<RegionBundle>> {
    if !dir.is_dir() {
        bail!("bundle directory not found: {}", dir.display());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == BUNDLE_EXT));
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let b = load_bundle(&p)?;
        if b.x_real.shape()[1] != resolution {
            bail!("{} has resolution {}, config expects {resolution}", p.display(), b.x_real.shape()[1]);
        }
        out.push(b);
    }
    Ok(out)
}

fn train(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    if let Some(m) = &a.manifest {
        require_file(m, "manifest")?;
    }
    let resumed = match &a.resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    let base = match &resumed {
        Some((cfg, _)) => cfg.clone(),
        None => profile_defaults(a.cfg.profile),
    };
    let mut cfg = resolve_config(base, &a.cfg, seed)?;
    if let Some(v) = a.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    announce(&cfg, &a.out)?;

    let nets = Networks::new(cfg.model_config())?;
    let data = match (&a.manifest, &a.bundles) {
        (Some(m), _) => Manifest::load(m)?.bundles(Split::Train, &cfg.hole_specs()?, &cfg.bundle_options())?,
        (None, Some(dir)) => load_bundle_dir(dir, cfg.resolution)?,
        (None, None) => unreachable!("clap requires one data source"),
    };
    let loss_path = a.out.join("loss_history.csv");
    let (state, mut history) = match resumed {
        Some((_, state)) => {
            state
                .params
                .conforms_to(&nets)
                .context("checkpoint does not match the configured model")?;
            let mut earlier = if loss_path.is_file() { read_loss_history(&loss_path)? } else { Vec::new() };
            earlier.retain(|r| r.step <= state.step);
            info!("resuming at step {}", state.step);
            (state, earlier)
        }
        None => (TrainState::new(&nets, cfg.seed), Vec::new()),
    };
    info!(
        "training on {} bundles for {} steps",
        data.len(),
        cfg.total_steps(data.len())
    );
    let every = cfg.checkpoint_every;
    let log_every = every.max(10);
    let (state, new) = fit(
        &nets,
        &data,
        &cfg,
        state,
        &FitOutput {
            checkpoint_dir: Some(a.out.clone()),
        },
        |r: &LossRecord| {
            if r.step % log_every == 0 {
                info!("step {} total {:.6} L_x_rec {:.6}", r.step, r.total, r.x_rec);
            }
        },
    )?;
    history.extend(new);
    write_loss_history(&history, &loss_path)?;
    let final_path = a.out.join("final.degn");
    save_checkpoint(&state, &cfg, &final_path)?;
    info!("wrote {}", final_path.display());
    Ok(())
}

fn read_landmarks(path: &Path) -> Result<LandmarkSet> {
    require_file(path, "landmarks file")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let pts: Vec<[f64; 2]> =
        serde_json::from_str(&text).with_context(|| format!("{}: expected a JSON array of [x, y] pairs", path.display()))?;
    LandmarkSet::new(pts).with_context(|| format!("landmarks {}", path.display()))
}

fn inpaint(a: &InpaintArgs, seed: Option<u64>) -> Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.image, "image")?;
    let landmarks = read_landmarks(&a.landmarks)?;
    let (mut cfg, state) = load_checkpoint(&a.checkpoint)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    info!("config hash {} seed {}", cfg.hash(), cfg.seed);
    let spec = a.hole.parse::<HoleSpec>()?.with_fill(cfg.fill_value);

    let image = imageio::load_rgb(&a.image)?;
    let [_, h, w, _] = image.shape() else {
        unreachable!("load_rgb yields rank-4 tensors")
    };
    let raw = RawSample {
        id: a.image.display().to_string(),
        foreground: Tensor::full(&[1, *h, *w, 1], 1.0),
        image,
        landmarks,
    };
    let b = build_region_bundle(&raw, &spec, &cfg.bundle_options())?;
    let nets = Networks::new(cfg.model_config())?;
    let mut out = model::inpaint(&nets, &state.params, &b.x_crop)?;
    if !a.no_composite {
        out = composite(&out, &b.x_crop, &b.hole_mask)?;
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    imageio::save_png(&out, &a.out)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn run_evaluate(a: &EvaluateArgs, seed: Option<u64>) -> Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    let manifest = load_manifest(&a.manifest)?;
    let specs = a
        .holes
        .iter()
        .map(|s| s.parse::<HoleSpec>())
        .collect::<degnet::Result<Vec<_>>>()?;
    let (mut cfg, state) = load_checkpoint(&a.checkpoint)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    announce(&cfg, &a.out)?;
    let specs: Vec<HoleSpec> = specs.into_iter().map(|s| s.with_fill(cfg.fill_value)).collect();
    let samples = manifest
        .split(a.split)
        .map(|r| manifest.load_sample(r))
        .collect::<degnet::Result<Vec<_>>>()?;
    let nets = Networks::new(cfg.model_config())?;
    let model = TrainedModel {
        nets: &nets,
        params: &state.params,
    };
    let opts = EvalOptions {
        bundle: cfg.bundle_options(),
        composite: a.composite,
        ..EvalOptions::new(cfg.resolution)
    };
    let report = evaluate(&model, &samples, &specs, &opts)?;
    report.write(&a.out)?;
    for s in &report.aggregates {
        info!(
            "{}: n={} psnr {:.3} ssim {:.4} ncc {:.4} l1 {:.4}",
            s.label, s.count, s.psnr, s.ssim, s.ncc, s.l1
        );
    }
    Ok(())
}
