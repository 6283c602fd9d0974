//! Argument parsing and the subcommands.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dynfield::checkpoint::{load_checkpoint, save_checkpoint};
use dynfield::data::{generate_synthetic, load_dataset, save_dataset, Split, SyntheticSceneSpec};
use dynfield::field::FieldConfig;
use dynfield::render::PoseDelta;
use dynfield::train::{
    desk_field_config, desk_train_config, evaluate, train_until, LatentPolicy, TrainConfig, TrainState,
};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::avatar::{Avatar, ExpressionEdit, OutputKind, RenderError, RenderRequest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dynfield", version, about = "Expression-conditioned dynamic radiance fields")]
pub struct Cli {
    /// Seed for synthetic jitter and network initialization.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a preset.
    Synth(SynthArgs),
    /// Fit coarse and fine networks plus latent codes to a dataset.
    Train(TrainArgs),
    /// Render one view from a checkpoint.
    Render(RenderArgs),
    /// Print L1 / PSNR / SSIM of a checkpoint on a dataset as JSON.
    Eval(EvalArgs),
    /// Serve renders over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// `blob`, or `blob-jitter` (per-frame color jitter).
    #[arg(long, default_value = "blob")]
    pub preset: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Jitter the oracle's depth samples within their bins (uses --seed).
    #[arg(long)]
    pub jitter: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    /// Small networks for CPU runs.
    Desk,
    /// Full-size networks and batch settings.
    Full,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path (rewritten at every checkpoint interval and at the end).
    #[arg(long)]
    pub out: PathBuf,
    /// Total iteration count to reach.
    #[arg(long)]
    pub iters: Option<u64>,
    /// Continue from this checkpoint; its configuration is kept.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// JSON-lines loss log (default: `<out>.log.jsonl`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    pub scale: Scale,
    #[arg(long)]
    pub rays: Option<usize>,
    #[arg(long)]
    pub n_coarse: Option<usize>,
    #[arg(long)]
    pub n_fine: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub latent_lr: Option<f64>,
    #[arg(long)]
    pub latent_decay: Option<f64>,
    #[arg(long)]
    pub bbox_fraction: Option<f64>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    /// Keep latent codes at zero.
    #[arg(long)]
    pub no_latents: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Index of the base frame whose pose, expression and latent are used.
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Color image output.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub depth: Option<PathBuf>,
    #[arg(long)]
    pub normals: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<PathBuf>,
    /// Output width in pixels (16..=512).
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub yaw: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub pitch: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub roll: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub tx: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub ty: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub tz: f64,
    /// Blendshape edit `k=v` (repeatable), e.g. `--expr 0=+0.4`.
    #[arg(long = "expr", value_parser = parse_expr_edit, allow_hyphen_values = true)]
    pub expr: Vec<(usize, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    PerFrame,
    FirstTrainFrame,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = PolicyArg::PerFrame)]
    pub policy: PolicyArg,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Renders running at once; further requests queue.
    #[arg(long, default_value_t = 2)]
    pub max_concurrent: usize,
}

fn parse_expr_edit(s: &str) -> Result<(usize, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected k=v, got `{s}`"))?;
    let k: usize = k.trim().parse().map_err(|_| format!("bad blendshape index `{k}`"))?;
    let v: f64 = v
        .trim()
        .trim_start_matches('+')
        .parse()
        .map_err(|_| format!("bad value `{v}`"))?;
    if !v.is_finite() {
        return Err(format!("value for blendshape {k} must be finite"));
    }
    Ok((k, v))
}

/// Error wrapper carrying the exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    error: anyhow::Error,
}

fn classify(error: anyhow::Error) -> Failure {
    let code = match error.downcast_ref::<dynfield::Error>() {
        Some(e) if e.is_numeric() => EXIT_NUMERIC,
        Some(e) if e.is_data_error() => EXIT_DATA,
        _ => match error.downcast_ref::<RenderError>() {
            Some(RenderError::Engine(e)) if e.is_data_error() => EXIT_DATA,
            _ => EXIT_USAGE,
        },
    };
    Failure { code, error }
}

/// Parses `argv` (including the program name) and runs it; returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp_millis()
        .try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let f = classify(e);
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> anyhow::Result<()> {
    let spec = SyntheticSceneSpec::preset(&a.preset)
        .ok_or_else(|| anyhow!("unknown preset `{}` (expected blob or blob-jitter)", a.preset))?;
    info!(
        "config: {}",
        json!({"command": "synth", "preset": a.preset, "out": a.out, "jitter": a.jitter, "seed": cli.seed})
    );
    let dataset = generate_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(cli.seed), a.jitter)?;
    save_dataset(&dataset, &a.out)?;
    info!("wrote {} frames to {}", dataset.frames.len(), a.out.display());
    Ok(())
}

fn resolved_train_config(cli: &Cli, a: &TrainArgs, expr_dim: usize) -> (FieldConfig, TrainConfig) {
    let (field, base) = match a.scale {
        Scale::Desk => (desk_field_config(expr_dim), desk_train_config(cli.seed, 0)),
        Scale::Full => (
            FieldConfig {
                expr_dim,
                ..FieldConfig::default()
            },
            TrainConfig {
                seed: cli.seed,
                ..TrainConfig::default()
            },
        ),
    };
    let config = TrainConfig {
        rays_per_batch: a.rays.unwrap_or(base.rays_per_batch),
        n_coarse: a.n_coarse.unwrap_or(base.n_coarse),
        n_fine: a.n_fine.unwrap_or(base.n_fine),
        lr: a.lr.unwrap_or(base.lr),
        latent_lr: a.latent_lr.or(base.latent_lr),
        latent_decay: a.latent_decay.unwrap_or(base.latent_decay),
        bbox_fraction: a.bbox_fraction.unwrap_or(base.bbox_fraction),
        iterations: a.iters.unwrap_or(base.iterations),
        checkpoint_interval: a.checkpoint_interval.unwrap_or(base.checkpoint_interval),
        learn_latents: !a.no_latents,
        ..base
    };
    (field, config)
}

fn train(cli: &Cli, a: &TrainArgs) -> anyhow::Result<()> {
    let dataset = load_dataset(&a.data)?;
    let mut state = match &a.resume {
        Some(path) => {
            let mut s = load_checkpoint(path)?;
            if let Some(iters) = a.iters {
                s.config.iterations = iters;
            }
            s
        }
        None => {
            let (field, config) = resolved_train_config(cli, a, dataset.header.expr_dim);
            TrainState::new(field, config, dataset.latent_count())?
        }
    };
    let config_line = json!({
        "config": {
            "command": "train",
            "data": a.data,
            "out": a.out,
            "resume": a.resume,
            "field": state.field_config(),
            "train": state.config,
            "start_iteration": state.iteration,
        }
    });
    info!("config: {config_line}");
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "{config_line}")?;
    let until = state.config.iterations;
    let interval = state.config.checkpoint_interval;
    train_until(&mut state, &dataset, until, |s, report| {
        writeln!(log, "{}", serde_json::to_string(report).expect("report serializes")).map_err(|e| {
            dynfield::Error::Io {
                path: log_path.clone(),
                source: e,
            }
        })?;
        if interval > 0 && s.iteration % interval == 0 {
            save_checkpoint(s, &a.out)?;
        }
        if s.iteration % 100 == 0 || s.iteration == until {
            info!(
                "iter {} coarse {:.4} fine {:.4} latent {:.5}",
                s.iteration, report.loss_coarse, report.loss_fine, report.loss_latent
            );
        }
        Ok(())
    })?;
    log.flush()?;
    save_checkpoint(&state, &a.out)?;
    info!("saved {} at iteration {}", a.out.display(), state.iteration);
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).map_err(|e| {
        anyhow!(dynfield::Error::Io {
            path: path.into(),
            source: e
        })
    })
}

fn render(a: &RenderArgs) -> anyhow::Result<()> {
    let avatar = Avatar::load(&a.ckpt, &a.data)?;
    let mut outputs = vec![(OutputKind::Color, a.out.clone())];
    for (kind, path) in [
        (OutputKind::Depth, &a.depth),
        (OutputKind::Normals, &a.normals),
        (OutputKind::Alpha, &a.alpha),
    ] {
        if let Some(p) = path {
            outputs.push((kind, p.clone()));
        }
    }
    let request = RenderRequest {
        base_frame: a.frame,
        expression: (!a.expr.is_empty())
            .then(|| ExpressionEdit::Overrides(a.expr.iter().map(|(k, v)| (k.to_string(), *v)).collect())),
        pose_delta: PoseDelta {
            yaw: a.yaw,
            pitch: a.pitch,
            roll: a.roll,
            tx: a.tx,
            ty: a.ty,
            tz: a.tz,
        },
        resolution: a.resolution,
        outputs: outputs.iter().map(|(k, _)| *k).collect(),
    };
    info!(
        "config: {}",
        json!({"command": "render", "ckpt": a.ckpt, "data": a.data, "request": request})
    );
    let images = avatar.render(&request)?;
    for ((_, bytes), (_, path)) in images.iter().zip(&outputs) {
        write_file(path, bytes)?;
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let state = load_checkpoint(&a.ckpt)?;
    let dataset = load_dataset(&a.data)?;
    state.check_dataset(&dataset)?;
    let policy = match a.policy {
        PolicyArg::PerFrame => LatentPolicy::PerFrame,
        PolicyArg::FirstTrainFrame => LatentPolicy::FirstTrainFrame,
    };
    info!(
        "config: {}",
        json!({"command": "eval", "data": a.data, "ckpt": a.ckpt, "policy": policy})
    );
    let splits: &[Split] = match a.split {
        SplitArg::Train => &[Split::Train],
        SplitArg::Test => &[Split::Test],
        SplitArg::All => &[Split::Train, Split::Test],
    };
    let mut out = serde_json::Map::new();
    for split in splits {
        let report = evaluate(&state, &dataset, *split, policy)?;
        out.insert(format!("{split:?}").to_lowercase(), serde_json::to_value(report)?);
    }
    if out.is_empty() {
        bail!("nothing to evaluate");
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn serve(a: &ServeArgs) -> anyhow::Result<()> {
    info!(
        "config: {}",
        json!({"command": "serve", "ckpt": a.ckpt, "data": a.data, "bind": a.bind, "max_concurrent": a.max_concurrent})
    );
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(crate::service::serve(
        &a.bind,
        a.ckpt.clone(),
        a.data.clone(),
        a.max_concurrent,
    ))
}
