//! `pcqa`: synthesize data, render views, pre-train, fine-tune, predict and
//! evaluate.
//!
//! Exit status is 0 on success, 2 for usage or configuration errors and 1
//! for runtime failures.

mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use pcqa_core::data::{CloudKind, DistortionType, SynthSpec, MAX_LEVEL};
use pcqa_core::finetune::{Branches, Fusion, LossKind};

use crate::config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "pcqa", version, about = "Point cloud quality assessment")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic clouds, distortions and a manifest.
    Makedata(MakedataArgs),
    /// Render the view rig of one cloud to PNG files.
    Render(RenderArgs),
    /// Masked-autoencoder pre-training on distorted/reference pairs.
    Pretrain(PretrainArgs),
    /// Fine-tune the quality model with content-disjoint splits.
    Finetune(FinetuneArgs),
    /// Score clouds with a fine-tuned checkpoint.
    Predict(PredictArgs),
    /// Compute SROCC/PLCC/RMSE from a predictions CSV.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct MakedataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "sphere,cube,gaussian-blob,checker-torus")]
    kinds: Vec<CloudKind>,
    #[arg(long, default_value_t = 2)]
    refs_per_kind: usize,
    #[arg(long, default_value_t = 4000)]
    points: usize,
    #[arg(long, value_delimiter = ',', default_value = "geom-noise,color-noise,downsample")]
    types: Vec<DistortionType>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7")]
    levels: Vec<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Options shared by the stages that read a run config.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML run config; unspecified fields take the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RigArg {
    /// Six axis-aligned cameras.
    #[value(alias = "6")]
    Quality,
    /// Evenly distributed cameras (`pretrain.views` of them).
    #[value(alias = "12")]
    Pretrain,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "quality")]
    rig: RigArg,
    /// Overrides `view.resolution`.
    #[arg(long)]
    resolution: Option<usize>,
    /// Overrides `view.crop`.
    #[arg(long)]
    crop: Option<usize>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, alias = "data")]
    manifest: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Directory for cached view PNGs. File names key on sample id and
    /// resolution only; use a fresh directory after changing other view settings.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Continue from a pre-training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides `pretrain.max_steps`.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, alias = "data")]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pre-training checkpoint to initialize the encoders from, or `none`.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Overrides `finetune.max_steps`.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Which encoders load pre-trained weights: both, content, distortion, none.
    #[arg(long, value_parser = parse_serde::<Branches>)]
    branches: Option<Branches>,
    /// mca or maxpool-concat.
    #[arg(long, value_parser = parse_serde::<Fusion>)]
    fusion: Option<Fusion>,
    /// mse+rank or mse.
    #[arg(long, value_parser = parse_serde::<LossKind>)]
    loss: Option<LossKind>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long, alias = "ckpt")]
    checkpoint: PathBuf,
    /// Score every entry of a manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Individual PLY files.
    #[arg(long, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Run directory for predictions.csv; without it scores only go to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// CSV with `predicted_score` (or `pred`) and `mos` columns.
    #[arg(long, alias = "pred")]
    predictions: PathBuf,
    /// Also write the report to this JSON file.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses a value through the type's serde names so flags and config files
/// accept the same spellings.
fn parse_serde<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Makedata(a) => {
            if let Some(&l) = a.levels.iter().find(|&&l| l == 0 || l > MAX_LEVEL) {
                return Err(ConfigError(format!("--levels: {l} is outside 1..={MAX_LEVEL}")).into());
            }
            if a.points == 0 || a.refs_per_kind == 0 {
                return Err(ConfigError("--points and --refs-per-kind must be positive".into()).into());
            }
            let spec = SynthSpec {
                kinds: a.kinds,
                refs_per_kind: a.refs_per_kind,
                n_points: a.points,
                types: a.types,
                levels: a.levels,
                seed: a.seed,
            };
            commands::makedata(&spec, &a.out)
        }
        Command::Render(a) => {
            let mut cfg = load_config(&a.cfg)?;
            if let Some(r) = a.resolution {
                cfg.view.resolution = r;
            }
            if let Some(c) = a.crop {
                cfg.view.crop = c;
            }
            cfg.validate()?;
            let rig = match a.rig {
                RigArg::Quality => commands::Rig::Quality,
                RigArg::Pretrain => commands::Rig::Pretrain,
            };
            commands::render(&cfg, &a.input, rig, &a.out)
        }
        Command::Pretrain(a) => {
            let mut cfg = load_config(&a.cfg)?;
            if let Some(n) = a.max_steps {
                cfg.pretrain.max_steps = n;
            }
            cfg.validate()?;
            commands::pretrain_cmd(&cfg, &a.manifest, &a.out, a.cache.as_deref(), a.resume.as_deref())
        }
        Command::Finetune(a) => {
            let mut cfg = load_config(&a.cfg)?;
            if let Some(n) = a.max_steps {
                cfg.finetune.max_steps = n;
            }
            if let Some(b) = a.branches {
                cfg.finetune.branches = b;
            }
            if let Some(f) = a.fusion {
                cfg.finetune.fusion = f;
            }
            if let Some(l) = a.loss {
                cfg.finetune.loss = l;
            }
            cfg.validate()?;
            let init = a.init.filter(|p| p.as_os_str() != "none");
            commands::finetune_cmd(&cfg, &a.manifest, &a.out, init.as_deref())
        }
        Command::Predict(a) => {
            commands::predict_cmd(&a.checkpoint, a.manifest.as_deref(), &a.input, a.out.as_deref())
        }
        Command::Evaluate(a) => commands::evaluate_cmd(&a.predictions, a.out.as_deref()),
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ConfigError>()
            || matches!(
                c.downcast_ref::<pcqa_core::Error>(),
                Some(pcqa_core::Error::Config { .. })
            )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_config_error(&e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
