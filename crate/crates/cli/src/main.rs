//! Command-line driver: dataset generation, source pretraining, target
//! adaptation (offline, streaming, dense-map), and evaluation.
//!
//! Exit codes: 0 success, 2 configuration or usage problems, 3 data or
//! file problems, 4 numeric failures during training.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sfda_core::data::{
    generate, generate_maps, load_dataset, save_dataset, DatasetSpec, MapSpec, Shift,
};
use sfda_core::engine::{
    adapt, adapt_online, adapt_segmentation, evaluate, pretrain, AdaptOutcome, RunConfig,
};
use sfda_core::model::Network;
use sfda_core::numkit::load_checkpoint;
use sfda_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sfda", version, about = "Source-free domain adaptation by curriculum self-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a shifted classification benchmark (source + target files)
    GenData(GenDataArgs),
    /// Generate a shifted dense-map benchmark (source + target files)
    GenMaps(GenMapsArgs),
    /// Train a source model on labeled data, keeping the best epoch
    PretrainSource(TrainArgs),
    /// Adapt a source model to an unlabeled target, multiple epochs
    Adapt(AdaptArgs),
    /// Adapt in a single streaming pass over the target
    AdaptOnline(AdaptArgs),
    /// Adapt a dense-map model, updating normalization layers only
    AdaptSeg(AdaptSegArgs),
    /// Score a model checkpoint on a labeled dataset
    Eval(EvalArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single config key, repeatable; wins over the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.set {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.apply(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for source.csdt and target.csdt
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "ring")]
    name: String,
    #[arg(long, default_value_t = 4)]
    classes: u32,
    #[arg(long, default_value_t = 8)]
    input_dim: u32,
    #[arg(long, default_value_t = 2000)]
    source_count: usize,
    #[arg(long, default_value_t = 1024)]
    target_count: usize,
    #[arg(long, default_value_t = 4.0)]
    radius: f64,
    /// Per-class radius multiplier; 1.0 puts every class on one ring
    #[arg(long, default_value_t = 1.4)]
    radius_growth: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    /// Feature shift applied to the target domain, e.g. "rotation:45",
    /// "translation:1,0", "scale:1.1", or composites joined by '+'
    #[arg(long, default_value = "rotation:45")]
    shift: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Withhold target labels in the written file
    #[arg(long)]
    strip_target_labels: bool,
}

#[derive(Args)]
struct GenMapsArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    classes: u32,
    #[arg(long, default_value_t = 2)]
    input_dim: u32,
    #[arg(long, default_value_t = 16)]
    map_height: usize,
    #[arg(long, default_value_t = 16)]
    map_width: usize,
    #[arg(long, default_value_t = 24)]
    source_maps: usize,
    #[arg(long, default_value_t = 24)]
    target_maps: usize,
    /// Checkerboard cell edge in pixels
    #[arg(long, default_value_t = 4)]
    cell: usize,
    #[arg(long, default_value_t = 3.0)]
    radius: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    #[arg(long, default_value = "translation:2,1")]
    shift: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    strip_target_labels: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled source dataset (.csdt)
    #[arg(long)]
    data: PathBuf,
    /// Output model checkpoint (.csfd)
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration metrics CSV
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AdaptArgs {
    /// Source model checkpoint (.csfd)
    #[arg(long)]
    model: PathBuf,
    /// Target dataset (.csdt); labels, if present, feed metrics only
    #[arg(long)]
    data: PathBuf,
    /// Output adapted model checkpoint (.csfd)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AdaptSegArgs {
    #[command(flatten)]
    base: AdaptArgs,
    #[arg(long)]
    map_height: Option<usize>,
    #[arg(long)]
    map_width: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 256)]
    batch: usize,
}

/// Prints a line, exiting quietly if stdout is a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {
        if writeln!(std::io::stdout(), $($arg)*).is_err() {
            std::process::exit(0);
        }
    };
}

fn parse_shift(text: &str) -> Result<Shift> {
    let parts: Vec<Shift> = text
        .split('+')
        .map(parse_shift_atom)
        .collect::<Result<_>>()?;
    Ok(if parts.len() == 1 {
        parts.into_iter().next().unwrap()
    } else {
        Shift::Composite(parts)
    })
}

fn parse_shift_atom(text: &str) -> Result<Shift> {
    let bad = || Error::Config(format!("bad shift spec {text:?}"));
    let (kind, arg) = text.split_once(':').ok_or_else(bad)?;
    match kind.trim() {
        "rotation" => Ok(Shift::Rotation {
            degrees: arg.trim().parse().map_err(|_| bad())?,
        }),
        "translation" => Ok(Shift::Translation {
            offset: arg
                .split(',')
                .map(|p| p.trim().parse().map_err(|_| bad()))
                .collect::<Result<_>>()?,
        }),
        "scale" => Ok(Shift::Scale {
            factor: arg.trim().parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn print_outcome(kind: &str, out: &AdaptOutcome) {
    say!("{kind}: zero_shot_acc={}", fmt_acc(out.zero_shot_acc));
    if !out.online_first_pass_acc.is_nan() {
        say!("{kind}: online_first_pass_acc={}", fmt_acc(out.online_first_pass_acc));
    }
    say!(
        "{kind}: final_acc={} steps={} batches={}",
        fmt_acc(out.final_acc),
        out.steps_taken,
        out.trained_batches
    );
}

fn fmt_acc(v: f64) -> String {
    if v.is_nan() {
        "n/a (unlabeled)".to_string()
    } else {
        format!("{v:.4}")
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => {
            let spec = DatasetSpec {
                name: a.name,
                num_classes: a.classes,
                input_dim: a.input_dim,
                source_count: a.source_count,
                target_count: a.target_count,
                radius: a.radius,
                radius_growth: a.radius_growth,
                noise_sigma: a.noise_sigma,
                shift: parse_shift(&a.shift)?,
                seed: a.seed,
            };
            let (source, mut target) = generate(&spec)?;
            if a.strip_target_labels {
                target = target.without_labels();
            }
            ensure_dir(&a.out)?;
            save_dataset(&a.out.join("source.csdt"), &source)?;
            save_dataset(&a.out.join("target.csdt"), &target)?;
            say!(
                "gen-data: wrote {} source and {} target samples to {}",
                source.len(),
                target.len(),
                a.out.display()
            );
            Ok(())
        }
        Command::GenMaps(a) => {
            let spec = MapSpec {
                num_classes: a.classes,
                input_dim: a.input_dim,
                map_height: a.map_height,
                map_width: a.map_width,
                source_maps: a.source_maps,
                target_maps: a.target_maps,
                cell: a.cell,
                radius: a.radius,
                noise_sigma: a.noise_sigma,
                shift: parse_shift(&a.shift)?,
                seed: a.seed,
            };
            let (source, mut target) = generate_maps(&spec)?;
            if a.strip_target_labels {
                target = target.without_labels();
            }
            ensure_dir(&a.out)?;
            save_dataset(&a.out.join("source.csdt"), &source)?;
            save_dataset(&a.out.join("target.csdt"), &target)?;
            say!(
                "gen-maps: wrote {} source and {} target maps of {}x{} to {}",
                a.source_maps,
                a.target_maps,
                a.map_height,
                a.map_width,
                a.out.display()
            );
            Ok(())
        }
        Command::PretrainSource(a) => {
            let mut cfg = a.config.build()?;
            let source = load_dataset(&a.data)?;
            cfg.num_classes = source.num_classes;
            cfg.input_dim = source.input_dim;
            let out = pretrain(&cfg, &source, Some(&a.out), a.metrics.as_deref())?;
            say!(
                "pretrain-source: best_val_acc={:.4} at epoch {} (final {:.4}), model -> {}",
                out.best_val_acc,
                out.best_epoch,
                out.final_val_acc,
                a.out.display()
            );
            Ok(())
        }
        Command::Adapt(a) => {
            let cfg = a.config.build()?;
            let state = load_checkpoint(&a.model)?;
            let target = load_dataset(&a.data)?;
            let out = adapt(&cfg, &state, &target, a.out.as_deref(), a.metrics.as_deref())?;
            print_outcome("adapt", &out);
            Ok(())
        }
        Command::AdaptOnline(a) => {
            let cfg = a.config.build()?;
            let state = load_checkpoint(&a.model)?;
            let target = load_dataset(&a.data)?;
            let out = adapt_online(&cfg, &state, &target, a.out.as_deref(), a.metrics.as_deref())?;
            print_outcome("adapt-online", &out);
            Ok(())
        }
        Command::AdaptSeg(a) => {
            let mut cfg = a.base.config.build()?;
            if let Some(h) = a.map_height {
                cfg.map_height = h;
            }
            if let Some(w) = a.map_width {
                cfg.map_width = w;
            }
            let state = load_checkpoint(&a.base.model)?;
            let target = load_dataset(&a.base.data)?;
            let out = adapt_segmentation(
                &cfg,
                &state,
                &target,
                a.base.out.as_deref(),
                a.base.metrics.as_deref(),
            )?;
            print_outcome("adapt-seg", &out);
            Ok(())
        }
        Command::Eval(a) => {
            let state = load_checkpoint(&a.model)?;
            let net = Network::from_state(&state, false)?;
            let ds = load_dataset(&a.data)?;
            let e = evaluate(&net, &ds, a.batch)?;
            say!("eval: overall={:.4} macro={:.4} scored={}", e.overall, e.macro_avg, e.scored);
            for (k, acc) in e.per_class.iter().enumerate() {
                say!("eval: class {k} acc={}", fmt_acc(*acc));
            }
            Ok(())
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::DegenerateSpec(_) | Error::Format(_) | Error::Io { .. } => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
