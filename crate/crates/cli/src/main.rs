use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use zsad::app::{dump_map, parameter_summary, Session, Split};
use zsad::config::RunConfig;
use zsad::data::{export_mvtec_layout, read_rgb, Layout};
use zsad::eval::ScoreRow;
use zsad::plot::{plot_scores, HistogramConfig};
use zsad::train::{Checkpoint, Phase};

#[derive(Parser)]
#[command(name = "zsad", version, about = "Zero-shot anomaly detection: train, evaluate and inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Without it the built-in defaults are used,
    /// or the small synthetic preset when `--layout synthetic` is given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root; overrides the root in the configuration.
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    #[arg(long, value_parser = parse_layout)]
    layout: Option<Layout>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train both phases and write `main.ckpt`, `model.ckpt` and `train_log.json`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Score a test set and write a per-class AUROC report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory receiving an 8-bit heatmap and float sidecar per image.
        #[arg(long)]
        dump_maps: Option<PathBuf>,
        /// Directory receiving `report.json` and `scores.json`.
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Score one image and rank the fine-grained descriptions of its class.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Object class the image belongs to.
        #[arg(long)]
        class: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        image: PathBuf,
    },
    /// Render per-class score histograms from an eval `scores.json`.
    Plot {
        scores: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Write a generated synthetic split to disk in the MVTec directory layout.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a complete configuration document.
    Config {
        /// Print the small synthetic preset instead of the defaults.
        #[arg(long)]
        synthetic: bool,
    },
}

fn parse_layout(s: &str) -> std::result::Result<Layout, String> {
    s.parse().map_err(|e: zsad::Error| e.to_string())
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None if common.layout == Some(Layout::Synthetic) => RunConfig::synthetic(),
        None => RunConfig::default(),
    };
    if let Some(layout) = common.layout {
        cfg.data.layout = layout;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Ok(Checkpoint::load(path, &cfg.model)?)
}

fn train(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let mut session = Session::new(cfg)?;
    let samples = session.samples(Split::Train, common.dataset_root.as_deref())?;
    log::info!("training on {} images", samples.len());
    let outcome = session.train(&samples)?;
    log::info!("parameters: {}", parameter_summary(&outcome.checkpoint.model));
    create_dir(out)?;
    outcome.after_main.save(&out.join("main.ckpt"))?;
    outcome.checkpoint.save(&out.join("model.ckpt"))?;
    write_json(&out.join("train_log.json"), &outcome.log)?;
    for e in &outcome.log.epochs {
        let phase = match e.phase {
            Phase::Initial => "initial",
            Phase::Main => "main",
            Phase::Adapter => "adapter",
        };
        println!(
            "{phase:<8} {:>3}  loss {:.5}  global {:.5}  local {:.5}",
            e.epoch, e.total, e.global, e.local
        );
    }
    println!("checkpoints written to {}", out.display());
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, dump_maps: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let cp = load_checkpoint(checkpoint, &cfg)?;
    let mut session = Session::new(cfg)?;
    let samples = session.samples(Split::Test, common.dataset_root.as_deref())?;
    if let Some(dir) = dump_maps {
        create_dir(dir)?;
    }
    let records = session.evaluate(&cp.model, &samples, dump_maps)?;
    let report = session.report(&records)?;
    create_dir(out)?;
    fs::write(out.join("report.json"), report.to_json())?;
    let rows: Vec<ScoreRow> = records.iter().map(|r| r.score_row()).collect();
    write_json(&out.join("scores.json"), &rows)?;
    print!("{}", report.to_table());
    Ok(())
}

fn infer(common: &Common, checkpoint: &Path, class: &str, image: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let cp = load_checkpoint(checkpoint, &cfg)?;
    let mut session = Session::new(cfg)?;
    let pixels = read_rgb(image)?;
    let id = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let result = session.infer(&cp.model, &id, class, &pixels)?;
    create_dir(out)?;
    dump_map(out, &id, &result.map)?;
    write_json(&out.join(format!("{id}.json")), &result.record)?;
    let r = &result.record;
    println!(
        "{id}: anomaly score {:.4} (text {:.4}, map {:.4})",
        r.s_global / 2.0,
        r.text_term,
        r.map_term
    );
    for d in &r.top_k_descriptions {
        println!("  {:.4}  {}", d.similarity, d.phrase);
    }
    Ok(())
}

fn plot(scores: &Path, out: &Path, bins: usize) -> Result<()> {
    let text = fs::read_to_string(scores).with_context(|| format!("reading {}", scores.display()))?;
    let rows: Vec<ScoreRow> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", scores.display()))?;
    let cfg = HistogramConfig {
        bins,
        ..HistogramConfig::default()
    };
    for path in plot_scores(&rows, out, &cfg)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn synth(common: &Common, split: SplitArg, out: &Path) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.data.layout = Layout::Synthetic;
    let session = Session::new(cfg)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let samples = session.samples(split, None)?;
    export_mvtec_layout(&samples, out)?;
    println!("{} images written to {}", samples.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out } => train(&common, &out),
        Command::Eval {
            common,
            checkpoint,
            dump_maps,
            out,
        } => eval(&common, &checkpoint, dump_maps.as_deref(), &out),
        Command::Infer {
            common,
            checkpoint,
            class,
            out,
            image,
        } => infer(&common, &checkpoint, &class, &image, &out),
        Command::Plot { scores, out, bins } => plot(&scores, &out, bins),
        Command::Synth { common, split, out } => synth(&common, split, &out),
        Command::Config { synthetic } => {
            let cfg = if synthetic {
                RunConfig::synthetic()
            } else {
                RunConfig::default()
            };
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

/// 1 for problems with the caller's input, 2 for failures inside the pipeline.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<zsad::Error>() {
        Some(e) if !e.is_user_error() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
