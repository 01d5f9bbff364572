use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use riskseg::ablate::{ablate, AblateOptions};
use riskseg::checkpoint::Checkpoint;
use riskseg::config::RunConfig;
use riskseg::data::{load_or_generate, write_manifests};
use riskseg::error::{HarnessError, Result};
use riskseg::eval::evaluate;
use riskseg::export::export_uncertainty;
use riskseg::train::{model_from_checkpoint, resume, train, TrainOptions, LAST_CHECKPOINT};
use riskseg_core::synthdata::SplitKind;

#[derive(Parser)]
#[command(name = "riskseg", version, about = "Referring segmentation with uncertainty-guided fusion and refinement")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML run config; defaults are used for missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=5 --set use_ugf=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        base.with_overrides(&self.overrides)
    }
}

#[derive(Args)]
struct OutArgs {
    /// Output directory [default: $RISKSEG_OUT_DIR, else ./runs].
    #[arg(long, short)]
    out: Option<PathBuf>,
}

impl OutArgs {
    fn dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("RISKSEG_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes `last.ckpt` and `train_log.txt` to the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Directory with split manifests (created if empty).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint using its stored config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a checkpoint whose config hash does not match.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on a split; writes `report_<split>.txt` and `metrics_<split>.kv`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Require the checkpoint to match this config.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train Base, +UGF, +UDLR and Full for each seed and tabulate test metrics.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated seeds (at least 3).
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Write uncertainty heat maps, overlays and raw value grids for samples.
    ExportUnc {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated sample indices within the split.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<usize>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Generate the train/val/test manifests.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
}

fn split_kind(name: &str) -> Result<SplitKind> {
    SplitKind::from_name(name).ok_or_else(|| HarnessError::Config(format!("unknown split {name:?}; use train, val or test")))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    std::fs::write(path, text).map_err(HarnessError::io(path))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, out, data, resume: from, force } => {
            let dir = out.dir();
            let outcome = match from {
                Some(path) => {
                    let cfg = Checkpoint::load(&path, None, force)?.config;
                    let ds = load_or_generate(&cfg, data.as_deref())?;
                    resume(&path, &ds, force)?
                }
                None => {
                    let cfg = config.load()?;
                    let ds = load_or_generate(&cfg, data.as_deref())?;
                    write(&dir.join("config.toml"), &cfg.to_toml())?;
                    train(&cfg, &ds, TrainOptions { out_dir: Some(dir.clone()), ..Default::default() })?
                }
            };
            let mut log = String::from("epoch train_loss val_miou lr\n");
            for e in &outcome.checkpoint.log {
                log += &format!("{} {:.6} {:.6} {:.6e}\n", e.epoch, e.train_loss, e.val_miou, e.lr);
            }
            write(&dir.join("train_log.txt"), &log)?;
            println!("checkpoint: {}", dir.join(LAST_CHECKPOINT).display());
            if let Some(e) = outcome.checkpoint.log.last() {
                println!("final val mIoU: {:.6}", e.val_miou);
            }
        }
        Cmd::Eval { checkpoint, split, config, data, force, out } => {
            let kind = split_kind(&split)?;
            let expected = config.as_deref().map(RunConfig::load).transpose()?.map(|c| c.hash());
            let ckpt = Checkpoint::load(&checkpoint, expected.as_deref(), force)?;
            let model = model_from_checkpoint(&ckpt)?;
            let ds = load_or_generate(&ckpt.config, data.as_deref())?;
            let report = evaluate(&model, &ds.split(kind).records, ckpt.config.batch_size, true)?;
            let summary = report.summary();
            let dir = out.dir();
            write(&dir.join(format!("report_{split}.txt")), &summary.to_table())?;
            write(&dir.join(format!("metrics_{split}.kv")), &summary.to_key_values())?;
            print!("{}", summary.to_table());
        }
        Cmd::Ablate { config, seeds, data, out } => {
            let cfg = config.load()?;
            let ds = load_or_generate(&cfg, data.as_deref())?;
            let dir = out.dir();
            let table = ablate(&cfg, &seeds, &ds, &AblateOptions { out_dir: Some(dir.clone()) })?;
            write(&dir.join("ablation.txt"), &table.to_text())?;
            write(&dir.join("ablation.kv"), &table.to_key_values())?;
            print!("{}", table.to_text());
        }
        Cmd::ExportUnc { checkpoint, ids, split, data, force, out } => {
            let kind = split_kind(&split)?;
            let ckpt = Checkpoint::load(&checkpoint, None, force)?;
            let model = model_from_checkpoint(&ckpt)?;
            let ds = load_or_generate(&ckpt.config, data.as_deref())?;
            let done = export_uncertainty(&model, &ds.split(kind).records, &ids, &out.dir())?;
            for e in done {
                println!("sample {}: {} files", e.index, e.files.len());
            }
        }
        Cmd::GenData { config, out } => {
            let cfg = config.load()?;
            let ds = riskseg::data::generate(&cfg)?;
            let dir = out.dir();
            write_manifests(&ds, &dir)?;
            for kind in SplitKind::ALL {
                let m = &ds.split(kind).manifest;
                println!("{}: {} samples ({} seeds skipped)", kind.name(), m.entries.len(), m.skipped);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
