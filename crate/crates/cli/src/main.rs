use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rctnet::checkpoint::Checkpoint;
use rctnet::config::RunConfig;
use rctnet::data::{self, load_dataset, Normalization, Split};
use rctnet::inspect::{inspect, INSPECT_SIZE};
use rctnet::train::{self, TrainEvent};
use rctnet::{ConfusionCounts, Error, RctNet32};
use serde_json::json;

mod predict;

#[derive(Parser)]
#[command(name = "rctnet", version, about = "Bitemporal change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML)
    #[arg(long, short, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: desk or full
    #[arg(long)]
    preset: Option<String>,
    /// Override a config field, e.g. --set train.max_iters=500
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn given(&self) -> bool {
        self.config.is_some() || self.preset.is_some() || !self.overrides.is_empty()
    }

    fn load(&self) -> rctnet::Result<RunConfig> {
        match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path, &self.overrides),
            (None, name) => {
                let name = name.as_deref().unwrap_or("desk");
                let base = RunConfig::preset(name).ok_or_else(|| Error::config("--preset", format!("unknown preset `{name}`")))?;
                RunConfig::from_toml(&base.to_toml()?, &self.overrides)
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, a JSON-lines log and a report
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint written by the same configuration
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Progress line interval in iterations (0 disables)
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Score a checkpoint, or saved prediction maps, against a labelled split
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory with binary maps `<id>.png` to score instead of a model
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        /// Dataset root holding train/ val/ test/
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Metrics report path
        #[arg(long, default_value = "eval_report.json")]
        report: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Predict a change map for one image pair
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        /// Ground-truth mask; enables the TP/TN/FP/FN overlay
        #[arg(long)]
        label: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write p1..p4 probability maps
        #[arg(long)]
        stages: bool,
        /// Pad by edge replication to a multiple of 32 instead of failing
        #[arg(long)]
        pad: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate the synthetic dataset described by the config's [synth] section
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Report parameter count and FLOPs
    Inspect {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Square input side
        #[arg(long, default_value_t = INSPECT_SIZE)]
        size: usize,
        #[arg(long)]
        json: bool,
    },
    /// Print a preset as a TOML run configuration
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Exit status: 1 for invalid input or configuration, 2 for failures while
/// running.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Dimension { .. }
        | Error::ShapeMismatch { .. }
        | Error::Config { .. }
        | Error::ConfigParse(_)
        | Error::InvalidInput(_)
        | Error::MissingFile { .. }
        | Error::Checkpoint(_) => 1,
        Error::Io { .. } | Error::Image { .. } | Error::Diverged { .. } | Error::Json(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> rctnet::Result<()> {
    match cmd {
        Command::Train { cfg, resume, log_every } => cmd_train(&cfg.load()?, resume.as_deref(), log_every),
        Command::Eval {
            checkpoint,
            predictions,
            data,
            split,
            report,
            cfg,
        } => {
            let run_cfg = cfg.given().then(|| cfg.load()).transpose()?;
            cmd_eval(checkpoint.as_deref(), predictions.as_deref(), &data, split.parse()?, &report, run_cfg.as_ref())
        }
        Command::Predict {
            checkpoint,
            t1,
            t2,
            label,
            out,
            stages,
            pad,
            cfg,
        } => {
            let norm = if cfg.given() { cfg.load()?.data.normalization } else { Normalization::default() };
            predict::cmd_predict(&checkpoint, &t1, &t2, label.as_deref(), &out, stages, pad, &norm)
        }
        Command::SynthData { out, cfg } => {
            let run_cfg = cfg.load()?;
            data::generate_synthetic(&run_cfg.synth, &out)?;
            println!(
                "wrote {} train / {} val / {} test pairs to {}",
                run_cfg.synth.num_train,
                run_cfg.synth.num_val,
                run_cfg.synth.num_test,
                out.display()
            );
            Ok(())
        }
        Command::Inspect { cfg, size, json } => {
            let report = inspect(&cfg.load()?.model, size, size)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{}", report.summary());
            }
            Ok(())
        }
        Command::Config { cfg } => {
            print!("{}", cfg.load()?.to_toml()?);
            Ok(())
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> rctnet::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, log_every: usize) -> rctnet::Result<()> {
    let root = &cfg.data.root;
    let open = |split| load_dataset(root, split, cfg.data.patch(), cfg.data.normalization);
    let train_set = open(Split::Train)?.load_all()?;
    let val_set = match open(Split::Val) {
        Ok(ds) => ds.load_all()?,
        Err(Error::MissingFile { .. }) => Vec::new(),
        Err(e) => return Err(e),
    };
    let hash = cfg.hash()?;
    let resume_ckpt = resume.map(Checkpoint::<f32>::load).transpose()?;
    let mut model = RctNet32::new(&cfg.model, cfg.train.seed)?;
    eprintln!(
        "training {} ({} params) on {} pairs, {} val, {} iterations",
        cfg.model.ablation.label(),
        model.num_params(),
        train_set.len(),
        val_set.len(),
        cfg.train.max_iters
    );
    std::fs::create_dir_all(&cfg.train.checkpoint_dir).map_err(|e| Error::io(&cfg.train.checkpoint_dir, e))?;
    let run_file = cfg.train.checkpoint_dir.join("run.toml");
    std::fs::write(&run_file, cfg.to_toml()?).map_err(|e| Error::io(&run_file, e))?;

    let outcome = train::train_loop(&mut model, &train_set, &val_set, &cfg.train, &hash, resume_ckpt.as_ref(), |event| match event {
        TrainEvent::Step { iter, lr, loss } if log_every > 0 && iter % log_every == 0 => {
            eprintln!("iter {iter:>6}  lr {lr:.3e}  loss {:.4}", loss.total)
        }
        TrainEvent::Eval { iter, metrics, best } => eprintln!(
            "eval {iter:>6}  F1 {:.2}  IoU {:.2}{}",
            100.0 * metrics.f1,
            100.0 * metrics.iou,
            if best { "  (best)" } else { "" }
        ),
        _ => {}
    })?;

    let chosen = outcome.best_checkpoint.clone().unwrap_or_else(|| outcome.latest_checkpoint.clone());
    let final_model = train::model_from_checkpoint(&Checkpoint::<f32>::load(&chosen)?)?;
    let test = match open(Split::Test) {
        Ok(ds) => Some(train::evaluate(&final_model, &ds.load_all()?, cfg.train.batch_size)?),
        Err(Error::MissingFile { .. }) => None,
        Err(e) => return Err(e),
    };
    if let Some(c) = &test {
        println!("{}", c.metrics().table());
    }
    write_json(
        &cfg.train.checkpoint_dir.join("report.json"),
        &json!({
            "ablation": cfg.model.ablation.label(),
            "iterations": outcome.final_iteration,
            "best_val_f1": outcome.best_f1,
            "checkpoint": chosen,
            "test_counts": test,
            "test_metrics": test.map(|c| c.metrics()),
        }),
    )
}

fn cmd_eval(
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    root: &Path,
    split: Split,
    report: &Path,
    run_cfg: Option<&RunConfig>,
) -> rctnet::Result<()> {
    let (patch, norm) = run_cfg.map_or((None, Normalization::default()), |c| (c.data.patch(), c.data.normalization));
    let ds = load_dataset(root, split, patch, norm)?;
    let counts = match (checkpoint, predictions) {
        (Some(path), _) => {
            let ckpt = Checkpoint::<f32>::load(path)?;
            if let Some(c) = run_cfg {
                if c.model != ckpt.model {
                    return Err(Error::Checkpoint(format!(
                        "{} was trained with a different model configuration",
                        path.display()
                    )));
                }
            }
            let model = train::model_from_checkpoint(&ckpt)?;
            let batch = run_cfg.map_or(8, |c| c.train.batch_size);
            train::evaluate(&model, &ds.load_all()?, batch)?
        }
        (None, Some(dir)) => {
            let mut counts = ConfusionCounts::default();
            for pair in ds.iter() {
                let pair = pair?;
                let pred = data::load_mask(&dir.join(format!("{}.png", pair.id)))?;
                if pred.shape() != pair.g.shape() {
                    return Err(Error::shape(format!("prediction {}", pair.id), pred.shape(), pair.g.shape()));
                }
                let bits: Vec<u8> = pred.data().iter().map(|&v| v as u8).collect();
                counts.accumulate(&bits, &pair.mask_u8())?;
            }
            counts
        }
        (None, None) => return Err(Error::config("--checkpoint", "give --checkpoint or --predictions")),
    };
    let metrics = counts.metrics();
    println!("{}", metrics.table());
    if metrics.degenerate {
        println!("degenerate: a metric had a zero denominator and is reported as 0");
    }
    write_json(
        report,
        &json!({
            "data": root,
            "split": split,
            "pairs": ds.len(),
            "counts": counts,
            "metrics": metrics,
            "percent": {
                "precision": format!("{:.2}", 100.0 * metrics.precision),
                "recall": format!("{:.2}", 100.0 * metrics.recall),
                "f1": format!("{:.2}", 100.0 * metrics.f1),
                "iou": format!("{:.2}", 100.0 * metrics.iou),
            },
        }),
    )
}
