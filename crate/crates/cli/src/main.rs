use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geoflow::flows::FlowVariant;
use geoflow::harness::pipeline::{self, Pipeline};
use geoflow::harness::train::Checkpoint;
use geoflow::harness::{self, AblationConfig, RunConfig, Seeds, TrainConfig};
use geoflow::scenes::{self, Split, Task};
use geoflow::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "geoflow",
    version,
    about = "Two-stage flow models for dense geometry on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the relevant seed (dataset split seed, training replicate).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory or file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the number of optimisation (or refinement) steps.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    GenData(Common),
    /// Train the image-driven model from the `train` section.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root; overrides `train.dataset`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Build coarse pairs with a trained core and train the sharpener.
    TrainSharpener {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        core: PathBuf,
        /// Dataset root; defaults to the one the core was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predict maps for an image, a sample directory or a split directory.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        core: PathBuf,
        #[arg(long)]
        sharpener: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score predictions against a ground-truth split directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "depth")]
        task: String,
        #[arg(long, default_value = "model")]
        method: String,
    },
    /// Run the ablation ladder and timestep sweep.
    Ablate(Common),
    /// Mean radial power spectra of several prediction directories.
    Spectrum {
        #[command(flatten)]
        common: Common,
        /// `label=path`, repeatable.
        #[arg(long = "dir", required = true)]
        dirs: Vec<String>,
        #[arg(long, default_value = "depth")]
        task: String,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map(RunConfig::load)
        .transpose()
        .map(Option::unwrap_or_default)
}

fn parse_task(s: &str) -> Result<Task> {
    match s {
        "depth" => Ok(Task::Depth),
        "normal" => Ok(Task::Normal),
        _ => Err(Error::Config(format!(
            "unknown task {s:?}; expected depth or normal"
        ))),
    }
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn apply_overrides(cfg: &mut TrainConfig, common: &Common) {
    if let Some(seed) = common.seed {
        cfg.seeds = Seeds::from_replicate(seed);
    }
    if let Some(steps) = common.steps {
        cfg.steps = steps;
    }
}

fn gen_data(common: &Common) -> Result<serde_json::Value> {
    let mut cfg = load_config(common.config.as_deref())?
        .scenes
        .unwrap_or_default();
    if let Some(seed) = common.seed {
        cfg.splits.seed = seed;
    }
    let out = out_dir(common, "scenes");
    scenes::generate_dataset(&cfg, &out)?;
    Ok(json!({
        "root": out,
        "train": cfg.splits.train,
        "val": cfg.splits.val,
        "test": cfg.splits.test,
    }))
}

fn train(common: &Common, data: Option<&PathBuf>) -> Result<serde_json::Value> {
    let run = load_config(common.config.as_deref())?;
    let mut cfg = run
        .train
        .ok_or_else(|| Error::Config("config has no [train] section".into()))?;
    apply_overrides(&mut cfg, common);
    if let Some(d) = data {
        cfg.dataset = Some(d.clone());
    }
    cfg.validate()?;
    let out = out_dir(common, "runs/core");
    let (ckpt, hash) = pipeline::train_on_disk(&cfg, &out)?;
    Ok(json!({
        "checkpoint": out.join("final.ckpt"),
        "sha256": hash,
        "final_loss": ckpt.losses.last().map(|l| l.loss),
    }))
}

fn sharpener_defaults(core: &Checkpoint) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::for_variant(FlowVariant::SHARPENER, 10)?;
    cfg.net.hidden = core.config.net.hidden;
    cfg.net.blocks = core.config.net.blocks;
    cfg.codec = core.config.codec;
    cfg.task = core.config.task;
    cfg.optimizer = core.config.optimizer;
    cfg.batch_size = core.config.batch_size;
    cfg.steps = core.config.steps;
    cfg.seeds = core.config.seeds;
    Ok(cfg)
}

fn train_sharpener(
    common: &Common,
    core_path: &Path,
    data: Option<&PathBuf>,
) -> Result<serde_json::Value> {
    let run = load_config(common.config.as_deref())?;
    let core = Checkpoint::load(core_path)?;
    core.require_trained()?;
    let root = data
        .cloned()
        .or_else(|| core.config.dataset.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or train the core on disk".into()))?;
    let mut cfg = match run.sharpener {
        Some(c) => c,
        None => sharpener_defaults(&core)?,
    };
    apply_overrides(&mut cfg, common);
    cfg.dataset = Some(root.clone());
    cfg.validate()?;
    if cfg.codec != core.config.codec || cfg.task != core.config.task {
        return Err(Error::Config(
            "sharpener config disagrees with the core on codec or task".into(),
        ));
    }
    let out = out_dir(common, "runs/sharpener");
    let train_pairs: Vec<_> = pipeline::load_examples(&root, Split::Train, cfg.task, cfg.codec)?
        .into_iter()
        .map(|p| p.1)
        .collect();
    let pairs = pipeline::coarse_pairs(&core, &train_pairs)?;
    let pairs_path = out.join("coarse_pairs.bin");
    pipeline::save_coarse_pairs(&pairs_path, &pairs, &core.hash()?)?;
    let sharp = pipeline::train_sharpener(&pairs_path, &cfg, Some(&out))?;
    let hash = sharp.save(&out.join("final.ckpt"))?;
    Ok(json!({
        "coarse_pairs": pairs_path,
        "checkpoint": out.join("final.ckpt"),
        "sha256": hash,
        "final_loss": sharp.losses.last().map(|l| l.loss),
    }))
}

fn infer(
    common: &Common,
    core: &Path,
    sharpener: Option<&PathBuf>,
    input: &Path,
) -> Result<serde_json::Value> {
    let run = load_config(common.config.as_deref())?;
    let steps = match common.steps {
        Some(s) => {
            usize::try_from(s).map_err(|_| Error::Config(format!("step count {s} out of range")))?
        }
        None => run.infer.unwrap_or_default().sharpener_steps,
    };
    let pipe = Pipeline::load(core, sharpener.map(PathBuf::as_path))?;
    let out = out_dir(common, "predictions");
    let done = pipe.infer_path(input, steps, &out)?;
    Ok(json!({ "out": out, "predictions": done.len(), "sharpener_steps": steps }))
}

fn eval(
    common: &Common,
    pred: &Path,
    gt: &Path,
    task: &str,
    method: &str,
) -> Result<serde_json::Value> {
    let out = out_dir(common, "eval");
    let report = pipeline::evaluate(pred, gt, parse_task(task)?, method, &out)?;
    Ok(json!({ "out": out, "aggregate": report.aggregate }))
}

fn ablate(common: &Common) -> Result<serde_json::Value> {
    let mut cfg: AblationConfig = load_config(common.config.as_deref())?
        .ablation
        .unwrap_or_default();
    if let Some(seed) = common.seed {
        cfg.replicates = vec![seed];
    }
    if let Some(steps) = common.steps {
        cfg.steps = steps;
        cfg.sharpener_steps = steps;
    }
    let report = harness::run_ablation(&cfg)?;
    let out = out_dir(common, "ablation");
    fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
    write(&out.join("table.csv"), &report.table_csv())?;
    write(&out.join("sweep.csv"), &report.sweep_csv())?;
    scenes::write_json(&out.join("report.json"), &report)?;
    Ok(json!({ "out": out, "rows": report.rows.len(), "sweep": report.sweep.len() }))
}

fn spectrum(common: &Common, dirs: &[String], task: &str) -> Result<serde_json::Value> {
    let labelled = dirs
        .iter()
        .map(|d| {
            d.split_once('=')
                .map(|(l, p)| (l, PathBuf::from(p)))
                .ok_or_else(|| Error::Config(format!("expected label=path, got {d:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("spectrum.csv"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    let report = pipeline::spectrum_report(&labelled, parse_task(task)?, Some(&out))?;
    Ok(json!({ "out": out, "columns": report.columns.len() }))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train { common, data } => train(common, data.as_ref()),
        Command::TrainSharpener { common, core, data } => {
            train_sharpener(common, core, data.as_ref())
        }
        Command::Infer {
            common,
            core,
            sharpener,
            input,
        } => infer(common, core, sharpener.as_ref(), input),
        Command::Eval {
            common,
            pred,
            gt,
            task,
            method,
        } => eval(common, pred, gt, task, method),
        Command::Ablate(c) => ablate(c),
        Command::Spectrum { common, dirs, task } => spectrum(common, dirs, task),
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string()),
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
