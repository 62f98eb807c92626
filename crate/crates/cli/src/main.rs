use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use affectfuse::attrib::{region_attribution, ImportanceMethod};
use affectfuse::data::{generate_synthetic, load_dataset_auto, write_dataset, Dataset, Split, SyntheticConfig};
use affectfuse::eval::{self, export_confusion_csv, export_report_json};
use affectfuse::models::{load_checkpoint, save_checkpoint};
use affectfuse::train::{self, parse_grid_axis, MetricsRecord, RunConfig};
use affectfuse::{Error, ErrorKind, Family, Model};

macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)
    };
}

const MANIFEST_NAME: &str = "dataset.manifest.jsonl";
const BLOB_NAME: &str = "dataset.features.bin";

/// Multimodal evoked-emotion classifiers: data generation, training,
/// evaluation and region attribution.
#[derive(Debug, Parser)]
#[command(name = "affectfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multimodal dataset (manifest + feature blob).
    Gen(GenArgs),
    /// Write a freshly initialised (untrained) checkpoint.
    Init(InitArgs),
    /// Train a model and write its checkpoint and metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Rank the image regions of one sample by importance for a class.
    Attrib(AttribArgs),
    /// Grid search over peak learning rate and warm-up length.
    Sweep(SweepArgs),
    /// Print a checkpoint's configuration and parameter shapes.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Root seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of samples.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Regions per image.
    #[arg(long)]
    regions: Option<usize>,
    /// Output directory; receives dataset.manifest.jsonl and dataset.features.bin.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainOverrides {
    /// Model family (overrides the config).
    #[arg(long)]
    family: Option<Family>,
    /// Root seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of optimizer steps (overrides the config).
    #[arg(long)]
    steps: Option<u64>,
    /// Number of passes over the train split; replaces --steps.
    #[arg(long)]
    epochs: Option<u64>,
    /// Peak learning rate (overrides the config).
    #[arg(long)]
    lr: Option<f64>,
    /// Warm-up steps (overrides the config).
    #[arg(long)]
    warmup: Option<u64>,
    /// Minibatch size (overrides the config).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Evaluate every N steps, 0 for only at the end (overrides the config).
    #[arg(long)]
    eval_every: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest, or a directory holding dataset.manifest.jsonl.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for model.ckpt, metrics.jsonl and run_config.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Args)]
struct InitArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model family (overrides the config).
    #[arg(long)]
    family: Option<Family>,
    /// Initialisation seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset to check the model shape against.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest, or a directory holding dataset.manifest.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate: train, val or test.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Where to write the JSON report.
    #[arg(long)]
    report_out: PathBuf,
    /// Where to write the confusion matrix CSV [default: report path with .confusion.csv].
    #[arg(long)]
    confusion_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AttribArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest, or a directory holding dataset.manifest.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Sample to explain.
    #[arg(long)]
    sample_id: String,
    /// Class index or name [default: the predicted class].
    #[arg(long)]
    class: Option<String>,
    /// gradient_norm or gradient_times_input.
    #[arg(long, default_value = "gradient_norm")]
    method: ImportanceMethod,
    /// Where to write the JSON report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// JSON run configuration used for every trial.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest, or a directory holding dataset.manifest.jsonl.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Grid axis, `lr=lo..hi:step` or `warmup=a,b,c`; repeatable.
    #[arg(long = "grid", required = true)]
    grids: Vec<String>,
    /// Output directory for sweep.json and the best model.ckpt.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Checkpoint to describe.
    #[arg(long)]
    checkpoint: PathBuf,
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invariant = e
                .chain()
                .find_map(|c| c.downcast_ref::<Error>())
                .is_some_and(|e| e.kind() == ErrorKind::Invariant);
            ExitCode::from(if invariant { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Init(a) => cmd_init(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Attrib(a) => cmd_attrib(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_NAME)
    } else {
        data.to_path_buf()
    }
}

fn load_data(data: &Path) -> Result<Dataset> {
    let path = manifest_path(data);
    load_dataset_auto(&path).with_context(|| format!("loading dataset {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut cfg = SyntheticConfig {
        num_samples: a.samples,
        ..Default::default()
    };
    if let Some(r) = a.regions {
        cfg.regions = r;
    }
    let ds = generate_synthetic(a.seed, &cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_dataset(&ds, &a.out.join(MANIFEST_NAME), &a.out.join(BLOB_NAME))?;
    out!("wrote {} samples to {}", ds.samples.len(), a.out.display())?;
    Ok(())
}

fn read_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
                .map_err(Into::into)
        }
    }
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) {
    if let Some(f) = o.family {
        cfg.model.family = f;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(s) = o.steps {
        cfg.schedule.total_steps = s;
        cfg.epochs = None;
    }
    if let Some(e) = o.epochs {
        cfg.epochs = Some(e);
    }
    if let Some(lr) = o.lr {
        cfg.schedule.peak_lr = lr;
    }
    if let Some(w) = o.warmup {
        cfg.schedule.warmup_steps = w;
    }
    if let Some(b) = o.batch_size {
        cfg.batch_size = b;
    }
    if let Some(e) = o.eval_every {
        cfg.eval_every = e;
    }
}

/// Loads the config, applies flag overrides and resolves data/out paths.
fn resolve(
    config: Option<&Path>,
    data: &Option<PathBuf>,
    out: &Option<PathBuf>,
    o: &TrainOverrides,
    sweeping: bool,
) -> Result<(RunConfig, PathBuf, PathBuf)> {
    let mut cfg = read_run_config(config)?;
    apply_overrides(&mut cfg, o);
    if let Some(d) = data {
        cfg.data = Some(d.clone());
    }
    if let Some(d) = out {
        cfg.out = Some(d.clone());
    }
    if sweeping {
        // Trials bring their own warm-up; out-of-range pairs are skipped per trial.
        let mut probe = cfg.clone();
        probe.schedule.warmup_steps = probe.schedule.warmup_steps.clamp(1, probe.schedule.total_steps.max(1));
        probe.validate()?;
    } else {
        cfg.validate()?;
    }
    let Some(data) = cfg.data.clone() else {
        bail!(Error::Config(
            "no dataset given (--data or \"data\" in the config)".into()
        ));
    };
    let Some(out) = cfg.out.clone() else {
        bail!(Error::Config(
            "no output directory given (--out or \"out\" in the config)".into()
        ));
    };
    Ok((cfg, data, out))
}

fn cmd_init(a: InitArgs) -> Result<()> {
    let mut cfg = read_run_config(a.config.as_deref())?;
    if let Some(f) = a.family {
        cfg.model.family = f;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.model.validate()?;
    if let Some(d) = &a.data {
        cfg.check_compatible(&load_data(d)?)?;
    }
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_checkpoint(&model, &a.out)?;
    out!(
        "{}: {} parameters; wrote {}",
        cfg.model.family.as_str(),
        model.params().num_scalars(),
        a.out.display()
    )?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (cfg, data, out) = resolve(a.config.as_deref(), &a.data, &a.out, &a.overrides, false)?;
    let ds = load_data(&data)?;
    cfg.check_compatible(&ds)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("run_config.json"), &cfg)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics =
        BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let mut sink = |r: &MetricsRecord| -> affectfuse::Result<()> {
        writeln!(metrics, "{}", serde_json::to_string(r)?)?;
        metrics.flush()?;
        Ok(())
    };
    let outcome = train::train_with_sink(&ds, &cfg, &mut sink)?;
    metrics.flush()?;
    save_checkpoint(&outcome.model, &out.join("model.ckpt"))?;
    let val = outcome
        .final_val
        .as_ref()
        .map_or("n/a".to_string(), |v| format!("{:.4}", v.accuracy));
    out!(
        "{}: train accuracy {:.4}, val accuracy {val}; wrote {}",
        cfg.model.family.as_str(),
        outcome.final_train.accuracy,
        out.display()
    )?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let ds = load_data(&a.data)?;
    let samples = ds.split(a.split);
    if samples.is_empty() {
        bail!(Error::Config(format!("split {:?} is empty", a.split)));
    }
    let report = eval::evaluate(&model, &samples, ds.class_names())?;
    export_report_json(&report, &a.report_out)?;
    let csv = a
        .confusion_out
        .unwrap_or_else(|| a.report_out.with_extension("confusion.csv"));
    export_confusion_csv(&report, &csv)?;
    out!(
        "{} samples: accuracy {:.4}, macro-F1 {:.4}",
        report.n_samples,
        report.accuracy,
        report.macro_f1
    )?;
    Ok(())
}

fn cmd_attrib(a: AttribArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let ds = load_data(&a.data)?;
    let sample = ds
        .find(&a.sample_id)
        .ok_or_else(|| Error::Config(format!("no sample `{}` in the dataset", a.sample_id)))?;
    let class = match &a.class {
        None => model.predict(sample)?,
        Some(c) => match c.parse::<usize>() {
            Ok(i) if i < ds.num_classes() => i,
            Ok(i) => bail!(Error::Config(format!(
                "class {i} out of range (0..{})",
                ds.num_classes()
            ))),
            Err(_) => ds
                .class_names()
                .iter()
                .position(|n| n == c)
                .ok_or_else(|| Error::Config(format!("unknown class `{c}`")))?,
        },
    };
    let report = region_attribution(&model, sample, class, a.method)?;
    write_json(&a.out, &report)?;
    let top: Vec<String> = report
        .top
        .iter()
        .map(|t| format!("{} ({:.3})", t.index, t.importance))
        .collect();
    out!(
        "class {} `{}`: top regions {}",
        class,
        ds.class_names()[class],
        top.join(", ")
    )?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let (cfg, data, out) = resolve(a.config.as_deref(), &a.data, &a.out, &a.overrides, true)?;
    let mut lrs = vec![cfg.schedule.peak_lr];
    let mut warmups = vec![cfg.schedule.warmup_steps];
    for g in &a.grids {
        let axis = parse_grid_axis(g)?;
        match axis.name.as_str() {
            "lr" | "peak_lr" => lrs = axis.values,
            "warmup" | "warmup_steps" => {
                warmups = axis
                    .values
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 {
                            Ok(v as u64)
                        } else {
                            Err(Error::Config(format!("warm-up {v} is not a whole number of steps")))
                        }
                    })
                    .collect::<std::result::Result<_, _>>()?
            }
            other => bail!(Error::Config(format!(
                "unknown grid axis `{other}` (expected lr or warmup)"
            ))),
        }
    }
    let ds = load_data(&data)?;
    cfg.check_compatible(&ds)?;
    let outcome = train::sweep(&ds, &cfg, &lrs, &warmups)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let best = outcome.best.map(|i| &outcome.trials[i]);
    write_json(
        &out.join("sweep.json"),
        &serde_json::json!({ "trials": outcome.trials, "best": best }),
    )?;
    match (best, &outcome.best_model) {
        (Some(b), Some(m)) => {
            save_checkpoint(m, &out.join("model.ckpt"))?;
            out!(
                "best: lr {} warmup {} (val macro-F1 {:.4}); wrote {}",
                b.peak_lr,
                b.warmup_steps,
                b.val_macro_f1.unwrap_or(f64::NAN),
                out.display()
            )?;
        }
        _ => bail!(Error::Config("every grid point was skipped".into())),
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let params: Vec<_> = model
        .params()
        .iter()
        .map(|(name, t)| serde_json::json!({ "name": name, "shape": t.shape() }))
        .collect();
    let summary = serde_json::json!({
        "family": model.family().as_str(),
        "config": model.config(),
        "num_parameters": model.params().num_scalars(),
        "fusion_weights": model.fusion_weights(),
        "parameters": params,
    });
    out!("{}", serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}
