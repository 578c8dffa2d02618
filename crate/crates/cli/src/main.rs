use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mvmr::config::{ExperimentConfig, ProbeFeatures, TrainMode};
use mvmr::data::{load_splits, read_matrix, write_matrix, Dataset, Splits};
use mvmr::depmeasure::dcor_stat;
use mvmr::eval::{ablation_report, linear_probe, write_report};
use mvmr::model::{Checkpoint, Model};
use mvmr::train::{load_model, train, TeacherSource, CHECKPOINT_FILE, METRICS_FILE};
use mvmr::{DType, Error, Real, Result};

/// Multi-view multi-representation self-supervised learning.
#[derive(Parser, Debug)]
#[command(name = "mvmr", version)]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// TOML configuration; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key after the file is parsed, e.g. `train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed (same as `--set train.seed=N`).
    #[arg(long)]
    seed: Option<u64>,
    /// Serial data preparation and zeroed timings in the metrics log.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Run directory for config, metrics and checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
    /// Reuse a run directory that already holds a run.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Pretrain,
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Self-supervised pretraining.
    Pretrain(RunArgs),
    /// Train a student against teacher embeddings (a matrix file, one row per
    /// pretraining sample).
    Distill {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Linear probe on frozen features of a checkpoint; prints JSON.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides applied to the checkpoint's configuration (eval.* keys).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Probe projector outputs instead of encoder outputs.
        #[arg(long)]
        projected: bool,
    },
    /// Write embeddings of a dataset split to a matrix file. Without
    /// --checkpoint the model is freshly initialized from the configuration.
    Features {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "pretrain")]
        split: Split,
        #[arg(long)]
        projected: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distance correlation between two matrix files with equal row counts.
    Dcor { a: PathBuf, b: PathBuf },
    /// Run the ablation grids and write report.json and report.md.
    Report(RunArgs),
}

fn resolve(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let base = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut c = base.with_overrides(&args.set)?;
    if let Some(seed) = args.seed {
        if args.set.iter().any(|s| s.trim_start().starts_with("train.seed")) && c.train.seed != seed {
            return Err(Error::Config(format!(
                "--seed {seed} conflicts with --set train.seed={}",
                c.train.seed
            )));
        }
        c = c.with_overrides(&[format!("train.seed={seed}")])?;
    }
    if args.deterministic {
        if args.set.iter().any(|s| s.replace(' ', "") == "train.deterministic=false") {
            return Err(Error::Config("--deterministic conflicts with --set train.deterministic=false".into()));
        }
        c.train.deterministic = true;
    }
    Ok(c)
}

fn prepare_run_dir(dir: &Path, force: bool) -> Result<()> {
    if !force && (dir.join(METRICS_FILE).exists() || dir.join(CHECKPOINT_FILE).exists()) {
        return Err(Error::Config(format!(
            "{} already holds a run; pass --force to overwrite it",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_resolved(dir: &Path, c: &ExperimentConfig) -> Result<()> {
    std::fs::write(dir.join("config.toml"), c.to_toml())?;
    std::fs::write(dir.join("digest"), format!("{}\n", c.digest()))?;
    Ok(())
}

fn run_training(c: &ExperimentConfig, splits: &Splits, teacher: Option<&TeacherSource>, dir: &Path) -> Result<serde_json::Value> {
    let summary = |metrics: &[mvmr::train::MetricRecord]| {
        let last = metrics.last();
        json!({
            "out_dir": dir.display().to_string(),
            "digest": c.digest(),
            "steps": metrics.len(),
            "final_loss": last.map(|m| m.loss_total),
            "final_std_mean": last.map(|m| m.emb_std_mean),
        })
    };
    Ok(match c.train.dtype {
        DType::F32 => summary(&train::<f32>(c, &splits.pretrain, teacher, Some(dir))?.1),
        DType::F64 => summary(&train::<f64>(c, &splits.pretrain, teacher, Some(dir))?.1),
    })
}

fn pretrain(args: &RunArgs, mode: TrainMode, teacher: Option<&Path>) -> Result<serde_json::Value> {
    let mut c = resolve(&args.cfg)?;
    c.train.mode = mode;
    let teacher = teacher.map(TeacherSource::load).transpose()?;
    let splits = load_splits(&c.data, c.train.seed)?;
    if let Some(t) = &teacher {
        if t.rows.nrows() < splits.pretrain.len() {
            return Err(Error::Data(format!(
                "teacher file has {} rows; no teacher row for dataset index {}",
                t.rows.nrows(),
                t.rows.nrows()
            )));
        }
    }
    prepare_run_dir(&args.out_dir, args.force)?;
    write_resolved(&args.out_dir, &c)?;
    log::info!(
        "{} run in {} (config digest {})",
        if mode == TrainMode::Distill { "distill" } else { "pretrain" },
        args.out_dir.display(),
        &c.digest()[..12]
    );
    run_training(&c, &splits, teacher.as_ref(), &args.out_dir)
}

fn split_of(s: &Splits, which: Split) -> &Dataset {
    match which {
        Split::Pretrain => &s.pretrain,
        Split::Train => &s.train,
        Split::Test => &s.test,
    }
}

fn probe_t<T: Real>(ckpt: &Checkpoint, set: &[String], projected: bool) -> Result<serde_json::Value> {
    let (c, model) = load_model::<T>(ckpt)?;
    let mut c = c.with_overrides(set)?;
    if projected {
        c.eval.features = ProbeFeatures::Projector;
    }
    let splits = load_splits(&c.data, c.train.seed)?;
    let r = linear_probe(&model, &splits.train, &splits.test, &c.eval, c.train.seed)?;
    Ok(json!({
        "top1": r.top1,
        "top5": r.top5,
        "train_top1": r.train_top1,
        "features": if c.eval.features == ProbeFeatures::Projector { "projector" } else { "encoder" },
        "classes": splits.test.classes,
        "test_samples": splits.test.len(),
        "digest": ckpt.digest,
    }))
}

fn probe(path: &Path, set: &[String], projected: bool) -> Result<serde_json::Value> {
    let ckpt = Checkpoint::load(path)?;
    match ExperimentConfig::from_toml(&ckpt.config)?.train.dtype {
        DType::F32 => probe_t::<f32>(&ckpt, set, projected),
        DType::F64 => probe_t::<f64>(&ckpt, set, projected),
    }
}

fn features_t<T: Real>(
    checkpoint: Option<&Path>,
    cfg: &ConfigArgs,
    split: Split,
    projected: bool,
    out: &Path,
) -> Result<serde_json::Value> {
    let (c, model) = match checkpoint {
        Some(p) => load_model::<T>(&Checkpoint::load(p)?)?,
        None => {
            let c = resolve(cfg)?;
            let dims = (c.data.synthetic.channels, c.data.image_size, c.data.image_size);
            let m = Model::<T>::new(&c.model, &c.projector, dims, c.train.seed)?;
            (c, m)
        }
    };
    let splits = load_splits(&c.data, c.train.seed)?;
    let data = split_of(&splits, split);
    let m = model.embed(&data.images, projected)?;
    write_matrix(out, &m)?;
    Ok(json!({ "rows": m.nrows(), "cols": m.ncols(), "out": out.display().to_string() }))
}

fn features(
    checkpoint: Option<&Path>,
    cfg: &ConfigArgs,
    split: Split,
    projected: bool,
    out: &Path,
) -> Result<serde_json::Value> {
    let dtype = match checkpoint {
        Some(p) => {
            if cfg.config.is_some() || !cfg.set.is_empty() || cfg.seed.is_some() {
                return Err(Error::Config(
                    "--checkpoint carries its own configuration; drop --config/--set/--seed".into(),
                ));
            }
            ExperimentConfig::from_toml(&Checkpoint::load(p)?.config)?.train.dtype
        }
        None => resolve(cfg)?.train.dtype,
    };
    match dtype {
        DType::F32 => features_t::<f32>(checkpoint, cfg, split, projected, out),
        DType::F64 => features_t::<f64>(checkpoint, cfg, split, projected, out),
    }
}

fn dcor(a: &Path, b: &Path) -> Result<serde_json::Value> {
    let (x, y) = (read_matrix(a)?, read_matrix(b)?);
    if x.nrows() != y.nrows() {
        return Err(Error::Data(format!(
            "row counts differ: {} has {}, {} has {}",
            a.display(),
            x.nrows(),
            b.display(),
            y.nrows()
        )));
    }
    let r = dcor_stat(x.mapv(f64::from).view(), y.mapv(f64::from).view())?;
    Ok(json!({
        "dcor": r.dcor,
        "dcov2": r.dcov2,
        "dvar_x": r.dvar_x,
        "dvar_y": r.dvar_y,
        "degenerate": r.degenerate,
        "rows": x.nrows(),
    }))
}

fn report(args: &RunArgs) -> Result<serde_json::Value> {
    let c = resolve(&args.cfg)?;
    if !args.force && args.out_dir.join("report.json").exists() {
        return Err(Error::Config(format!(
            "{} already holds a report; pass --force to overwrite it",
            args.out_dir.display()
        )));
    }
    let splits = load_splits(&c.data, c.train.seed)?;
    log::info!("ablation grids {:?}, {} epochs per cell", c.eval.grids, c.eval.ablation_epochs);
    let r = ablation_report(&c, &splits)?;
    write_report(&args.out_dir, &r)?;
    std::fs::write(args.out_dir.join("config.toml"), c.to_toml())?;
    Ok(json!({
        "out_dir": args.out_dir.display().to_string(),
        "grids": r.grids.iter().map(|g| json!({"name": g.name, "rows": g.rows.len()})).collect::<Vec<_>>(),
    }))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Pretrain(a) => pretrain(&a, TrainMode::Ssl, None),
        Command::Distill { run, teacher } => pretrain(&run, TrainMode::Distill, Some(&teacher)),
        Command::Probe {
            checkpoint,
            set,
            projected,
        } => probe(&checkpoint, &set, projected),
        Command::Features {
            checkpoint,
            cfg,
            split,
            projected,
            out,
        } => features(checkpoint.as_deref(), &cfg, split, projected, &out),
        Command::Dcor { a, b } => dcor(&a, &b),
        Command::Report(a) => report(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
