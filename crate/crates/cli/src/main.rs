//! `csnet` — dataset generation, training, evaluation and report
//! plotting for conditional stochastic networks.
//!
//! Subcommands: `gen`, `train`, `eval`, `report`. Every run is
//! deterministic given its seeds; `CSNET_THREADS` caps the worker pool
//! used by generation and evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use csnet_core::checkpoint;
use csnet_core::config::{parse_train_config, TrainConfig};
use csnet_core::eval::{evaluate, EvalOptions};
use csnet_core::losses::LossScheme;
use csnet_core::models::{ForecastModel, ModelConfig};
use csnet_core::report::{parse_report_csv, render_markdown, render_svg, Curve};
use csnet_core::synthdata::{self, Dataset, DatasetSpec, Task};
use csnet_core::train::{train, TrainSettings};

#[derive(Parser)]
#[command(
    name = "csnet",
    version,
    about = "Conditional stochastic networks for multimodal forecasting"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded synthetic dataset (CSND file)
    Gen(GenArgs),
    /// Train a model from a key = value config file
    Train(TrainArgs),
    /// Evaluate a checkpoint: top-k error CSV
    Eval(EvalArgs),
    /// Render top-k CSVs into an SVG plot and a markdown table
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// trajectory | joints | video
    #[arg(long)]
    task: String,
    /// number of modes M
    #[arg(long)]
    modes: usize,
    /// sample count
    #[arg(long)]
    n: usize,
    /// history frames Nf
    #[arg(long, default_value_t = 1)]
    nf: usize,
    /// prediction horizon
    #[arg(long = "h", default_value_t = 20)]
    horizon: usize,
    /// square frame size in pixels
    #[arg(long, default_value_t = 32)]
    frame: usize,
    /// joint count (joints task only)
    #[arg(long, default_value_t = 4)]
    joints: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// output path; defaults to <task>_m<modes>_nf<nf>_s<seed>.csnd
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// flat key = value config file
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 15)]
    k_max: usize,
    #[arg(long, default_value_t = 32)]
    n_draw: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// odd (held-out half) | even (training half) | all
    #[arg(long, default_value = "odd")]
    split: String,
    /// output CSV; defaults to <checkpoint>.topk.csv
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// SVG output path
    #[arg(long)]
    svg: PathBuf,
    /// markdown table output path
    #[arg(long)]
    table: Option<PathBuf>,
    /// top-k CSV inputs, one per model
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let task = Task::parse(&args.task)?;
    let spec = DatasetSpec {
        task,
        n_samples: args.n,
        modes: args.modes,
        history_frames: args.nf,
        horizon: args.horizon,
        frame_h: args.frame,
        frame_w: args.frame,
        joints: if task == Task::Joints { args.joints } else { 0 },
        seed: args.seed,
    };
    let ds = Dataset::generate(&spec).context("generating dataset")?;
    let out = args.out.unwrap_or_else(|| {
        PathBuf::from(format!(
            "{}_m{}_nf{}_s{}.csnd",
            task.name(),
            args.modes,
            args.nf,
            args.seed
        ))
    });
    synthdata::write_dataset(&ds, &out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "wrote {} samples (task={}, M={}, Nf={}, h={}, frame={}x{}) to {}",
        ds.len(),
        task.name(),
        spec.modes,
        spec.history_frames,
        spec.horizon,
        spec.frame_h,
        spec.frame_w,
        out.display()
    );
    Ok(())
}

/// Builds the model a config describes for a dataset.
fn model_for(cfg: &TrainConfig, spec: &DatasetSpec) -> Result<ForecastModel> {
    if let Some(task) = cfg.task {
        if task != spec.task {
            bail!(
                "config says task = {} but the dataset holds {}",
                task.name(),
                spec.task.name()
            );
        }
    }
    if let Some(nf) = cfg.nf {
        if nf != spec.history_frames {
            bail!(
                "config says nf = {nf} but the dataset holds Nf = {}",
                spec.history_frames
            );
        }
    }
    let stochastic = cfg.scheme != LossScheme::Regression;
    let with_recognition = cfg.scheme == LossScheme::Va;
    let model_cfg =
        ModelConfig::for_dataset(spec, cfg.decoder, cfg.latent_dim, stochastic, with_recognition)?;
    Ok(ForecastModel::new(model_cfg, cfg.seed)?)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let cfg = parse_train_config(&text)?;
    let ds = synthdata::read_dataset(&cfg.dataset)
        .with_context(|| format!("reading {}", cfg.dataset.display()))?;
    let mut model = model_for(&cfg, &ds.spec)?;

    let mut settings = TrainSettings::new(
        cfg.loss_config()?,
        cfg.epochs,
        cfg.batch_size,
        cfg.seed,
    );
    settings.adam.lr = cfg.learning_rate;
    settings.eval_every = cfg.eval_every;
    settings.eval_opts = EvalOptions {
        seed: cfg.seed,
        ..EvalOptions::default()
    };

    let log = train(
        &mut model,
        &ds,
        &ds.train_indices(),
        &ds.test_indices(),
        &settings,
    )?;

    checkpoint::save_model(&model, &cfg.checkpoint)
        .with_context(|| format!("writing {}", cfg.checkpoint.display()))?;
    let log_path = cfg.log_path();
    std::fs::write(&log_path, log.to_csv())
        .with_context(|| format!("writing {}", log_path.display()))?;
    println!(
        "trained {} for {} epochs, final loss {:.6}; checkpoint {}, log {}",
        cfg.scheme.name(),
        cfg.epochs,
        log.final_loss().unwrap_or(f64::NAN),
        cfg.checkpoint.display(),
        log_path.display()
    );
    Ok(())
}

fn split_indices(ds: &Dataset, split: &str) -> Result<Vec<usize>> {
    match split {
        "odd" => Ok(ds.test_indices()),
        "even" => Ok(ds.train_indices()),
        "all" => Ok((0..ds.len()).collect()),
        other => bail!("unknown split '{other}' (expected odd, even or all)"),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = checkpoint::load_model(&args.checkpoint)
        .with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let ds = synthdata::read_dataset(&args.dataset)
        .with_context(|| format!("reading {}", args.dataset.display()))?;
    let indices = split_indices(&ds, &args.split)?;
    let opts = EvalOptions {
        n_draw: args.n_draw,
        k_max: args.k_max,
        seed: args.seed,
        sigma_scale: 1.0,
    };
    let report = evaluate(&model, &ds, &indices, &opts)?;
    let out = args.out.unwrap_or_else(|| {
        let mut s = args.checkpoint.as_os_str().to_owned();
        s.push(".topk.csv");
        PathBuf::from(s)
    });
    std::fs::write(&out, report.to_csv())
        .with_context(|| format!("writing {}", out.display()))?;
    let top1 = report.mean_at(1).unwrap_or(f64::NAN);
    println!(
        "evaluated {} examples: top-1 {:.6}, top-4 {:.6}; wrote {}",
        report.n_examples,
        top1,
        report.mean_at(4.min(args.k_max)).unwrap_or(top1),
        out.display()
    );
    Ok(())
}

fn label_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut curves: Vec<Curve> = Vec::new();
    for input in &args.inputs {
        let text = std::fs::read_to_string(input)
            .with_context(|| format!("reading {}", input.display()))?;
        let mut curve = parse_report_csv(&input.display().to_string(), &text)?;
        curve.label = label_of(input);
        curves.push(curve);
    }
    std::fs::write(&args.svg, render_svg(&curves)?)
        .with_context(|| format!("writing {}", args.svg.display()))?;
    println!("wrote {}", args.svg.display());
    if let Some(table) = &args.table {
        std::fs::write(table, render_markdown(&curves)?)
            .with_context(|| format!("writing {}", table.display()))?;
        println!("wrote {}", table.display());
    }
    Ok(())
}
