use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use srwm_core::episodes::{ExampleProvider, SyntheticClusters};
use srwm_core::fwtn;
use srwm_core::harness::{gradcheck_episode, paired_comparison, sweep_report, EvalReport, LoadedModel, ReportRow};
use srwm_core::numerics::Scalar;
use srwm_core::srwm::parameter_count;
use srwm_core::trainer::{inspect, Checkpoint, Precision, RunOutputs, TrainConfig, Trainer};

#[derive(Parser, Debug)]
#[command(name = "srwm", version, about = "Self-referential weight matrix few-shot learner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate one checkpoint over a list of K_test values.
    Eval(EvalArgs),
    /// Evaluate groups of checkpoints and write a report with a plot.
    Sweep(SweepArgs),
    /// Finite-difference check of the episode loss gradient.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic image directory with a manifest.
    MakeSynthetic(MakeSyntheticArgs),
    /// Print a checkpoint's header and tensors.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Base preset: micro, desk or paper.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// `key = value` file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            cfg = TrainConfig::load(path, cfg)?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: u64,
    /// Output directory for metrics.csv, config.cfg and checkpoints/.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated K_test values.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,15")]
    ktest: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path stem; `.csv` and `.svg` are added.
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// `label=ckpt[,ckpt...]`; several checkpoints under one label are seeds.
    #[arg(long = "group", required = true)]
    groups: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,15")]
    ktest: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "sweep")]
    out: PathBuf,
    /// With exactly two groups, also write a paired baseline vs
    /// bootstrapped table to `<out>-paired.{csv,md}`.
    #[arg(long)]
    paired: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct MakeSyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 30)]
    per_class: usize,
    /// Images are side x side grayscale.
    #[arg(long, default_value_t = 8)]
    side: usize,
    #[arg(long, default_value_t = 0.5)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    path: PathBuf,
}

fn train_with<T: Scalar>(cfg: TrainConfig, args: &TrainArgs) -> Result<()> {
    let data = cfg.data.build()?;
    let mut trainer = match &args.resume {
        Some(path) => Trainer::<T>::resume(Checkpoint::load(path)?, Some(cfg.clone()), data.train)?,
        None => Trainer::<T>::new(cfg.clone(), data.train, data.input_dim, data.patch_dim)?,
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    std::fs::write(args.out.join("config.cfg"), cfg.to_text())?;
    let outputs = RunOutputs {
        metrics: Some(args.out.join("metrics.csv")),
        checkpoint_dir: Some(args.out.join("checkpoints")),
    };
    info!(
        "training {} parameters for {} steps",
        trainer.params.count(),
        cfg.steps.saturating_sub(trainer.step)
    );
    let records = trainer.run(cfg.steps, &outputs)?;
    if let Some(last) = records.last() {
        println!(
            "step {} loss {:.4} acc_student {:.3}",
            last.step, last.diag.loss, last.diag.acc_student
        );
    }
    if let Some(path) = trainer.last_checkpoint() {
        println!("checkpoint {}", path.display());
    }
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.config.build()?;
    cfg.seed = args.seed;
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, args),
        Precision::F64 => train_with::<f64>(cfg, args),
    }
}

fn eval(args: &EvalArgs) -> Result<()> {
    let model = LoadedModel::load(&args.checkpoint)?;
    let mut report = EvalReport::default();
    let label = args
        .checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    for &k in &args.ktest {
        let r = model.evaluate(k, args.episodes, args.seed)?;
        println!("K_test {k:>3}: {:.2}% over {} episodes", 100.0 * r.accuracy(), r.episodes);
        report.rows.push(ReportRow::from_runs(&label, &[r])?);
    }
    let (csv, svg) = report.write(&args.out)?;
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}

fn parse_group(spec: &str) -> Result<(String, Vec<PathBuf>)> {
    let (label, paths) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("--group expects label=ckpt[,ckpt...], got `{spec}`"))?;
    let paths: Vec<PathBuf> = paths.split(',').filter(|p| !p.is_empty()).map(PathBuf::from).collect();
    if paths.is_empty() {
        bail!("group `{label}` lists no checkpoints");
    }
    Ok((label.to_string(), paths))
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let groups: Vec<_> = args.groups.iter().map(|g| parse_group(g)).collect::<Result<_>>()?;
    let report = sweep_report(&groups, &args.ktest, args.episodes, args.seed)?;
    print!("{}", report.to_csv());
    let (csv, svg) = report.write(&args.out)?;
    println!("wrote {} and {}", csv.display(), svg.display());
    if args.paired {
        let [a, b] = groups.as_slice() else {
            bail!("--paired needs exactly two groups, got {}", groups.len());
        };
        let cmp = paired_comparison((&a.0, &a.1), (&b.0, &b.1), &args.ktest, args.episodes, args.seed)?;
        let stem = PathBuf::from(format!("{}-paired", args.out.display()));
        print!("{}", cmp.to_markdown());
        let (csv, md) = cmp.write(&stem)?;
        println!("wrote {} and {}", csv.display(), md.display());
    }
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let cfg = args.config.build()?;
    let (report, count) = gradcheck_episode(&cfg, args.seed, args.eps)?;
    println!(
        "max relative error {:.3e} over {} parameters (threshold {:.0e})",
        report.max_rel_err, count, args.threshold
    );
    Ok(report.max_rel_err < args.threshold)
}

fn make_synthetic(args: &MakeSyntheticArgs) -> Result<()> {
    let dim = args.side * args.side;
    let clusters = SyntheticClusters::new(args.classes, dim, args.spread, args.per_class, args.seed)?;
    let mut manifest = String::new();
    for c in 0..args.classes {
        let dir = args.out.join(format!("class{c:03}"));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for i in 0..args.per_class {
            let x = clusters.example(c, i)?;
            let pixels: Vec<u8> = x
                .data()
                .iter()
                .map(|v| (255.0 * (0.5 + 0.25 * v).clamp(0.0, 1.0)).round() as u8)
                .collect();
            let rel = Path::new(&format!("class{c:03}")).join(format!("{i:04}.fwtn"));
            fwtn::write_u8(args.out.join(&rel), &[args.side, args.side], &pixels)?;
            manifest.push_str(&format!("class{c:03}\t{}\n", rel.display()));
        }
    }
    let path = args.out.join("manifest.tsv");
    std::fs::write(&path, manifest).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "wrote {} classes x {} images to {}",
        args.classes,
        args.per_class,
        args.out.display()
    );
    Ok(())
}

fn inspect_checkpoint(args: &InspectArgs) -> Result<()> {
    let s = inspect(&args.path)?;
    println!("{}", s.path.display());
    println!("version {}", s.version);
    println!("step {}", s.step);
    println!("input_dim {}", s.input_dim);
    let model = s.config.model_config(s.input_dim, s.patch_dim);
    println!("parameters {}", parameter_count(&model));
    println!("--- config");
    print!("{}", s.config.to_text());
    println!("--- tensors");
    for (name, dtype, shape) in &s.tensors {
        println!("{name} {dtype:?} {shape:?}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check above threshold");
                return ExitCode::from(2);
            }
            Err(e) => Err(e),
        },
        Command::MakeSynthetic(a) => make_synthetic(a),
        Command::InspectCheckpoint(a) => inspect_checkpoint(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
