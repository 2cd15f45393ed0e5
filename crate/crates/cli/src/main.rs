mod config;
mod plot;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use startdet::datagen::{self, Dataset, LabelFile, Split};
use startdet::evalkit::{self, EvalReport};
use startdet::model::{self, LossKind, TrainSequence};
use startdet::seqcore::{grid_from_starts, StartSet};

use config::{parse_loss, parse_offset, RunConfig};
use plot::{Chart, Series};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] startdet::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use startdet::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(
                E::Config(_) | E::InvalidSpec(_) | E::Parse { .. } | E::Format { .. },
            ) => 2,
            CliError::Lib(_) => 1,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "startdet",
    version,
    about = "Detect action start frames in feature sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Gen(GenArgs),
    /// Train a scorer on the train split
    Train(TrainArgs),
    /// Score sequences and extract starts
    Predict(PredictArgs),
    /// Evaluate predicted starts against the labels
    Eval(EvalArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory (overrides `data`)
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn keep(self, split: Split) -> bool {
        match self {
            SplitArg::Train => split == Split::Train,
            SplitArg::Test => split == Split::Test,
            SplitArg::All => true,
        }
    }
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    tau: Option<usize>,
    /// Comma-separated p-AP offsets, in the configured unit
    #[arg(long, value_parser = parse_offset, value_delimiter = ',')]
    offsets: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn configure_threads() -> CliResult {
    let Ok(value) = std::env::var("STARTDET_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "STARTDET_THREADS must be a positive integer, got '{value}'"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| startdet::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(|e| startdet::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn required(flag: Option<PathBuf>, file: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| CliError::Usage(format!("no {what} given (flag or config key)")))
}

fn cmd_gen(args: GenArgs) -> CliResult {
    let cfg = RunConfig::load(args.common.config.as_deref())?;
    let mut synth = cfg.synthetic;
    if let Some(seed) = args.seed {
        synth.seed = seed;
    }
    let data = datagen::generate_dataset(&cfg.grammar, &synth)?;
    datagen::write_dataset(&args.common.out, &data)?;

    let m = &data.manifest;
    println!(
        "{} sequences ({} train, {} test), T = {}, d = {}, seed {}",
        m.sequences.len(),
        m.entries(Split::Train).count(),
        m.entries(Split::Test).count(),
        m.frames,
        m.feature_dim,
        m.master_seed
    );
    for name in &m.behaviors {
        println!(
            "  {name:<10} {:>6} starts  {:.3} per sequence",
            m.label_totals[name], m.label_means[name]
        );
    }
    Ok(())
}

fn load_split(dir: &Path, split: SplitArg) -> CliResult<(Dataset, Vec<usize>)> {
    let data = datagen::read_dataset(dir)?;
    let keep = data
        .manifest
        .sequences
        .iter()
        .enumerate()
        .filter(|(_, e)| split.keep(e.split))
        .map(|(i, _)| i)
        .collect();
    Ok((data, keep))
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let cfg = RunConfig::load(args.common.config.as_deref())?;
    let mut train_cfg = cfg.train_config(args.loss)?;
    if let Some(seed) = args.seed {
        train_cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        train_cfg.epochs = epochs;
    }
    if let Some(tau) = args.tau {
        train_cfg.matching.tau = tau;
    }
    train_cfg.validate()?;
    let data_dir = required(args.data, &cfg.data, "dataset directory")?;
    let (data, keep) = load_split(&data_dir, SplitArg::Train)?;
    if keep.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no training sequences",
            data_dir.display()
        )));
    }
    let sequences: Vec<TrainSequence> = keep
        .iter()
        .map(|&i| TrainSequence {
            features: data.records[i].features.mapv(f64::from),
            labels: data.records[i].labels.clone(),
        })
        .collect();

    let out = &args.common.out;
    create_dir(out)?;
    let result = model::train(&sequences, &train_cfg)?;
    model::save_checkpoint(&result.params, &out.join("model.ckpt"))?;

    let mut log = String::from("epoch,lambda,loss,per_frame,structured\n");
    for e in &result.log {
        log.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.lambda, e.loss, e.per_frame, e.structured
        ));
    }
    write_file(&out.join("loss_log.csv"), log.as_bytes())?;
    let resolved = serde_json::to_string_pretty(&train_cfg).expect("config serializes");
    write_file(&out.join("train_config.json"), (resolved + "\n").as_bytes())?;
    if let Some(last) = result.log.last() {
        println!(
            "trained {} loss for {} epochs on {} sequences; final loss {:.6}",
            train_cfg.loss.name(),
            train_cfg.epochs,
            sequences.len(),
            last.loss
        );
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> CliResult {
    let cfg = RunConfig::load(args.common.config.as_deref())?;
    let train_cfg = cfg.train_config(None)?;
    let data_dir = required(args.data, &cfg.data, "dataset directory")?;
    let ckpt = required(args.checkpoint, &cfg.checkpoint, "checkpoint")?;
    let params = model::load_checkpoint(&ckpt)?;
    let (data, keep) = load_split(&data_dir, args.split)?;
    let m = &data.manifest;
    if params.config.input_dim != m.feature_dim || params.config.behaviors != m.behaviors.len() {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} features and {} behaviors, dataset has {} and {}",
            params.config.input_dim,
            params.config.behaviors,
            m.feature_dim,
            m.behaviors.len()
        )));
    }

    let out = &args.common.out;
    create_dir(out)?;
    for &i in &keep {
        let record = &data.records[i];
        let features = record.features.mapv(f64::from);
        let (scores, starts) = model::predict(&params, features.view(), &train_cfg.extract)?;
        let truth = grid_from_starts(&record.labels, features.nrows(), m.behaviors.len())?;
        let id = &record.meta.id;
        datagen::write_scores_csv(
            &out.join(format!("{id}.scores.csv")),
            &m.behaviors,
            &scores,
            Some(&truth),
        )?;
        datagen::write_labels(
            &out.join(format!("{id}.starts.json")),
            &LabelFile {
                fps: record.meta.fps,
                frames: features.nrows(),
                behaviors: m.behaviors.clone(),
                starts,
            },
        )?;
    }
    println!("scored {} sequences into {}", keep.len(), out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let cfg = RunConfig::load(args.common.config.as_deref())?;
    let mut eval_cfg = cfg.eval.clone();
    if let Some(tau) = args.tau {
        eval_cfg.tau = tau;
    }
    if let Some(offsets) = args.offsets {
        eval_cfg.offsets = offsets;
    }
    eval_cfg.validate()?;
    let data_dir = required(args.data, &cfg.data, "dataset directory")?;
    let pred_dir = required(args.predictions, &cfg.predictions, "predictions directory")?;
    let (data, keep) = load_split(&data_dir, args.split)?;
    let behaviors = &data.manifest.behaviors;

    let expected: BTreeSet<String> = keep
        .iter()
        .map(|&i| data.records[i].meta.id.clone())
        .collect();
    let found: BTreeSet<String> = fs::read_dir(&pred_dir)
        .map_err(|e| startdet::Error::Io {
            path: pred_dir.clone(),
            source: e,
        })?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()?
                .strip_suffix(".starts.json")
                .map(str::to_string)
        })
        .collect();
    if expected != found {
        let missing: Vec<&str> = expected.difference(&found).map(String::as_str).collect();
        let extra: Vec<&str> = found.difference(&expected).map(String::as_str).collect();
        return Err(CliError::Usage(format!(
            "predictions do not match the labels; missing: [{}], unexpected: [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }

    let mut preds: Vec<StartSet> = Vec::with_capacity(keep.len());
    for &i in &keep {
        let path = pred_dir.join(format!("{}.starts.json", data.records[i].meta.id));
        let file = datagen::read_labels(&path)?;
        if &file.behaviors != behaviors {
            return Err(CliError::Usage(format!(
                "{} lists different behaviors",
                path.display()
            )));
        }
        preds.push(file.starts);
    }
    let pairs: Vec<(&StartSet, &StartSet)> = keep
        .iter()
        .map(|&i| &data.records[i].labels)
        .zip(&preds)
        .collect();
    let report = evalkit::evaluate(&pairs, behaviors, &eval_cfg)?;

    let out = &args.common.out;
    create_dir(out)?;
    evalkit::write_report_json(&report, &out.join("report.json"))?;
    let mut csv = Vec::new();
    evalkit::write_report_csv(&report, &mut csv)?;
    write_file(&out.join("report.csv"), &csv)?;
    write_plots(&report, behaviors, out)?;

    let a = &report.aggregate;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(
        stdout,
        "{} sequences, tau = {}: precision {:.4} recall {:.4} F1 {:.4}",
        report.sequences, report.tau, a.precision, a.recall, a.f1
    );
    for o in &report.p_map {
        let _ = writeln!(
            stdout,
            "  p-mAP @ {} ({} frames): {:.4}",
            o.offset, o.offset_frames, o.value
        );
    }
    Ok(())
}

fn write_plots(report: &EvalReport, behaviors: &[String], out: &Path) -> CliResult {
    let f1 = Chart {
        title: "F1 vs tau",
        x_label: "tau (frames)",
        y_label: "F1",
        y_range: (0.0, 1.0),
        series: vec![Series {
            name: "all".into(),
            points: report
                .f1_vs_tau
                .iter()
                .map(|&(t, f)| (t as f64, f))
                .collect(),
        }],
    };
    let pmap = Chart {
        title: "p-mAP vs offset",
        x_label: "offset",
        y_label: "p-mAP",
        y_range: (0.0, 1.0),
        series: vec![Series {
            name: "p-mAP".into(),
            points: report.p_map.iter().map(|o| (o.offset, o.value)).collect(),
        }],
    };
    let pr = Chart {
        title: "Precision-recall",
        x_label: "recall",
        y_label: "precision",
        y_range: (0.0, 1.0),
        series: behaviors
            .iter()
            .zip(&report.pr_curves)
            .map(|(name, c)| Series {
                name: name.clone(),
                points: c.points.clone(),
            })
            .collect(),
    };
    write_file(&out.join("f1_vs_tau.svg"), plot::render(&f1).as_bytes())?;
    write_file(&out.join("p_map.svg"), plot::render(&pmap).as_bytes())?;
    write_file(&out.join("pr_curves.svg"), plot::render(&pr).as_bytes())
}
