use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use interaction_gcn::accounting::count_flops;
use interaction_gcn::checkpoint::{self, CheckpointError};
use interaction_gcn::features::{stream_input, ALL_STREAMS};
use interaction_gcn::layers::gradcheck::CheckedLayer;
use interaction_gcn::model::{parse_streams, thread_count, Model, ModelConfig, ModelError};
use interaction_gcn::skeleton::{
    clip_seed, generate_synthetic_clip, label_from_filename, parse_skeleton_file, prepare_clip, read_corpus,
    serialize_skeleton, synth_corpus, synth_filename, write_corpus, SkeletonClip, SkeletonError, ALIGNED_FRAMES,
};
use interaction_gcn::tensor::TensorError;
use interaction_gcn::train::{evaluate, fit, split_holdout, EpochLog, Evaluation, RunConfig, TrainError};

/// Gradient checks fail above this relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "igcn", version, about = "Two-person skeleton interaction recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic two-person clips as skeleton text files.
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        clips_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse, pair and align a directory of skeleton files into one corpus file.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Preprocessed corpus; a synthetic corpus is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Stream subset, e.g. `A,B,C` or `(B)+(C)`.
        #[arg(long, default_value = "A,B,C")]
        streams: String,
        /// Per-epoch metrics as JSON lines; defaults to `<out>.metrics.jsonl`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Accuracy and confusion matrix of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        streams: Option<String>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Parameter and FLOP report.
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        phi: Option<u32>,
        #[arg(long, default_value_t = ALIGNED_FRAMES)]
        frames: usize,
        /// Include one row per layer.
        #[arg(long)]
        layers: bool,
        /// Structured copy of the report.
        #[arg(long, default_value = "cost_report.json")]
        json: PathBuf,
    },
    /// Finite-difference gradient checks of the learned layers.
    Gradcheck {
        #[arg(long, default_value = "all")]
        layer: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A failure with a short category printed for scripts.
struct Failure {
    category: &'static str,
    message: String,
}

impl Failure {
    fn new(category: &'static str, message: impl Display) -> Self {
        Self {
            category,
            message: message.to_string(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        Self::new(e.category(), e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let category = if matches!(e, ModelError::Config(_)) { "config" } else { "model" };
        Self::new(category, e)
    }
}

impl From<SkeletonError> for Failure {
    fn from(e: SkeletonError) -> Self {
        Self::new("data", e)
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        Self::new("tensor", e)
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let category = if matches!(e, CheckpointError::Io(_)) { "io" } else { "checkpoint" };
        Self::new(category, e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::new("io", e)
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            classes,
            clips_per_class,
            seed,
            out,
        } => synth(classes, clips_per_class, seed, &out),
        Command::Preprocess { input, out } => preprocess(&input, &out),
        Command::Train {
            config,
            data,
            out,
            streams,
            metrics,
        } => train(config.as_deref(), data.as_deref(), &out, &streams, metrics),
        Command::Eval {
            ckpt,
            data,
            streams,
            batch_size,
        } => eval(&ckpt, &data, streams.as_deref(), batch_size),
        Command::Count {
            config,
            phi,
            frames,
            layers,
            json,
        } => count(config.as_deref(), phi, frames, layers, &json),
        Command::Gradcheck { layer, seed } => gradcheck(&layer, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message = f.message.replace('\n', " ");
            eprintln!("error[{}]: {message}", f.category);
            ExitCode::FAILURE
        }
    }
}

fn synth(classes: usize, clips_per_class: usize, seed: u64, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    for class in 0..classes {
        for i in 0..clips_per_class {
            let s = clip_seed(seed, i);
            let clip = generate_synthetic_clip(class, s)?;
            fs::write(out.join(synth_filename(class, s)), serialize_skeleton(&clip))?;
        }
    }
    println!("wrote {} clips to {}", classes * clips_per_class, out.display());
    Ok(())
}

fn preprocess(input: &Path, out: &Path) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(input)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "skeleton"));
    files.sort();
    if files.is_empty() {
        return Err(Failure::new("data", format!("no .skeleton files in {}", input.display())));
    }
    let (mut clips, mut dropped) = (Vec::with_capacity(files.len()), 0);
    for path in &files {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let action = label_from_filename(&name)
            .filter(|&a| a > 0)
            .ok_or_else(|| Failure::new("data", format!("{name}: no action number A<NNN> in file name")))?;
        let text = fs::read_to_string(path)?;
        let parsed = parse_skeleton_file(&text).map_err(|e| Failure::new("data", format!("{name}: {e}")))?;
        dropped += parsed.dropped_bodies;
        let mut clip = prepare_clip(&parsed.clip).map_err(|e| Failure::new("data", format!("{name}: {e}")))?;
        clip.label = action as usize - 1;
        for kind in ALL_STREAMS {
            stream_input(&clip, kind).map_err(|e| Failure::new("data", format!("{name}: {e}")))?;
        }
        clips.push(clip);
    }
    write_corpus(out, &clips)?;
    if dropped > 0 {
        log::warn!("dropped {dropped} extra body tracks");
    }
    println!("wrote {} clips of {ALIGNED_FRAMES} frames to {}", clips.len(), out.display());
    Ok(())
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

#[derive(Serialize)]
struct FinalMetrics<'a> {
    model: String,
    streams: String,
    epochs_run: usize,
    stopped_early: bool,
    first_loss: f64,
    train: &'a Evaluation,
    holdout: Option<&'a Evaluation>,
}

fn train(config: Option<&Path>, data: Option<&Path>, out: &Path, streams: &str, metrics: Option<PathBuf>) -> Result<()> {
    let cfg = load_run_config(config)?;
    let kinds = parse_streams(streams)?;
    let threads = thread_count();
    let clips: Vec<SkeletonClip> = match data {
        Some(p) => read_corpus(p)?,
        None => synth_corpus(cfg.train.synthetic_classes, cfg.train.synthetic_clips_per_class, cfg.train.seed)?,
    };
    let (train_set, holdout) = split_holdout(clips, cfg.train.holdout, cfg.train.seed);
    let mut model = Model::<f32>::new(&cfg.model, &kinds, cfg.train.seed)?;
    println!(
        "{} streams {} | {} train / {} held out | {} threads",
        model.config.name(),
        streams,
        train_set.len(),
        holdout.len(),
        threads
    );
    let metrics = metrics.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".metrics.jsonl");
        PathBuf::from(p)
    });
    let mut sink = std::io::BufWriter::new(fs::File::create(&metrics)?);
    let mut write_err = None;
    let report = fit(&mut model, &train_set, &holdout, &cfg.train, threads, |log: &EpochLog| {
        println!("{}", epoch_line(log));
        let line = serde_json::to_string(log).map_err(Failure::from);
        if let Err(e) = line.and_then(|l| writeln!(sink, "{l}").map_err(Failure::from)) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    checkpoint::save(out, &model)?;
    let batch = cfg.train.batch_size;
    let train_eval = evaluate(&model, &train_set, batch, threads)?;
    let holdout_eval = if holdout.is_empty() {
        None
    } else {
        Some(evaluate(&model, &holdout, batch, threads)?)
    };
    let summary = FinalMetrics {
        model: model.config.name(),
        streams: streams.to_string(),
        epochs_run: report.epochs.len(),
        stopped_early: report.stopped_early,
        first_loss: report.first_loss,
        train: &train_eval,
        holdout: holdout_eval.as_ref(),
    };
    writeln!(sink, "{}", serde_json::to_string(&summary)?)?;
    sink.flush()?;
    print!("train accuracy {:.4}", train_eval.accuracy);
    if let Some(h) = &holdout_eval {
        print!(", held-out accuracy {:.4}", h.accuracy);
    }
    println!("\nwrote {} and {}", out.display(), metrics.display());
    Ok(())
}

fn epoch_line(log: &EpochLog) -> String {
    let mut s = format!(
        "epoch {:>3}  lr {:.4}  loss {:.5}  running acc {:.4}",
        log.epoch, log.lr, log.loss, log.running_accuracy
    );
    if let Some(a) = log.train_accuracy {
        s += &format!("  train acc {a:.4}");
    }
    if let Some(a) = log.holdout_accuracy {
        s += &format!("  held-out acc {a:.4}");
    }
    s + &format!("  {:.1}s", log.seconds)
}

fn eval(ckpt: &Path, data: &Path, streams: Option<&str>, batch_size: usize) -> Result<()> {
    let mut model: Model<f32> = checkpoint::load(ckpt)?;
    if let Some(s) = streams {
        model = model.subset(&parse_streams(s)?)?;
    }
    let clips = read_corpus(data)?;
    let e = evaluate(&model, &clips, batch_size, thread_count())?;
    println!("{} on {} clips", model.config.name(), clips.len());
    println!("accuracy {:.4}", e.accuracy);
    for (letter, acc) in &e.stream_accuracy {
        println!("stream {letter} alone {acc:.4}");
    }
    println!("confusion (rows: true class, columns: predicted)");
    for (i, row) in e.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
        println!("{i:>4} {}", cells.join(""));
    }
    Ok(())
}

fn count(config: Option<&Path>, phi: Option<u32>, frames: usize, layers: bool, json: &Path) -> Result<()> {
    let mut model_cfg = match config {
        Some(p) => load_run_config(Some(p))?.model,
        None => ModelConfig::default(),
    };
    if let Some(phi) = phi {
        model_cfg.phi = phi;
    }
    model_cfg.validate()?;
    let model = Model::<f32>::full(&model_cfg, 0)?;
    let report = count_flops(&model, 1, frames);
    print!("{}", report.to_text(layers));
    fs::write(json, serde_json::to_string_pretty(&report)? + "\n")?;
    println!("wrote {}", json.display());
    Ok(())
}

fn gradcheck(layer: &str, seed: u64) -> Result<()> {
    let layers = CheckedLayer::parse(layer)
        .ok_or_else(|| Failure::new("usage", format!("unknown layer {layer:?}; expected agc, tgc, att or all")))?;
    let mut worst: f64 = 0.0;
    for l in layers {
        let report = l.run(seed)?;
        print!("{report}");
        worst = worst.max(report.max_error());
    }
    if worst > GRADCHECK_TOLERANCE {
        return Err(Failure::new(
            "gradient",
            format!("max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:.0e}"),
        ));
    }
    println!("pass: max relative error {worst:.3e} <= {GRADCHECK_TOLERANCE:.0e}");
    Ok(())
}
