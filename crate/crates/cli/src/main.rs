use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use ssp_core::gradcheck::gradient_suite;
use ssp_core::io::{self, Checkpoint, CheckpointMeta};
use ssp_core::losses::LossWeights;
use ssp_core::pipeline::{evaluate, infer_sequence, predictions, teacher_targets, train_model, Sequence, TrainOptions};
use ssp_core::propagation::{video_step, PropagatorState, SimilarityMode, StepOptions};
use ssp_core::surrogate::{surrogate_features, FEATURE_CHANNELS};
use ssp_core::synth::{generate_sequence, SceneConfig};
use ssp_core::train::{TrainConfig, TrainMode};
use ssp_core::Error;

#[derive(Parser)]
#[command(name = "ssp", version, about = "Semantic similarity propagation for aerial video segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Base,
    Kd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimilarityArg {
    Conv,
    Cosine,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic sequences from a JSON scene config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the similarity layer (and optionally the image model head).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "base")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long = "lambda-kd", default_value_t = 135000.0)]
        lambda_kd: f64,
        #[arg(long, default_value_t = 2.0)]
        tau: f64,
        #[arg(long = "one-step")]
        one_step: bool,
        #[arg(long = "no-registration")]
        no_registration: bool,
        #[arg(long, value_enum, default_value = "conv")]
        similarity: SimilarityArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        /// Teacher targets from distill-prep [default: <data>/teacher]
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream a checkpoint over every video and write logits and label maps.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "no-registration")]
        no_registration: bool,
        #[arg(long = "alpha-zero")]
        alpha_zero: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// mIoU on annotated frames and TC over all consecutive pairs.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        report: ReportFormat,
    },
    /// Build consistent teacher targets for distillation.
    DistillPrep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "teacher-margin", default_value_t = 4.0)]
        teacher_margin: f64,
        #[arg(long, default_value_t = 0.05)]
        corruption: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Wall-clock timing of one propagation step.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 50)]
        warmup: usize,
    },
}

/// Failure of a command, carrying its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: if e.is_data_error() { 2 } else { 3 }, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

/// Bad flag values are usage errors rather than contract violations.
fn usage(e: Error) -> Failure {
    Failure { code: 1, message: e.to_string() }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message.lines().next().unwrap_or_default());
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Synth { config, out } => synth(&config, &out),
        Command::Train { data, mode, lambda, lambda_kd, tau, one_step, no_registration, similarity, seed, epochs, lr, momentum, teacher, out } => {
            let options = TrainOptions {
                config: TrainConfig {
                    lr,
                    momentum,
                    epochs,
                    seed,
                    mode: match mode {
                        ModeArg::Base => TrainMode::Base,
                        ModeArg::Kd => TrainMode::Distillation,
                    },
                    one_step,
                    registration: !no_registration,
                },
                weights: LossWeights { lambda_base: lambda, lambda_kd, tau },
                similarity: match similarity {
                    SimilarityArg::Conv => SimilarityMode::Conv,
                    SimilarityArg::Cosine => SimilarityMode::Cosine,
                },
                head_fit: Default::default(),
            };
            let teacher = teacher.unwrap_or_else(|| data.join("teacher"));
            train(&data, &options, &teacher, &out)
        }
        Command::Infer { data, ckpt, no_registration, alpha_zero, out } => infer(&data, &ckpt, StepOptions { registration: !no_registration, alpha_zero }, &out),
        Command::Eval { pred, data, report } => eval(&pred, &data, report),
        Command::DistillPrep { data, teacher_margin, corruption, seed, out } => distill_prep(&data, teacher_margin, corruption, seed, &out),
        Command::Gradcheck { seed, instances } => gradcheck(seed, instances),
        Command::Bench { data, ckpt, steps, warmup } => bench(&data, &ckpt, steps, warmup),
    }
}

/// The scene config plus how many sequences to render; sequence `i` uses
/// seed `seed + i`.
fn read_synth_config(path: &Path) -> Result<(SceneConfig, usize), Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::MissingArtifact(format!("{}: {}", path.display(), e)))?;
    let bad = |e: serde_json::Error| Error::Format(format!("{}: {}", path.display(), e));
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
    let sequences = match value.as_object_mut().and_then(|o| o.remove("sequences")) {
        None => 1,
        Some(v) => v.as_u64().filter(|&n| n >= 1).ok_or_else(|| Error::Format(format!("{}: sequences must be a positive integer", path.display())))? as usize,
    };
    let config: SceneConfig = serde_json::from_value(value).map_err(bad)?;
    Ok((config, sequences))
}

fn synth(config: &Path, out: &Path) -> CmdResult {
    let (config, count) = read_synth_config(config)?;
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    for i in 0..count {
        let cfg = SceneConfig { seed: config.seed.wrapping_add(i as u64), ..config.clone() };
        let name = format!("seq_{:03}", i);
        let seq = Sequence::from_synthetic(&name, &generate_sequence(&cfg)?);
        io::save_sequence(&out.join(&name), &seq)?;
    }
    println!("wrote {} sequence(s) to {}", count, out.display());
    Ok(())
}

fn train(data: &Path, options: &TrainOptions, teacher: &Path, out: &Path) -> CmdResult {
    options.config.validate().map_err(usage)?;
    options.weights.validate().map_err(usage)?;
    let sequences = io::load_dataset(data)?;
    let teachers = match options.config.mode {
        TrainMode::Distillation => Some(sequences.iter().map(|s| io::read_teachers(teacher, s)).collect::<Result<Vec<_>, _>>()?),
        TrainMode::Base => None,
    };
    let trained = train_model(&sequences, options, teachers.as_deref())?;
    let cfg = &options.config;
    let meta = CheckpointMeta {
        mode: cfg.mode,
        seed: cfg.seed,
        epochs: cfg.epochs,
        steps: trained.steps,
        lr: cfg.lr,
        momentum: cfg.momentum,
        one_step: cfg.one_step,
        registration: cfg.registration,
        similarity: options.similarity,
        weights: options.weights,
        classes: sequences[0].num_classes(),
        feature_channels: FEATURE_CHANNELS,
        epoch_losses: trained.epoch_losses.clone(),
    };
    io::write_checkpoint(out, &Checkpoint { meta, model: trained.model })?;
    for (e, l) in trained.epoch_losses.iter().enumerate() {
        println!("epoch {} loss {:.6}", e + 1, l);
    }
    println!("wrote checkpoint {} ({} steps)", out.display(), trained.steps);
    Ok(())
}

fn load_checkpoint_for(ckpt: &Path, sequences: &[Sequence]) -> Result<Checkpoint, Error> {
    let ckpt = io::read_checkpoint(ckpt)?;
    if let Some(s) = sequences.iter().find(|s| s.num_classes() != ckpt.meta.classes) {
        return Err(Error::Manifest(format!("sequence '{}' has {} classes, checkpoint expects {}", s.name, s.num_classes(), ckpt.meta.classes)));
    }
    Ok(ckpt)
}

fn infer(data: &Path, ckpt: &Path, options: StepOptions, out: &Path) -> CmdResult {
    let sequences = io::load_dataset(data)?;
    let ckpt = load_checkpoint_for(ckpt, &sequences)?;
    for s in &sequences {
        let logits = infer_sequence(s, &ckpt.model, options)?;
        fs::create_dir_all(io::sequence_dir(out, &s.name))?;
        for (k, (l, p)) in logits.iter().zip(predictions(&logits)?).enumerate() {
            io::write_tensor(&io::logits_path(out, &s.name, k), l)?;
            io::write_pgm(&io::prediction_path(out, &s.name, k), &p)?;
        }
    }
    println!("wrote predictions for {} sequence(s) to {}", sequences.len(), out.display());
    Ok(())
}

fn eval(pred: &Path, data: &Path, format: ReportFormat) -> CmdResult {
    let sequences = io::load_dataset(data)?;
    let preds = io::read_predictions(pred, &sequences)?;
    let report = evaluate(&sequences, &preds)?;
    let text = match format {
        ReportFormat::Text => report.to_text(),
        ReportFormat::Json => serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n",
    };
    emit(&text)
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> CmdResult {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn distill_prep(data: &Path, margin: f64, corruption: f64, seed: u64, out: &Path) -> CmdResult {
    if !(margin > 0.0 && margin.is_finite()) || !(0.0..1.0).contains(&corruption) {
        return Err(usage(Error::InvalidArgument("teacher margin must be positive and corruption in [0, 1)".into())));
    }
    let sequences = io::load_dataset(data)?;
    for s in &sequences {
        let targets = teacher_targets(s, margin, corruption, seed.wrapping_add(s.seed))?;
        io::write_teachers(out, &s.name, &targets)?;
    }
    println!("wrote teacher targets for {} sequence(s) to {}", sequences.len(), out.display());
    Ok(())
}

fn gradcheck(seed: u64, instances: usize) -> CmdResult {
    let entries = gradient_suite(seed, instances)?;
    let mut failed = 0;
    for e in &entries {
        let status = if e.ok() { "ok" } else { "FAIL" };
        let kind = if e.negative_control { " (negative control, must fail)" } else { "" };
        println!("{:<4} {:<22} seed {:>4} max rel error {:.3e} over {} entries{}", status, e.name, e.seed, e.report.max_rel_error, e.report.checked, kind);
        failed += usize::from(!e.ok());
    }
    if failed > 0 {
        return Err(Failure { code: 3, message: format!("{} of {} gradient checks failed", failed, entries.len()) });
    }
    println!("all {} gradient checks passed", entries.len());
    Ok(())
}

fn bench(data: &Path, ckpt: &Path, steps: usize, warmup: usize) -> CmdResult {
    if steps == 0 {
        return Err(usage(Error::InvalidArgument("steps must be positive".into())));
    }
    let sequences = io::load_dataset(data)?;
    let ckpt = load_checkpoint_for(ckpt, &sequences)?;
    // precompute inputs so only the propagation step is timed
    let mut frames = Vec::new();
    for s in &sequences {
        for k in 0..s.len() {
            let h = if k > 0 { Some(s.pair_homography(k)?) } else { None };
            frames.push((s.image_logits(&ckpt.model.head, k)?, surrogate_features(&s.frames[k])?, h));
        }
    }
    let mut state = PropagatorState::new();
    let mut times = Vec::with_capacity(steps);
    for i in 0..warmup + steps {
        let (q, f, h) = &frames[i % frames.len()];
        if h.is_none() {
            state.reset();
        }
        let start = Instant::now();
        std::hint::black_box(video_step(&mut state, q, f, h.as_ref(), &ckpt.model.layer, StepOptions::default())?);
        if i >= warmup {
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let std = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / times.len() as f64).sqrt();
    let (h, w) = (frames[0].0.height(), frames[0].0.width());
    println!("video_step {}x{}: mean {:.4} ms, std {:.4} ms over {} steps after {} warmup", h, w, mean, std, steps, warmup);
    Ok(())
}
