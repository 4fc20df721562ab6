//! Operator surface: dataset synthesis, training, detection, evaluation and
//! self-check. Exit codes: 0 success, 1 usage, 2 data error, 3 numerical
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use mltpn::anchors::generate_anchors;
use mltpn::data::{
    self, generate_synthetic, read_annotations, read_features, window, Annotation,
    FeatureSequence, SyntheticSpec, Window, DEFAULT_KEEP_FRACTION,
};
use mltpn::detector::{
    decode_predictions, nms_per_video_class, read_detections, write_detections, Detection,
};
use mltpn::interval::Interval;
use mltpn::metrics::{map_suite, parse_threshold_range, GroundTruth};
use mltpn::model::{Model, ModelConfig};
use mltpn::selfcheck::run_selfcheck;
use mltpn::tensor::restore_checkpoint;
use mltpn::trainer::{fit, TrainConfig, TrainError};

#[derive(Parser)]
#[command(
    name = "mltpn",
    version,
    about = "Temporal action detection on snippet-feature sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature/annotation benchmark
    Synth(SynthArgs),
    /// Train a model on a data directory
    Train(TrainArgs),
    /// Decode detections from a trained checkpoint
    Detect(DetectArgs),
    /// Evaluate a detection file against annotations
    Eval(EvalArgs),
    /// Run the built-in verification suite
    Selfcheck,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic spec file (key-value text)
    #[arg(long)]
    spec: PathBuf,
    /// Output directory (features/ and annotations.tsv are created inside)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Model config file; defaults apply when omitted
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Train config file; SGD defaults (momentum 0.9, weight decay 1e-4,
    /// batch 16, lr 0.001 decayed x0.1 after epoch 15) apply when omitted
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Data directory produced by `synth` (features/ + annotations.tsv)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for curves, checkpoint and manifest
    #[arg(long)]
    out: PathBuf,
    /// Window stride in snippets; defaults to half the model window
    #[arg(long)]
    stride: Option<usize>,
    /// Fraction of videos held out for validation
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// Resume from an existing checkpoint, continuing epoch numbering
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Model config matching the checkpoint
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Data directory with features/
    #[arg(long)]
    data: PathBuf,
    /// Output detection file
    #[arg(long)]
    out: PathBuf,
    /// IoU threshold of the per-class NMS
    #[arg(long, default_value_t = 0.2)]
    nms_threshold: f64,
    /// Minimum fused score (class probability x predicted IoU)
    #[arg(long, default_value_t = 0.01)]
    score_floor: f64,
    /// Window stride in snippets; defaults to half the model window
    #[arg(long)]
    stride: Option<usize>,
    /// Keep only the top-k detections per video before NMS; 0 keeps all
    #[arg(long, default_value_t = 0)]
    top_k: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Detection file from `detect`
    #[arg(long)]
    detections: PathBuf,
    /// Annotation file with ground truth
    #[arg(long)]
    annotations: PathBuf,
    /// IoU thresholds as start:stop:step (inclusive), e.g. 0.5:0.95:0.05
    #[arg(long, default_value = "0.3:0.7:0.1")]
    thresholds: String,
    /// Output directory for report.txt and report.kv
    #[arg(long)]
    out: PathBuf,
}

/// Failure routed to a process exit code.
enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn exit(&self) -> ExitCode {
        let (code, label, message) = match self {
            Failure::Usage(m) => (1u8, "usage", m),
            Failure::Data(m) => (2, "data", m),
            Failure::Numerical(m) => (3, "numerical", m),
        };
        eprintln!("error ({label}): {message}");
        ExitCode::from(code)
    }
}

fn data_err(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through this path too
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Detect(args) => cmd_detect(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Selfcheck => cmd_selfcheck(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => failure.exit(),
    }
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_manifest(path: &Path, command: &str, fields: &[(&str, String)]) -> Result<(), Failure> {
    let mut out = format!("command {}\ntimestamp_unix {}\n", command, timestamp());
    for (key, value) in fields {
        out.push_str(&format!("{} {}\n", key, value));
    }
    fs::write(path, out).map_err(data_err)
}

fn cmd_synth(args: SynthArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.spec)
        .map_err(|e| Failure::Data(format!("cannot read {}: {}", args.spec.display(), e)))?;
    let spec = SyntheticSpec::from_config_str(&text).map_err(data_err)?;
    // generate fully before creating any output
    let (sequences, annotations) = generate_synthetic(&spec).map_err(data_err)?;

    let features_dir = args.out.join("features");
    fs::create_dir_all(&features_dir).map_err(data_err)?;
    for seq in &sequences {
        let path = features_dir.join(format!("{}.mlft", seq.video_id));
        data::write_features(&path, seq).map_err(data_err)?;
    }
    data::write_annotations(&args.out.join("annotations.tsv"), &annotations).map_err(data_err)?;
    write_manifest(
        &args.out.join("manifest.txt"),
        "synth",
        &[
            ("spec_path", args.spec.display().to_string()),
            ("out_dir", args.out.display().to_string()),
            ("seed", spec.seed.to_string()),
            ("resolved_spec", spec.to_config_string().replace('\n', "; ")),
        ],
    )?;
    println!(
        "wrote {} feature files and {} annotations under {}",
        sequences.len(),
        annotations.iter().map(|a| a.instances.len()).sum::<usize>(),
        args.out.display()
    );
    Ok(())
}

fn load_model_config(path: &Option<PathBuf>) -> Result<ModelConfig, Failure> {
    match path {
        None => Ok(ModelConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Data(format!("cannot read {}: {}", p.display(), e)))?;
            ModelConfig::from_config_str(&text).map_err(data_err)
        }
    }
}

fn load_train_config(path: &Option<PathBuf>) -> Result<TrainConfig, Failure> {
    match path {
        None => Ok(TrainConfig::sgd_defaults()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Data(format!("cannot read {}: {}", p.display(), e)))?;
            TrainConfig::from_config_str(&text).map_err(data_err)
        }
    }
}

/// Feature sequences sorted by video id, paired with their annotations.
fn load_dataset(dir: &Path) -> Result<(Vec<FeatureSequence>, Vec<Annotation>), Failure> {
    let features_dir = dir.join("features");
    let entries = fs::read_dir(&features_dir).map_err(|e| {
        Failure::Data(format!("cannot read {}: {}", features_dir.display(), e))
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |x| x == "mlft"))
        .collect();
    paths.sort();
    let mut sequences = Vec::with_capacity(paths.len());
    for path in paths {
        sequences.push(read_features(&path).map_err(data_err)?);
    }
    let ann_path = dir.join("annotations.tsv");
    let annotations = if ann_path.exists() {
        read_annotations(&ann_path).map_err(data_err)?
    } else {
        Vec::new()
    };
    Ok((sequences, annotations))
}

fn annotation_for<'a>(annotations: &'a [Annotation], video_id: &str) -> Annotation {
    annotations
        .iter()
        .find(|a| a.video_id == video_id)
        .cloned()
        .unwrap_or_else(|| Annotation {
            video_id: video_id.to_string(),
            instances: Vec::new(),
        })
}

fn cut_windows(
    sequences: &[FeatureSequence],
    annotations: &[Annotation],
    length: usize,
    stride: usize,
) -> Vec<Window> {
    sequences
        .iter()
        .flat_map(|seq| {
            let ann = annotation_for(annotations, &seq.video_id);
            window(seq, &ann, length, stride, DEFAULT_KEEP_FRACTION)
        })
        .collect()
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let model_config = load_model_config(&args.model_config)?;
    let train_config = load_train_config(&args.train_config)?;
    let (sequences, annotations) = load_dataset(&args.data)?;
    if sequences.is_empty() {
        return Err(Failure::Data(format!(
            "no feature files under {}",
            args.data.display()
        )));
    }
    for seq in &sequences {
        if seq.dim != model_config.feature_dim {
            return Err(Failure::Data(format!(
                "video {} has feature dim {}, model expects {}",
                seq.video_id, seq.dim, model_config.feature_dim
            )));
        }
    }
    let length = model_config.base_length;
    let stride = args.stride.unwrap_or(length / 2);
    data::validate_stride(length, stride, &annotations).map_err(data_err)?;
    if !(args.val_fraction > 0.0 && args.val_fraction < 1.0) {
        return Err(Failure::Data(format!(
            "val_fraction must be in (0, 1), got {}",
            args.val_fraction
        )));
    }
    // deterministic split: videos are sorted by id, the tail is validation
    let val_count = ((sequences.len() as f64 * args.val_fraction).round() as usize)
        .clamp(1, sequences.len().saturating_sub(1).max(1));
    let split = sequences.len().saturating_sub(val_count);
    if split == 0 {
        return Err(Failure::Data(
            "dataset too small to hold out a validation split".into(),
        ));
    }
    let train_windows = cut_windows(&sequences[..split], &annotations, length, stride);
    let val_windows = cut_windows(&sequences[split..], &annotations, length, stride);

    let model = Model::new(model_config.clone(), train_config.seed).map_err(data_err)?;
    let mut epoch_offset = 0usize;
    if let Some(ckpt) = &args.resume {
        restore_checkpoint(ckpt, model.params()).map_err(data_err)?;
        let curves = args.out.join("curves.txt");
        if curves.exists() {
            let text = fs::read_to_string(&curves).map_err(data_err)?;
            epoch_offset = text
                .lines()
                .filter_map(|l| l.split('\t').next())
                .filter_map(|e| e.parse::<usize>().ok())
                .max()
                .unwrap_or(0);
        }
    }

    fs::create_dir_all(&args.out).map_err(data_err)?;
    fs::write(args.out.join("model.config"), model_config.to_config_string()).map_err(data_err)?;
    fs::write(args.out.join("train.config"), train_config.to_config_string()).map_err(data_err)?;
    let result = fit(
        &model,
        &train_windows,
        &val_windows,
        &train_config,
        &args.out,
        epoch_offset,
    )
    .map_err(|e| match e {
        TrainError::Diverged { .. } => Failure::Numerical(e.to_string()),
        other => Failure::Data(other.to_string()),
    })?;
    write_manifest(
        &args.out.join("manifest.txt"),
        "train",
        &[
            ("data_dir", args.data.display().to_string()),
            ("out_dir", args.out.display().to_string()),
            (
                "model_config_path",
                args.model_config
                    .as_ref()
                    .map_or("<defaults>".into(), |p| p.display().to_string()),
            ),
            (
                "train_config_path",
                args.train_config
                    .as_ref()
                    .map_or("<defaults>".into(), |p| p.display().to_string()),
            ),
            ("seed", train_config.seed.to_string()),
            ("stride", stride.to_string()),
            ("val_fraction", args.val_fraction.to_string()),
            ("epoch_offset", epoch_offset.to_string()),
            ("train_windows", train_windows.len().to_string()),
            ("val_windows", val_windows.len().to_string()),
        ],
    )?;
    println!(
        "trained {} epochs; best validation loss {:.6} at epoch {}; checkpoint {}",
        result.rows.len(),
        result.best_val_loss,
        result.best_epoch,
        result.checkpoint_path.display()
    );
    Ok(())
}

fn cmd_detect(args: DetectArgs) -> Result<(), Failure> {
    let model_config = load_model_config(&args.model_config)?;
    let model = Model::new(model_config.clone(), 0).map_err(data_err)?;
    restore_checkpoint(&args.checkpoint, model.params()).map_err(data_err)?;
    let (sequences, _) = load_dataset(&args.data)?;
    let length = model_config.base_length;
    let stride = args.stride.unwrap_or(length / 2);
    let anchors = generate_anchors(&model.anchor_layout());

    let mut detections: Vec<Detection> = Vec::new();
    for seq in &sequences {
        let empty = Annotation {
            video_id: seq.video_id.clone(),
            instances: Vec::new(),
        };
        let mut per_video: Vec<Detection> = Vec::new();
        for w in window(seq, &empty, length, stride, DEFAULT_KEEP_FRACTION) {
            let out = model
                .forward(&w.features, w.rows, w.dim)
                .map_err(|e| Failure::Numerical(e.to_string()))?;
            let values = out.values(model_config.num_classes);
            let local = decode_predictions(
                &values,
                &anchors,
                &seq.video_id,
                length as f64,
                args.score_floor,
            )
            .map_err(data_err)?;
            // merge into video coordinates before cross-window NMS
            let offset = w.offset as f64;
            let limit = seq.rows as f64;
            per_video.extend(local.into_iter().filter_map(|d| {
                let shifted = Interval::new(
                    d.interval.start() + offset,
                    d.interval.end() + offset,
                )
                .ok()?;
                let clipped = shifted.clip(0.0, limit)?;
                Some(Detection {
                    interval: clipped,
                    ..d
                })
            }));
        }
        if args.top_k > 0 && per_video.len() > args.top_k {
            per_video.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            per_video.truncate(args.top_k);
        }
        detections.extend(nms_per_video_class(&per_video, args.nms_threshold));
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(data_err)?;
        }
    }
    write_detections(&args.out, &detections).map_err(data_err)?;
    let manifest = args.out.with_extension("manifest.txt");
    write_manifest(
        &manifest,
        "detect",
        &[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("data_dir", args.data.display().to_string()),
            ("out_file", args.out.display().to_string()),
            ("nms_threshold", args.nms_threshold.to_string()),
            ("score_floor", args.score_floor.to_string()),
            ("stride", stride.to_string()),
            ("top_k", args.top_k.to_string()),
        ],
    )?;
    println!(
        "wrote {} detections for {} videos to {}",
        detections.len(),
        sequences.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let thresholds =
        parse_threshold_range(&args.thresholds).map_err(|e| Failure::Usage(e.to_string()))?;
    let detections = read_detections(&args.detections).map_err(data_err)?;
    let annotations = read_annotations(&args.annotations).map_err(data_err)?;
    let ground_truths: Vec<GroundTruth> = annotations
        .iter()
        .flat_map(|a| {
            a.instances.iter().map(|(interval, class)| GroundTruth {
                video_id: a.video_id.clone(),
                interval: *interval,
                class_id: *class,
            })
        })
        .collect();
    if ground_truths.is_empty() {
        return Err(Failure::Data(format!(
            "no ground-truth instances in {}",
            args.annotations.display()
        )));
    }
    let report = map_suite(&detections, &ground_truths, &thresholds);
    fs::create_dir_all(&args.out).map_err(data_err)?;
    report
        .write_files(&args.out.join("report.txt"), &args.out.join("report.kv"))
        .map_err(data_err)?;
    write_manifest(
        &args.out.join("manifest.txt"),
        "eval",
        &[
            ("detections", args.detections.display().to_string()),
            ("annotations", args.annotations.display().to_string()),
            ("thresholds", args.thresholds.clone()),
        ],
    )?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_selfcheck() -> Result<(), Failure> {
    let report = run_selfcheck();
    for outcome in &report.outcomes {
        println!(
            "{} {} ({})",
            if outcome.passed { "pass" } else { "FAIL" },
            outcome.name,
            outcome.detail
        );
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure::Numerical("self-check failed".into()))
    }
}
