//! `eatr`: generate synthetic data, train, evaluate, predict and extract
//! pseudo events.

mod config;
mod manifest;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use eatr_core::checkpoint::load_checkpoint_for;
use eatr_core::data::{annotation_path, load_all, read_feature_matrix, synthesize, write_dataset, Record};
use eatr_core::metrics::{write_report, write_top1_csv};
use eatr_core::model::{attention_dump, predict};
use eatr_core::pseudo_events::pseudo_events;
use eatr_core::training::{evaluate_model, train, RunPaths, TrainOptions};
use eatr_core::{
    load_checkpoint, Checkpoint, Error, GroundingSample, Matrix, ModelState, Profile, SyntheticConfig, TrainConfig,
};
use serde_json::{json, Value};

use manifest::{sidecar, InputHash, ManifestBuilder};

/// Errors raised by the command layer itself.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "eatr", version, about = "Event-aware video moment localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with planted events.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints and logs.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Predict ranked moments for a sample or a dataset.
    Predict(PredictArgs),
    /// Extract unsupervised pseudo events from video features.
    PseudoEvents(PseudoEventsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory; validation data goes to `<out>/val`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    num_samples: usize,
    /// Validation samples; defaults to a tenth of the training samples.
    #[arg(long)]
    val_samples: Option<usize>,
    /// Falls back to `EATR_SEED`, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 50)]
    video_len: usize,
    #[arg(long, default_value_t = 6)]
    sentence_len: usize,
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    /// Inclusive range of planted events per video, as `MIN,MAX`.
    #[arg(long, default_value = "2,5", value_parser = parse_range)]
    num_events: (usize, usize),
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset: a directory or an annotation file.
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset; defaults to `<data>/val`.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Run directory for checkpoints, logs and the manifest.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "paper")]
    profile: ProfileArg,
    /// Flat JSON object of config overrides; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Default)]
struct Overrides {
    /// Falls back to the config file, then `EATR_SEED`, then the profile.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    num_queries: Option<usize>,
    #[arg(long)]
    slot_iterations: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lambda_sal: Option<f64>,
    #[arg(long)]
    lambda_event: Option<f64>,
    /// Input-agnostic queries, no gated fusion and no event loss.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    no_event_reasoning: bool,
    #[arg(long)]
    no_gated_fusion: bool,
    #[arg(long)]
    no_event_loss: bool,
    #[arg(long)]
    no_aux_loss: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report JSON path; the report is always printed to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-sample top-1 IoU CSV.
    #[arg(long)]
    iou_csv: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A single JSON record; feature paths resolve against its directory.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    sample: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Moments kept per sample.
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// JSON Lines output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON Lines of per-layer cross-attention maps and fusion gates.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
}

#[derive(Args)]
struct PseudoEventsArgs {
    /// Dataset whose video features are segmented.
    #[arg(long, conflicts_with = "features", required_unless_present = "features")]
    data: Option<PathBuf>,
    /// A single video feature file; the file stem becomes the video id.
    #[arg(long)]
    features: Option<PathBuf>,
    /// JSON Lines output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_range(text: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = text.split_once(',').ok_or("expected MIN,MAX")?;
    let lo = lo.trim().parse::<usize>().map_err(|e| format!("MIN: {e}"))?;
    let hi = hi.trim().parse::<usize>().map_err(|e| format!("MAX: {e}"))?;
    Ok((lo, hi))
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("EATR_SEED") {
        Ok(text) => text
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("EATR_SEED `{text}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(*a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::PseudoEvents(a) => pseudo_events_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => EXIT_CONFIG,
                CliError::Missing(_) => EXIT_MISSING,
            };
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_)
                | Error::Schema { .. }
                | Error::Validation { .. }
                | Error::InvalidSpan { .. }
                | Error::BadMagic { .. }
                | Error::Length { .. }
                | Error::Checkpoint { .. }
                | Error::IncompatibleVersion { .. }
                | Error::DegenerateFeature { .. }
                | Error::SequenceTooShort { .. } => EXIT_CONFIG,
                Error::MissingFeature { .. } => EXIT_MISSING,
                Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
                Error::Divergence { .. } => EXIT_DIVERGENCE,
                _ => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn load_samples(path: &Path) -> anyhow::Result<Vec<GroundingSample>> {
    require(&annotation_path(path))?;
    let samples = load_all(path).with_context(|| format!("loading {}", path.display()))?;
    if samples.is_empty() {
        return Err(CliError::Config(format!("{}: dataset is empty", path.display())).into());
    }
    Ok(samples)
}

fn load_model(path: &Path) -> anyhow::Result<(Checkpoint, ModelState<f32>)> {
    require(path)?;
    let ckpt = load_checkpoint(path)?;
    let model = ModelState::with_params(ckpt.config.model.clone(), ckpt.params.clone())?;
    Ok((ckpt, model))
}

/// Fails unless every sample matches the model's input dimensions.
fn check_dims(samples: &[GroundingSample], config: &TrainConfig) -> Result<(), CliError> {
    let (v, s) = (config.model.video_dim, config.model.sentence_dim);
    match samples.iter().find(|x| x.video.dim() != v || x.sentence.dim() != s) {
        Some(x) => Err(CliError::Config(format!(
            "sample `{}` has feature dims ({}, {}); the model expects ({v}, {s})",
            x.vid,
            x.video.dim(),
            x.sentence.dim()
        ))),
        None => Ok(()),
    }
}

fn output_writer(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let manifest = ManifestBuilder::start("gen-data");
    let seed = args.seed.or(env_seed()?).unwrap_or(0);
    let train_config = SyntheticConfig {
        num_samples: args.num_samples,
        video_len: args.video_len,
        sentence_len: args.sentence_len,
        feature_dim: args.feature_dim,
        num_events: args.num_events,
        noise_sigma: args.noise_sigma,
        seed,
        start_index: 0,
    };
    if args.num_samples == 0 {
        return Err(CliError::Config("--num-samples must be positive".into()).into());
    }
    let (lo, hi) = args.num_events;
    if lo < 2 || hi < lo || hi > args.video_len / 4 {
        return Err(CliError::Config(format!(
            "--num-events {lo},{hi} must satisfy 2 <= MIN <= MAX <= video_len/4 = {}",
            args.video_len / 4
        ))
        .into());
    }
    train_config.validate()?;
    let val_samples = args.val_samples.unwrap_or(args.num_samples.div_ceil(10));
    let val_config = SyntheticConfig {
        num_samples: val_samples,
        start_index: args.num_samples as u64,
        ..train_config.clone()
    };
    let train_set = synthesize(&train_config)?;
    let mut outputs = write_dataset(&args.out, &train_set)?.feature_files;
    outputs.insert(0, annotation_path(&args.out));
    if val_samples > 0 {
        let val_dir = args.out.join("val");
        let val_set = synthesize(&val_config)?;
        let written = write_dataset(&val_dir, &val_set)?;
        outputs.push(written.annotations);
        outputs.extend(written.feature_files);
    }
    let config = json!({ "train": config_value(&train_config), "val": config_value(&val_config) });
    let mut hash = InputHash::default();
    hash.value(&config);
    manifest.write(&args.out.join("manifest.json"), Some(seed), config, hash, &outputs)?;
    println!(
        "wrote {} training and {val_samples} validation samples to {}",
        args.num_samples,
        args.out.display()
    );
    Ok(())
}

fn config_value(c: &SyntheticConfig) -> Value {
    json!({
        "num_samples": c.num_samples,
        "video_len": c.video_len,
        "sentence_len": c.sentence_len,
        "feature_dim": c.feature_dim,
        "num_events": [c.num_events.0, c.num_events.1],
        "noise_sigma": c.noise_sigma,
        "seed": c.seed,
        "start_index": c.start_index,
    })
}

fn apply_overrides(
    mut config: TrainConfig,
    file: &serde_json::Map<String, Value>,
    o: &Overrides,
) -> Result<TrainConfig, CliError> {
    if o.baseline {
        config = config.baseline();
    }
    macro_rules! set {
        ($flag:ident => $($field:ident).+) => {
            if let Some(v) = o.$flag {
                config.$($field).+ = v;
            }
        };
    }
    set!(epochs => epochs);
    set!(batch_size => batch_size);
    set!(lr => lr);
    set!(weight_decay => weight_decay);
    set!(hidden => model.hidden);
    set!(heads => model.heads);
    set!(layers => model.layers);
    set!(num_queries => model.num_queries);
    set!(slot_iterations => model.slot_iterations);
    set!(dropout => model.dropout);
    set!(lambda_sal => loss.lambda_sal);
    set!(lambda_event => loss.lambda_event);
    if o.no_event_reasoning {
        config.model.event_reasoning = false;
        config.event_loss = false;
    }
    if o.no_gated_fusion {
        config.model.gated_fusion = false;
    }
    if o.no_event_loss {
        config.event_loss = false;
    }
    if o.no_aux_loss {
        config.aux_loss = false;
    }
    config.seed = match (o.seed, file.contains_key("seed"), env_seed()?) {
        (Some(s), _, _) => s,
        (None, true, _) => config.seed,
        (None, false, Some(s)) => s,
        (None, false, None) => config.seed,
    };
    Ok(config)
}

fn train_cmd(args: TrainArgs) -> anyhow::Result<()> {
    let manifest = ManifestBuilder::start("train");
    let (base, file) = config::resolve(args.profile.into(), args.config.as_deref())?;
    let mut config = apply_overrides(base, &file, &args.overrides)?;

    let train_set = load_samples(&args.data)?;
    let val_path = args.val.clone().unwrap_or_else(|| args.data.join("val"));
    let val_set = if args.val.is_none() && !annotation_path(&val_path).is_file() {
        log::warn!(
            "no validation split at {}; validating on the training data",
            val_path.display()
        );
        train_set.clone()
    } else {
        load_samples(&val_path)?
    };
    let first = &train_set[0];
    let (v_dim, s_dim) = (first.video.dim(), first.sentence.dim());
    for (key, dim) in [("video_dim", v_dim), ("sentence_dim", s_dim)] {
        if let Some(given) = file.get(key).and_then(Value::as_u64) {
            if given as usize != dim {
                return Err(CliError::Config(format!("{key} = {given} but the data has {dim}")).into());
            }
        }
    }
    config.model.video_dim = v_dim;
    config.model.sentence_dim = s_dim;
    check_dims(&train_set, &config)?;
    check_dims(&val_set, &config)?;
    config.validate()?;

    let resume = match &args.resume {
        Some(path) => {
            require(path)?;
            Some(load_checkpoint_for(path, &config)?)
        }
        None => None,
    };
    let paths = RunPaths::new(&args.out);
    let options = TrainOptions {
        output: Some(paths.clone()),
        resume,
        max_steps: args.max_steps,
        on_epoch: Some(Box::new(|r| {
            log::info!(
                "epoch {} loss {:.4} R1@0.5 {:.3} R1@0.7 {:.3} mAP {:.3} ({:.1}s)",
                r.epoch,
                r.train_loss,
                r.report.r1_05,
                r.report.r1_07,
                r.report.map_avg,
                r.seconds
            );
            true
        })),
    };
    let summary = train(&config, &train_set, &val_set, options)?;

    let config_path = args.out.join("config.json");
    let config_json = serde_json::to_value(&config)?;
    eatr_core::training::write_json_atomic(&config_path, &config_json)?;
    let mut hash = InputHash::default();
    hash.dataset(&annotation_path(&args.data), &train_set)?;
    if args.val.is_some() || annotation_path(&val_path).is_file() {
        hash.dataset(&annotation_path(&val_path), &val_set)?;
    }
    if let Some(path) = &args.resume {
        hash.file(path)?;
    }
    let outputs = [paths.best(), paths.last(), paths.losses(), paths.history(), config_path];
    manifest.write(
        &args.out.join("manifest.json"),
        Some(config.seed),
        config_json,
        hash,
        &outputs,
    )?;
    let result = json!({
        "best_epoch": summary.best_epoch,
        "best": summary.best_report,
        "steps": summary.final_state.step,
    });
    println!("{result}");
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> anyhow::Result<()> {
    let manifest = ManifestBuilder::start("eval");
    let (ckpt, model) = load_model(&args.ckpt)?;
    let samples = load_samples(&args.data)?;
    check_dims(&samples, &ckpt.config)?;
    let (report, preds) = evaluate_model(&model, &samples)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    let mut outputs = Vec::new();
    if let Some(path) = &args.out {
        write_report(path, &report)?;
        outputs.push(path.clone());
    }
    if let Some(path) = &args.iou_csv {
        let ids: Vec<_> = samples.iter().map(|s| (s.vid.clone(), s.qid)).collect();
        let gts: Vec<_> = samples.iter().map(|s| s.gt_moments.clone()).collect();
        write_top1_csv(path, &ids, &preds, &gts)?;
        outputs.push(path.clone());
    }
    if let Some(first) = outputs.first() {
        let mut hash = InputHash::default();
        hash.file(&args.ckpt)?;
        hash.dataset(&annotation_path(&args.data), &samples)?;
        let config = serde_json::to_value(&ckpt.config)?;
        manifest.write(&sidecar(first), Some(ckpt.config.seed), config, hash, &outputs)?;
    }
    Ok(())
}

fn read_single_sample(path: &Path) -> anyhow::Result<GroundingSample> {
    require(path)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let record = Record::parse(&text, path, 1)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(record.into_sample(base)?)
}

fn predict_cmd(args: PredictArgs) -> anyhow::Result<()> {
    let manifest = ManifestBuilder::start("predict");
    let (ckpt, model) = load_model(&args.ckpt)?;
    let (samples, input) = match (&args.sample, &args.data) {
        (Some(path), _) => (vec![read_single_sample(path)?], path.clone()),
        (None, Some(path)) => (load_samples(path)?, annotation_path(path)),
        (None, None) => unreachable!("clap requires --sample or --data"),
    };
    check_dims(&samples, &ckpt.config)?;
    let mut out = output_writer(args.out.as_deref())?;
    let mut dump = args
        .dump_attention
        .as_deref()
        .map(|p| output_writer(Some(p)))
        .transpose()?;
    for s in &samples {
        let preds = predict(&model, &s.video, &s.sentence)?;
        let windows: Vec<[f64; 3]> = preds
            .iter()
            .take(args.top_k)
            .map(|(span, score)| {
                let (a, b) = span.interval();
                [a * s.duration, b * s.duration, *score]
            })
            .collect();
        let line = json!({ "qid": s.qid, "vid": s.vid, "pred_relevant_windows": windows });
        writeln!(out, "{line}")?;
        if let Some(w) = dump.as_mut() {
            let att = attention_dump(&model, &s.video, &s.sentence)?;
            let line =
                json!({ "qid": s.qid, "vid": s.vid, "cross_attention": att.cross_attention, "gates": att.gates });
            writeln!(w, "{line}")?;
        }
    }
    out.flush()?;
    if let Some(w) = dump.as_mut() {
        w.flush()?;
    }
    if let Some(first) = &args.out {
        let mut hash = InputHash::default();
        hash.file(&args.ckpt)?;
        hash.dataset(&input, &samples)?;
        let outputs: Vec<_> = std::iter::once(first.clone())
            .chain(args.dump_attention.clone())
            .collect();
        let config = serde_json::to_value(&ckpt.config)?;
        manifest.write(&sidecar(first), Some(ckpt.config.seed), config, hash, &outputs)?;
    }
    Ok(())
}

fn pseudo_events_cmd(args: PseudoEventsArgs) -> anyhow::Result<()> {
    let manifest = ManifestBuilder::start("pseudo-events");
    let mut hash = InputHash::default();
    let videos: Vec<(String, Matrix<f32>)> = match (&args.features, &args.data) {
        (Some(path), _) => {
            require(path)?;
            let vid = path.file_stem().unwrap_or_default().to_string_lossy();
            let vid = vid.strip_suffix(".video").unwrap_or(&vid).to_string();
            hash.file(path)?;
            vec![(vid, read_feature_matrix(path)?)]
        }
        (None, Some(path)) => {
            let samples = load_samples(path)?;
            hash.dataset(&annotation_path(path), &samples)?;
            samples.into_iter().map(|s| (s.vid, s.video.valid_tokens())).collect()
        }
        (None, None) => unreachable!("clap requires --features or --data"),
    };
    let mut out = output_writer(args.out.as_deref())?;
    for (vid, video) in &videos {
        let events = pseudo_events(video).with_context(|| format!("video `{vid}`"))?;
        let intervals: Vec<[f64; 2]> = events
            .iter()
            .map(|e| {
                let (a, b) = e.interval();
                [a, b]
            })
            .collect();
        writeln!(out, "{}", json!({ "vid": vid, "events": intervals }))?;
    }
    out.flush()?;
    if let Some(path) = &args.out {
        manifest.write(&sidecar(path), None, Value::Null, hash, std::slice::from_ref(path))?;
    }
    Ok(())
}
