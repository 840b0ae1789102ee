//! Optimization loop, evaluation, ablation profiles and run orchestration.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::GroundingSample;
use crate::error::{io_err, Error, Result};
use crate::losses::{sample_loss, LossComponents, LossOptions, LossWeights};
use crate::metrics::{evaluate, GroundingReport, RankedPredictions};
use crate::model::{forward, predict, ModelConfig, ModelState};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Matrix, Real};

/// Named hyperparameter presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-size defaults: `d = 256`, 10 queries, 200 epochs.
    Paper,
    /// Small CPU-friendly defaults: `d = 64`, 5 queries, 30 epochs.
    Desk,
}

/// Complete description of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub aux_loss: bool,
    pub event_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Paper)
    }
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut config = Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 200,
            grad_clip_norm: 0.1,
            seed: 0,
            aux_loss: true,
            event_loss: true,
        };
        if profile == Profile::Desk {
            config.model.hidden = 64;
            config.model.num_queries = 5;
            config.epochs = 30;
        }
        config
    }

    /// Input-agnostic baseline: no event reasoning, no event loss, no gated
    /// fusion.
    pub fn baseline(mut self) -> Self {
        self.model.event_reasoning = false;
        self.model.gated_fusion = false;
        self.event_loss = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.event_loss && !self.model.event_reasoning {
            return Err(Error::Config("event_loss requires event_reasoning".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let positive = [self.lr, self.beta1, self.beta2, self.adam_eps, self.grad_clip_norm];
        if positive.iter().any(|v| !v.is_finite() || *v <= 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("optimizer settings must be positive and finite".into()));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("Adam betas must be below 1".into()));
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            aux_loss: self.aux_loss,
            event_loss: self.event_loss,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub first: Vec<Matrix<f32>>,
    pub second: Vec<Matrix<f32>>,
    pub step: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols()))
                .collect()
        };
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>, config: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = config.lr;
        let decay = (1.0 - lr * config.weight_decay) as f32;
        for (id, grad) in grads.iter() {
            let Some(grad) = grad else { continue };
            let i = id.index();
            let p = params.get_mut(id);
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                let g = g as f64;
                *m = (b1 * *m as f64 + (1.0 - b1) * g) as f32;
                *v = (b2 * *v as f64 + (1.0 - b2) * g * g) as f32;
                let m_hat = *m as f64 / c1;
                let v_hat = *v as f64 / c2;
                *w = *w * decay - (lr * m_hat / (v_hat.sqrt() + config.adam_eps)) as f32;
            }
        }
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_gradients<F: Real>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().to_f64();
    if norm > max_norm {
        grads.scale(F::from_f64(max_norm / (norm + 1e-6)));
    }
    norm
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent random stream for a tuple of indices.
pub fn derive_rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let s = keys.iter().fold(mix(seed), |acc, &k| mix(acc ^ k));
    ChaCha8Rng::seed_from_u64(s)
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_SALIENCY: u64 = 3;

/// Loss, gradients and components of one sample.
#[derive(Debug, Clone)]
pub struct SampleGradient<F> {
    pub loss: f64,
    pub grads: Gradients<F>,
    pub components: LossComponents,
    pub saliency_skipped: bool,
}

/// Forward and backward pass on one sample. Dropout is active only when a
/// dropout stream is supplied.
pub fn sample_gradient<F: Real>(
    model: &ModelState<F>,
    sample: &GroundingSample,
    config: &TrainConfig,
    dropout: Option<ChaCha8Rng>,
    mut saliency_rng: ChaCha8Rng,
) -> Result<SampleGradient<F>> {
    let mut g = Graph::new(&model.params);
    if let Some(rng) = dropout {
        g = g.with_dropout(rng, model.config.dropout);
    }
    let out = forward(&mut g, model, &sample.video, &sample.sentence)?;
    let loss = sample_loss(
        &mut g,
        &out,
        sample,
        &config.loss,
        config.loss_options(),
        model.config.tsm_include_pe,
        &mut saliency_rng,
    )?;
    let grads = g.backward(loss.total);
    Ok(SampleGradient {
        loss: loss.components.total,
        grads,
        components: loss.components,
        saliency_skipped: loss.saliency_skipped,
    })
}

/// Evaluation-mode loss of one sample with a fixed saliency stream.
pub fn sample_objective<F: Real>(
    model: &ModelState<F>,
    sample: &GroundingSample,
    config: &TrainConfig,
    saliency_seed: u64,
) -> Result<SampleGradient<F>> {
    sample_gradient(model, sample, config, None, ChaCha8Rng::seed_from_u64(saliency_seed))
}

/// Ranked predictions and metrics over a sample set.
pub fn evaluate_model<F: Real>(
    model: &ModelState<F>,
    samples: &[GroundingSample],
) -> Result<(GroundingReport, Vec<RankedPredictions>)> {
    let preds = samples
        .par_iter()
        .map(|s| predict(model, &s.video, &s.sentence).map(RankedPredictions::new))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = samples.iter().map(|s| s.gt_moments.clone()).collect();
    Ok((evaluate(&preds, &gts), preds))
}

/// Metrics after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub report: GroundingReport,
    pub seconds: f64,
}

/// Batch-mean loss components after one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub components: LossComponents,
    pub grad_norm: f64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: Option<usize>,
    pub best_report: Option<GroundingReport>,
    pub final_state: Checkpoint,
    pub best_params: Option<ParamStore<f32>>,
    pub saliency_skipped: usize,
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn losses(&self) -> PathBuf {
        self.dir.join("losses.csv")
    }

    pub fn history(&self) -> PathBuf {
        self.dir.join("history.csv")
    }

    pub fn divergence(&self) -> PathBuf {
        self.dir.join("divergence.json")
    }
}

/// Per-epoch callback; returning `false` stops training.
pub type EpochHook<'a> = Box<dyn FnMut(&EpochRecord) -> bool + 'a>;

/// Optional hooks and outputs of [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub output: Option<RunPaths>,
    pub resume: Option<Checkpoint>,
    /// Called after every epoch; returning `false` stops training.
    pub on_epoch: Option<EpochHook<'a>>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    epoch: usize,
    step: usize,
    components: Option<LossComponents>,
    grad_norm: Option<f64>,
    non_finite_params: Vec<&'a str>,
    detail: &'a str,
}

struct CsvLog {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl CsvLog {
    fn open(path: PathBuf, header: &str, append: bool) -> Result<Self> {
        let exists = append && path.is_file();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(io_err(&path))?;
        let mut log = Self {
            out: BufWriter::new(file),
            path,
        };
        if !exists {
            log.line(header)?;
        }
        Ok(log)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.out, "{text}").map_err(io_err(&self.path))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

fn diverged(
    paths: Option<&RunPaths>,
    last_good: &Checkpoint,
    epoch: usize,
    step: usize,
    components: Option<LossComponents>,
    grad_norm: Option<f64>,
    detail: String,
) -> Error {
    if let Some(paths) = paths {
        let bad: Vec<&str> = last_good
            .params
            .iter()
            .filter(|(_, _, m)| !m.data().iter().all(|v| v.is_finite()))
            .map(|(_, n, _)| n)
            .collect();
        let dump = DivergenceDump {
            epoch,
            step,
            components,
            grad_norm,
            non_finite_params: bad,
            detail: &detail,
        };
        if let Err(e) = save_checkpoint(paths.last(), last_good) {
            log::error!("could not save last-good checkpoint: {e}");
        }
        let text = serde_json::to_string_pretty(&dump).expect("dump serializes");
        if let Err(e) = fs::write(paths.divergence(), text) {
            log::error!("could not write divergence dump: {e}");
        }
    }
    Error::Divergence { epoch, step, detail }
}

/// Trains on `train_set`, evaluating on `val_set` after every epoch.
pub fn train(
    config: &TrainConfig,
    train_set: &[GroundingSample],
    val_set: &[GroundingSample],
    mut options: TrainOptions<'_>,
) -> Result<TrainSummary> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let (mut model, mut optimizer, start_epoch, mut step, mut best_map) = match options.resume.take() {
        Some(ckpt) => {
            let model = ModelState::with_params(config.model.clone(), ckpt.params)?;
            let optimizer = ckpt.optimizer.unwrap_or_else(|| AdamW::new(&model.params));
            (model, optimizer, ckpt.epoch, ckpt.step, ckpt.best_map)
        }
        None => {
            let model = ModelState::<f32>::new(config.model.clone(), config.seed)?;
            let optimizer = AdamW::new(&model.params);
            (model, optimizer, 0, 0, f64::NEG_INFINITY)
        }
    };
    let resumed = start_epoch > 0 || step > 0;
    let paths = options.output.clone();
    let (mut loss_log, mut history_log) = match &paths {
        Some(p) => {
            fs::create_dir_all(&p.dir).map_err(io_err(&p.dir))?;
            (
                Some(CsvLog::open(p.losses(), "step,L_moment,L_sal,L_event,total", resumed)?),
                Some(CsvLog::open(
                    p.history(),
                    "epoch,train_loss,R1@0.5,R1@0.7,mAP@0.5,mAP@0.75,mAP_avg,seconds",
                    resumed,
                )?),
            )
        }
        None => (None, None),
    };

    let snapshot = |model: &ModelState<f32>, opt: &AdamW, epoch, step, best_map| Checkpoint {
        config: config.clone(),
        params: model.params.clone(),
        optimizer: Some(opt.clone()),
        epoch,
        step,
        best_map,
    };

    let mut history = Vec::new();
    let mut steps = Vec::new();
    let mut best_epoch = None;
    let mut best_report = None;
    let mut best_params = None;
    let mut skipped = 0;
    let mut stop = false;

    for epoch in start_epoch..config.epochs {
        if stop {
            break;
        }
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut derive_rng(config.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;

        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<SampleGradient<f32>>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let keys = [step as u64, k as u64];
                    let dropout = derive_rng(config.seed, &[STREAM_DROPOUT, keys[0], keys[1]]);
                    let saliency = derive_rng(config.seed, &[STREAM_SALIENCY, keys[0], keys[1]]);
                    sample_gradient(&model, &train_set[idx], config, Some(dropout), saliency)
                })
                .collect();
            let mut grads = Gradients::empty(model.params.len());
            let mut sum = LossComponents::default();
            for r in results {
                let r = r?;
                grads.accumulate(&r.grads);
                sum.moment += r.components.moment;
                sum.saliency += r.components.saliency;
                sum.event += r.components.event;
                sum.total += r.components.total;
                skipped += usize::from(r.saliency_skipped);
            }
            let n = batch.len() as f64;
            let mean = LossComponents {
                moment: sum.moment / n,
                saliency: sum.saliency / n,
                event: sum.event / n,
                total: sum.total / n,
            };
            grads.scale(1.0 / n as f32);
            let grad_norm = grads.global_norm() as f64;
            if !mean.is_finite() || !grad_norm.is_finite() {
                let last_good = snapshot(&model, &optimizer, epoch, step, best_map);
                return Err(diverged(
                    paths.as_ref(),
                    &last_good,
                    epoch,
                    step,
                    Some(mean),
                    Some(grad_norm),
                    format!("non-finite loss or gradient (loss {:?})", mean),
                ));
            }
            clip_gradients(&mut grads, config.grad_clip_norm);
            let before = optimizer.clone();
            let previous = model.params.clone();
            optimizer.update(&mut model.params, &grads, config);
            if !model.params.all_finite() {
                let mut last_good = snapshot(&model, &before, epoch, step, best_map);
                last_good.params = previous;
                return Err(diverged(
                    paths.as_ref(),
                    &last_good,
                    epoch,
                    step,
                    Some(mean),
                    Some(grad_norm),
                    "parameters became non-finite".into(),
                ));
            }
            step += 1;
            epoch_loss += mean.total * n;
            epoch_count += batch.len();
            if let Some(log) = loss_log.as_mut() {
                log.line(&format!(
                    "{step},{:.6},{:.6},{:.6},{:.6}",
                    mean.moment, mean.saliency, mean.event, mean.total
                ))?;
            }
            steps.push(StepRecord {
                step,
                components: mean,
                grad_norm,
            });
            if options.max_steps.is_some_and(|m| step >= m) {
                stop = true;
                break;
            }
        }

        let (report, _) = evaluate_model(&model, val_set)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_loss / epoch_count.max(1) as f64,
            report,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.4} R1@0.5 {:.3} R1@0.7 {:.3} mAP {:.3} ({:.1}s)",
            record.epoch,
            record.train_loss,
            report.r1_05,
            report.r1_07,
            report.map_avg,
            record.seconds
        );
        if let Some(log) = history_log.as_mut() {
            log.line(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
                record.epoch,
                record.train_loss,
                report.r1_05,
                report.r1_07,
                report.map_05,
                report.map_075,
                report.map_avg,
                record.seconds
            ))?;
            log.flush()?;
        }
        if let Some(log) = loss_log.as_mut() {
            log.flush()?;
        }
        if report.map_avg > best_map {
            best_map = report.map_avg;
            best_epoch = Some(record.epoch);
            best_report = Some(report);
            best_params = Some(model.params.clone());
            if let Some(p) = &paths {
                save_checkpoint(p.best(), &snapshot(&model, &optimizer, epoch + 1, step, best_map))?;
            }
        }
        if let Some(p) = &paths {
            save_checkpoint(p.last(), &snapshot(&model, &optimizer, epoch + 1, step, best_map))?;
        }
        history.push(record);
        if let Some(cb) = options.on_epoch.as_mut() {
            if !cb(&record) {
                stop = true;
            }
        }
    }

    let epoch = history.last().map_or(start_epoch, |r| r.epoch);
    Ok(TrainSummary {
        history,
        steps,
        best_epoch,
        best_report,
        final_state: snapshot(&model, &optimizer, epoch, step, best_map),
        best_params,
        saliency_skipped: skipped,
    })
}

/// Writes `value` as pretty JSON through a temporary file and a rename.
pub fn write_json_atomic(path: &Path, value: &impl Serialize) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let text = serde_json::to_string_pretty(value)?;
    fs::write(&tmp, text + "\n").map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}
