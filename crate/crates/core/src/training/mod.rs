//! Loss, optimiser, early stopping and the minibatch training loop.

mod adam;
mod early_stop;

use std::ops::ControlFlow;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{partition_count, shuffle, unique_subjects, Sample, SurvivalClass};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::vit_model::{
    bind_params, forward, infer_logits, volumes_to_input, ModelConfig, ModelError, ModelParams,
};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use early_stop::{EarlyStopping, StopDecision};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("gradient for `{tensor}` contains non-finite values")]
    NonFiniteGradient { tensor: String },
    #[error("gradient table does not match the parameters: {0}")]
    GradientShape(String),
    /// Training produced a non-finite value. `last_good` holds the best
    /// parameters seen so far (the initial ones if no epoch finished).
    #[error("training diverged in epoch {epoch}: {reason}")]
    Divergence {
        epoch: usize,
        reason: String,
        last_good: Box<ModelParams<f32>>,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    /// Fraction of training subjects held out to monitor early stopping.
    pub val_fraction: f64,
    pub seed: u64,
    /// Run on a single thread.
    pub deterministic: bool,
    pub ignore_index: i64,
    pub adam: AdamConfig,
    /// Samples per forward/backward pass inside a batch. Gradients are summed
    /// across micro-batches before each optimiser step, so this only bounds
    /// memory.
    pub micro_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 100,
            early_stop_patience: 10,
            early_stop_min_delta: 1e-4,
            val_fraction: 0.1,
            seed: 0,
            deterministic: false,
            ignore_index: -100,
            adam: AdamConfig::default(),
            micro_batch: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return err(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return err("batch size and micro-batch size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return err("max_epochs must be at least 1".into());
        }
        if self.early_stop_patience == 0 {
            return err("patience must be at least 1".into());
        }
        if !(self.early_stop_min_delta >= 0.0) {
            return err("early_stop_min_delta must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return err(format!(
                "val_fraction {} must lie in [0, 1)",
                self.val_fraction
            ));
        }
        if (0..3).contains(&self.ignore_index) {
            return err(format!(
                "ignore_index {} collides with a class code",
                self.ignore_index
            ));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
    Observer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    /// Epoch at which early stopping fired, if it did.
    pub early_stop_epoch: Option<usize>,
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("record serializes") + "\n")
            .collect()
    }

    /// Equality ignoring wall-clock times.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        let strip = |l: &TrainLog| {
            let mut l = l.clone();
            l.epochs.iter_mut().for_each(|e| e.elapsed_ms = 0);
            l
        };
        strip(self) == strip(other)
    }
}

pub struct TrainOutcome {
    /// Parameters from the best monitored epoch.
    pub best: ModelParams<f32>,
    /// Parameters after the final epoch.
    pub last: ModelParams<f32>,
    pub log: TrainLog,
}

/// Mean cross-entropy of `logits` `[n, classes]`; rows labelled `ignore_index` are skipped.
pub fn cross_entropy(
    logits: &Tensor<f64>,
    targets: &[i64],
    ignore_index: i64,
) -> Result<f64, TensorError> {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, targets, ignore_index)?;
    Ok(tape.value(loss).data()[0])
}

/// Class-code targets for a set of samples.
pub fn targets(samples: &[&Sample]) -> Vec<i64> {
    samples.iter().map(|s| s.label.code() as i64).collect()
}

struct BatchStats {
    loss_sum: f64,
    counted: usize,
    correct: usize,
}

/// Forward and backward over one batch, summing gradients across micro-batches.
fn batch_gradients(
    model_cfg: &ModelConfig,
    params: &ModelParams<f32>,
    batch: &[&Sample],
    cfg: &TrainConfig,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(ModelParams<f32>, BatchStats), ModelError> {
    let all_targets = targets(batch);
    let counted = all_targets
        .iter()
        .filter(|&&t| t != cfg.ignore_index)
        .count();
    let mut grads = ModelParams::<f32>::zeros(model_cfg);
    let mut stats = BatchStats {
        loss_sum: 0.0,
        counted,
        correct: 0,
    };
    for (chunk, chunk_targets) in batch
        .chunks(cfg.micro_batch)
        .zip(all_targets.chunks(cfg.micro_batch))
    {
        let chunk_counted = chunk_targets
            .iter()
            .filter(|&&t| t != cfg.ignore_index)
            .count();
        if chunk_counted == 0 {
            continue;
        }
        let mut tape = Tape::<f32>::new();
        let bound = bind_params(&mut tape, params, true);
        let vols: Vec<_> = chunk.iter().map(|s| &s.volume).collect();
        let ages: Vec<f32> = chunk.iter().map(|s| s.age).collect();
        let input = volumes_to_input(&vols, model_cfg)?;
        let rng = (model_cfg.dropout > 0.0).then_some(&mut *dropout_rng);
        let trace = forward(&mut tape, model_cfg, &bound, &input, &ages, rng)?;
        let loss = tape.cross_entropy(trace.logits, chunk_targets, cfg.ignore_index)?;
        let mean = tape.value(loss).data()[0] as f64;
        stats.loss_sum += mean * chunk_counted as f64;
        for (row, &t) in tape
            .value(trace.logits)
            .data()
            .chunks(model_cfg.num_classes)
            .zip(chunk_targets)
        {
            if t != cfg.ignore_index && argmax_lowest(row) == t as usize {
                stats.correct += 1;
            }
        }
        // Weight so the summed gradient is that of the mean over the whole batch.
        let weighted = tape.scale(loss, chunk_counted as f32 / counted as f32)?;
        tape.backward(weighted)?;
        for ((_, g), (_, var)) in grads.iter_mut().zip(bound.iter()) {
            if let Some(d) = tape.grad(var) {
                for (a, b) in g.data_mut().iter_mut().zip(d.data()) {
                    *a += *b;
                }
            }
        }
    }
    Ok((grads, stats))
}

/// Mean loss over `samples` without updating anything.
pub fn evaluate_loss(
    model_cfg: &ModelConfig,
    params: &ModelParams<f32>,
    samples: &[&Sample],
    ignore_index: i64,
) -> Result<f64> {
    let vols: Vec<_> = samples.iter().map(|s| &s.volume).collect();
    let ages: Vec<f32> = samples.iter().map(|s| s.age).collect();
    let logits = infer_logits(params, model_cfg, &vols, &ages)?.cast::<f64>();
    cross_entropy(&logits, &targets(samples), ignore_index).map_err(|e| TrainError::Model(e.into()))
}

/// Splits training samples into (fit, validation) by subject.
fn carve_validation<'a>(
    samples: &'a [Sample],
    cfg: &TrainConfig,
) -> (Vec<&'a Sample>, Vec<&'a Sample>, Vec<String>) {
    let subjects = unique_subjects(samples);
    if cfg.val_fraction == 0.0 || subjects.len() < 2 {
        return (samples.iter().collect(), Vec::new(), Vec::new());
    }
    let mut order = subjects;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    shuffle(&mut order, &mut rng);
    let n_val = ((cfg.val_fraction * order.len() as f64).floor() as usize).max(1);
    let n_val = order.len() - partition_count(order.len(), 1.0 - n_val as f64 / order.len() as f64);
    let val: Vec<String> = order[..n_val].to_vec();
    let (v, f): (Vec<&Sample>, Vec<&Sample>) =
        samples.iter().partition(|s| val.contains(&s.subject_id));
    (f, v, val)
}

/// Trains `params` on `samples` with Adam and early stopping.
///
/// `observer` sees every finished epoch and may end training early by
/// returning `ControlFlow::Break`.
pub fn train<F>(
    model_cfg: &ModelConfig,
    params: ModelParams<f32>,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord) -> ControlFlow<()> + Send,
{
    cfg.validate()?;
    model_cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Config("the training set is empty".into()));
    }
    if let Some(s) = samples
        .iter()
        .find(|s| s.volume.dims() != model_cfg.input_dims)
    {
        return Err(TrainError::Config(format!(
            "sample {} {} is {}, the model expects {}",
            s.subject_id,
            s.sequence,
            s.volume.dims(),
            model_cfg.input_dims
        )));
    }
    if cfg.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        pool.install(|| train_loop(model_cfg, params, samples, cfg, &mut observer))
    } else {
        train_loop(model_cfg, params, samples, cfg, &mut observer)
    }
}

fn train_loop<F>(
    model_cfg: &ModelConfig,
    mut params: ModelParams<f32>,
    samples: &[Sample],
    cfg: &TrainConfig,
    observer: &mut F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord) -> ControlFlow<()>,
{
    let (fit, val, val_subjects) = carve_validation(samples, cfg);
    let mut train_subjects: Vec<String> = Vec::new();
    for s in &fit {
        if !train_subjects.contains(&s.subject_id) {
            train_subjects.push(s.subject_id.clone());
        }
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(2);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(3);

    let mut adam = AdamState::new(&params, cfg.adam.clone());
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience, cfg.early_stop_min_delta);
    let mut best = params.clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut early_stop_epoch = None;
    let start = Instant::now();
    let mut order: Vec<usize> = (0..fit.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let diverged = |reason: String, last_good: &ModelParams<f32>| TrainError::Divergence {
            epoch,
            reason,
            last_good: Box::new(last_good.clone()),
        };
        shuffle(&mut order, &mut shuffle_rng);
        let (mut loss_sum, mut counted, mut correct) = (0.0, 0usize, 0usize);
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = batch_idx.iter().map(|&i| fit[i]).collect();
            let (grads, stats) =
                match batch_gradients(model_cfg, &params, &batch, cfg, &mut dropout_rng) {
                    Ok(r) => r,
                    Err(ModelError::Tensor(TensorError::NonFinite { op })) => {
                        return Err(diverged(format!("non-finite value in {op}"), &best))
                    }
                    Err(e) => return Err(e.into()),
                };
            if stats.counted == 0 {
                continue;
            }
            loss_sum += stats.loss_sum;
            counted += stats.counted;
            correct += stats.correct;
            match adam_step(&mut params, &grads, &mut adam, cfg.learning_rate) {
                Ok(()) => {}
                Err(TrainError::NonFiniteGradient { tensor }) => {
                    return Err(diverged(
                        format!("non-finite gradient for `{tensor}`"),
                        &best,
                    ))
                }
                Err(e) => return Err(e),
            }
        }
        if counted == 0 {
            return Err(TrainError::Config(
                "every training label equals ignore_index".into(),
            ));
        }
        let train_loss = loss_sum / counted as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            match evaluate_loss(model_cfg, &params, &val, cfg.ignore_index) {
                Ok(l) => Some(l),
                Err(TrainError::Model(ModelError::Tensor(TensorError::NonFinite { op }))) => {
                    return Err(diverged(
                        format!("non-finite value in {op} during validation"),
                        &best,
                    ))
                }
                Err(e) => return Err(e),
            }
        };
        let monitored = val_loss.unwrap_or(train_loss);
        if !monitored.is_finite() {
            return Err(diverged(format!("monitored loss is {monitored}"), &best));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            train_acc: correct as f64 / counted as f64,
            val_loss,
            elapsed_ms: start.elapsed().as_millis() as u64,
        };
        let decision = stopper.observe(epoch, monitored);
        if decision == StopDecision::Improved {
            best = params.clone();
        }
        epochs.push(record.clone());
        if decision == StopDecision::Stop {
            stop_reason = StopReason::EarlyStopping;
            early_stop_epoch = Some(epoch);
            break;
        }
        if observer(&record).is_break() {
            stop_reason = StopReason::Observer;
            break;
        }
    }
    let log = TrainLog {
        epochs,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        stop_reason,
        early_stop_epoch,
        train_subjects,
        val_subjects,
    };
    Ok(TrainOutcome {
        best,
        last: params,
        log,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax computed in f64 so the probabilities sum to one within f32 rounding.
pub fn softmax_probs(logits: &[f32]) -> Vec<f32> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let exps: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / total) as f32).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: SurvivalClass,
    pub probabilities: Vec<f32>,
}

impl Prediction {
    pub fn from_logits(logits: &[f32]) -> Self {
        let probabilities = softmax_probs(logits);
        let class =
            SurvivalClass::from_code(argmax_lowest(&probabilities)).expect("three-class head");
        Self {
            class,
            probabilities,
        }
    }
}

/// Class and probabilities for each sample.
pub fn predict(
    params: &ModelParams<f32>,
    model_cfg: &ModelConfig,
    samples: &[&Sample],
) -> Result<Vec<Prediction>> {
    let vols: Vec<_> = samples.iter().map(|s| &s.volume).collect();
    let ages: Vec<f32> = samples.iter().map(|s| s.age).collect();
    let logits = infer_logits(params, model_cfg, &vols, &ages)?;
    Ok(logits
        .data()
        .chunks(model_cfg.num_classes)
        .map(Prediction::from_logits)
        .collect())
}
