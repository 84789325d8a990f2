//! Mini-batch Adam training with step-wise learning-rate decay.
//!
//! Per-example gradients inside a batch are computed independently (in
//! parallel when enabled) and summed in example order, so the trajectory is
//! bitwise reproducible for a fixed seed regardless of thread count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Example;
use crate::error::{ConfigError, ModelError, TrainError};
use crate::eval::{evaluate, MetricsReport, REPORT_CUTOFFS};
use crate::exec::ExecMode;
use crate::model::{Model, ModelParams};

pub const LEARNING_RATES: [f64; 3] = [0.001, 0.01, 0.1];
pub const LR_DECAYS: [f64; 4] = [0.01, 0.05, 0.1, 0.5];
pub const DECAY_STEPS: [usize; 3] = [2, 3, 4];
pub const LAMBDAS: [f64; 4] = [1.0, 3.0, 10.0, 30.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate every `decay_step` epochs.
    pub lr_decay: f64,
    pub decay_step: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the interest-independence term.
    pub lambda: f64,
    pub seed: u64,
    /// Stop after this many epochs without a better validation H@20.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            lr_decay: 0.5,
            decay_step: 3,
            batch_size: 64,
            epochs: 10,
            lambda: 1.0,
            seed: 7,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.learning_rate) || !positive(self.lr_decay) {
            return Err(ConfigError::new("learning rate and decay must be positive"));
        }
        if self.decay_step == 0 || self.batch_size == 0 {
            return Err(ConfigError::new("decay step and batch size must be at least 1"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(ConfigError::new("lambda must be non-negative"));
        }
        if self.patience == Some(0) {
            return Err(ConfigError::new("patience must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.decay_step) as i32)
    }
}

/// Hyperparameter values to sweep. Each axis must be drawn from the
/// published sweep set for that hyperparameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchGrid {
    pub learning_rate: Vec<f64>,
    pub lr_decay: Vec<f64>,
    pub decay_step: Vec<usize>,
    pub lambda: Vec<f64>,
}

impl Default for SearchGrid {
    fn default() -> Self {
        SearchGrid {
            learning_rate: LEARNING_RATES.to_vec(),
            lr_decay: LR_DECAYS.to_vec(),
            decay_step: DECAY_STEPS.to_vec(),
            lambda: LAMBDAS.to_vec(),
        }
    }
}

impl SearchGrid {
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn subset<T: PartialEq + std::fmt::Debug>(name: &str, vals: &[T], allowed: &[T]) -> Result<(), ConfigError> {
            if vals.is_empty() {
                return Err(ConfigError::new(format!("grid axis {name} is empty")));
            }
            match vals.iter().find(|v| !allowed.contains(v)) {
                Some(v) => Err(ConfigError::new(format!("{name} = {v:?} is outside {allowed:?}"))),
                None => Ok(()),
            }
        }
        subset("learning_rate", &self.learning_rate, &LEARNING_RATES)?;
        subset("lr_decay", &self.lr_decay, &LR_DECAYS)?;
        subset("decay_step", &self.decay_step, &DECAY_STEPS)?;
        subset("lambda", &self.lambda, &LAMBDAS)
    }

    /// Every combination, varying `lambda` fastest.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rate {
            for &lr_decay in &self.lr_decay {
                for &decay_step in &self.decay_step {
                    for &lambda in &self.lambda {
                        out.push(TrainConfig {
                            learning_rate,
                            lr_decay,
                            decay_step,
                            lambda,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

/// Adam with the usual moment defaults.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(like: &ModelParams) -> Self {
        let mut m = like.clone();
        m.scale(0.0);
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let grads = grads.named();
        let moments = self.m.slots_mut().into_iter().zip(self.v.slots_mut());
        for ((p, (m, v)), (_, g)) in params.slots_mut().into_iter().zip(moments).zip(grads) {
            let slots = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut());
            for (((p, m), v), g) in slots.zip(g.data()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example loss over the epoch, measured before each update.
    pub loss: f64,
    pub lr: f64,
    pub wall_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit_10: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg_10: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit_20: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg_20: Option<f64>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record serializes")
    }

    /// The record without wall time, for reproducibility comparisons.
    pub fn without_timing(&self) -> EpochRecord {
        EpochRecord {
            wall_secs: 0.0,
            ..self.clone()
        }
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    /// Validation report after the last epoch run, if a split was given.
    pub validation: Option<MetricsReport>,
}

/// Examples per unit of parallel gradient work.
const GRADIENT_CHUNK: usize = 8;

/// Mean loss and mean gradient over a batch, merged in example order.
pub fn batch_gradient(
    model: &Model,
    batch: &[&Example],
    lambda: f64,
    mode: ExecMode,
) -> Result<(f64, ModelParams), ModelError> {
    // Fixed chunks keep the summation order independent of the thread
    // count, and keep only a few gradient sets alive at once.
    let chunks: Vec<&[&Example]> = batch.chunks(GRADIENT_CHUNK).collect();
    let partials = mode.map(&chunks, |chunk| {
        let mut total = 0.0;
        let mut sum: Option<ModelParams> = None;
        for ex in chunk.iter() {
            let (loss, grads) = model.loss_and_grads(&ex.prefix, ex.target, lambda)?;
            total += loss;
            match &mut sum {
                Some(s) => s.add_assign(&grads),
                None => sum = Some(grads),
            }
        }
        Ok::<_, ModelError>((total, sum.expect("chunks are non-empty")))
    });
    let mut total = 0.0;
    let mut sum: Option<ModelParams> = None;
    for r in partials {
        let (loss, grads) = r?;
        total += loss;
        match &mut sum {
            Some(s) => s.add_assign(&grads),
            None => sum = Some(grads),
        }
    }
    let mut sum = sum.expect("non-empty batch");
    sum.scale(1.0 / batch.len() as f64);
    Ok((total / batch.len() as f64, sum))
}

/// Trains `model` in place. `on_epoch` sees every log record as it is
/// produced.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    validation: Option<&[Example]>,
    cfg: &TrainConfig,
    mode: ExecMode,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut report = None;
    let mut best_h20 = f64::NEG_INFINITY;
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let diverged = |reason: String, model: &Model| TrainError::Diverged {
                epoch,
                reason,
                last_good: Box::new(model.clone()),
            };
            let (loss, grads) = match batch_gradient(model, &batch, cfg.lambda, mode) {
                Ok(v) => v,
                Err(ModelError::NonFinite(what)) => return Err(diverged(format!("non-finite {what}"), model)),
                Err(e) => return Err(e.into()),
            };
            if !grads.is_finite() {
                return Err(diverged("non-finite gradient".into(), model));
            }
            let previous = model.params.clone();
            adam.step(&mut model.params, &grads, lr);
            if !model.params.is_finite() {
                model.params = previous;
                return Err(diverged("non-finite parameters".into(), model));
            }
            loss_sum += loss * batch.len() as f64;
        }

        let mut record = EpochRecord {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            lr,
            wall_secs: 0.0,
            hit_10: None,
            ndcg_10: None,
            hit_20: None,
            ndcg_20: None,
        };
        let mut stop = false;
        if let Some(val) = validation {
            let r = evaluate(&*model, val, &REPORT_CUTOFFS, mode)?;
            let (m10, m20) = (r.at(10).expect("cutoff"), r.at(20).expect("cutoff"));
            record.hit_10 = Some(m10.hit);
            record.ndcg_10 = Some(m10.ndcg);
            record.hit_20 = Some(m20.hit);
            record.ndcg_20 = Some(m20.ndcg);
            if m20.hit > best_h20 {
                best_h20 = m20.hit;
                stale = 0;
            } else {
                stale += 1;
                stop = cfg.patience.is_some_and(|p| stale >= p);
            }
            report = Some(r);
        }
        record.wall_secs = started.elapsed().as_secs_f64();
        on_epoch(&record);
        log.push(record);
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        model: model.clone(),
        log,
        validation: report,
    })
}

/// Result of one grid point.
pub struct GridResult {
    pub config: TrainConfig,
    pub report: MetricsReport,
}

/// Trains a fresh model (same init seed) for every grid point and reports
/// its metrics on `validation`.
pub fn grid_search(
    init: &Model,
    train_set: &[Example],
    validation: &[Example],
    grid: &SearchGrid,
    base: &TrainConfig,
    mode: ExecMode,
) -> Result<Vec<GridResult>, TrainError> {
    grid.validate()?;
    grid.configs(base)
        .into_iter()
        .map(|config| {
            let mut model = init.clone();
            let out = train(&mut model, train_set, Some(validation), &config, mode, |_| {})?;
            let report = out.validation.expect("validation given");
            Ok(GridResult { config, report })
        })
        .collect()
}
