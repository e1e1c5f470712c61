//! Training loop: schedules, warm-up, temperature annealing, evaluation and metrics.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::RoutingHistogram;
use crate::cost::count_macs;
use crate::data::{batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::optim::SgdMomentum;
use crate::routing::entropy;
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};
use crate::trellis::{EvalRouting, RoutingMode, Trellis, TrellisConfig};

pub(crate) const DATA_STREAM: u64 = 2;
pub(crate) const ROUTE_STREAM: u64 = 3;
const EVAL_BATCH: usize = 500;
/// Offset between the training seed and the seed of random-routing evaluation.
const EVAL_SEED_OFFSET: u64 = 0x5eed_e7a1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Routers trained with information gain, sampled routes.
    #[default]
    Ig,
    /// Uniformly random routes throughout (control).
    Random,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ig" => Ok(TrainMode::Ig),
            "random" => Ok(TrainMode::Random),
            other => Err(Error::Config(format!("mode: unknown value {other:?} (expected ig or random)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_balance() -> f64 {
    2.0
}
fn default_tau_initial() -> f64 {
    25.0
}
fn default_tau_min() -> f64 {
    1.0
}
fn default_tau_decay() -> f64 {
    0.9999
}
fn default_one() -> usize {
    1
}
fn default_lambda_ig() -> f64 {
    1.0
}

/// Optimisation and routing hyperparameters of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// `(step, multiplier)`: from `step` on, the rate is multiplied by `multiplier`.
    #[serde(default)]
    pub lr_schedule: Vec<(u64, f64)>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_lambda_ig")]
    pub lambda_ig: f64,
    #[serde(default = "default_balance")]
    pub lambda_balance: f64,
    #[serde(default = "default_tau_initial")]
    pub tau_initial: f64,
    #[serde(default = "default_tau_min")]
    pub tau_min: f64,
    #[serde(default = "default_tau_decay")]
    pub tau_decay: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (the last epoch always is).
    #[serde(default = "default_one")]
    pub eval_every: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.lr_initial > 0.0) || !self.lr_initial.is_finite() {
            return bad("lr_initial", format!("must be positive, got {}", self.lr_initial));
        }
        for &(step, m) in &self.lr_schedule {
            if !(m > 0.0 && m <= 1.0) {
                return bad("lr_schedule", format!("multiplier {m} at step {step} is outside (0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lambda_ig >= 0.0) {
            return bad("lambda_ig", format!("must be non-negative, got {}", self.lambda_ig));
        }
        if !(self.lambda_balance >= 1.0) {
            return bad("lambda_balance", format!("must be at least 1, got {}", self.lambda_balance));
        }
        for (field, v) in [("tau_initial", self.tau_initial), ("tau_min", self.tau_min), ("tau_decay", self.tau_decay)] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(field, format!("must be positive, got {v}"));
            }
        }
        if self.tau_decay > 1.0 {
            return bad("tau_decay", format!("must not exceed 1, got {}", self.tau_decay));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(
                "warmup_epochs",
                format!("{} warm-up epochs leave nothing of {} epochs", self.warmup_epochs, self.epochs),
            );
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1".into());
        }
        Ok(())
    }

    /// Learning rate in effect at a 0-based optimiser step.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|(s, _)| step >= *s)
            .fold(self.lr_initial, |lr, (_, m)| lr * m)
    }

    pub fn routing_mode(&self, epoch: usize) -> RoutingMode {
        if epoch < self.warmup_epochs {
            RoutingMode::Warmup
        } else {
            match self.mode {
                TrainMode::Ig => RoutingMode::IgSampling,
                TrainMode::Random => RoutingMode::Random,
            }
        }
    }

    /// Routing used when evaluating a model trained with this configuration.
    pub fn eval_routing(&self) -> EvalRouting {
        match self.mode {
            TrainMode::Ig => EvalRouting::Argmax,
            TrainMode::Random => EvalRouting::Random { seed: self.seed.wrapping_add(EVAL_SEED_OFFSET) },
        }
    }
}

/// One annealing step: `max(τ_min, τ·rate)`.
pub fn temperature_step(tau: f64, rate: f64, tau_min: f64) -> f64 {
    (tau * rate).max(tau_min)
}

/// Loss terms of one optimiser step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub tau: f64,
    pub mode: RoutingMode,
    pub cross_entropy: f64,
    pub information_gains: Vec<f64>,
    /// Entropy of the empirical route distribution per routed block.
    pub route_entropies: Vec<f64>,
    /// `weight_decay·½‖θ‖²` before the update.
    pub weight_decay_term: f64,
    /// `CE − λ_IG·Σ IG + weight-decay term`.
    pub total_loss: f64,
    pub correct: usize,
    pub batch_size: usize,
}

/// Summary of one finished epoch, one row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Optimiser steps taken so far.
    pub step: u64,
    /// Epochs completed (1-based).
    pub epoch: usize,
    pub lr: f64,
    pub tau: f64,
    pub mode: RoutingMode,
    pub mean_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub information_gains: Vec<f64>,
    pub route_entropies: Vec<f64>,
}

fn mode_str(mode: RoutingMode) -> &'static str {
    match mode {
        RoutingMode::IgSampling => "ig",
        RoutingMode::Random => "random",
        RoutingMode::Warmup => "warmup",
    }
}

/// Append-only CSV metrics log.
pub struct MetricsLog;

impl MetricsLog {
    /// Columns for `routers` information gains and `routed_blocks` route entropies.
    pub fn header(routers: usize, routed_blocks: usize) -> String {
        let mut h = String::from("step,epoch,lr,tau,mode,loss,train_acc,test_acc");
        for l in 1..=routers {
            h.push_str(&format!(",ig_{l}"));
        }
        for l in 1..=routed_blocks {
            h.push_str(&format!(",route_entropy_{l}"));
        }
        h
    }

    pub fn row(r: &EpochRecord) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            r.lr,
            r.tau,
            mode_str(r.mode),
            r.mean_loss,
            r.train_acc,
            r.test_acc.map_or(String::new(), |a| a.to_string())
        );
        for v in r.information_gains.iter().chain(&r.route_entropies) {
            s.push_str(&format!(",{v}"));
        }
        s
    }

    /// Append one record, writing the header first if the file is new or empty.
    pub fn append(path: &Path, record: &EpochRecord) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if f.metadata()?.len() == 0 {
            writeln!(f, "{}", Self::header(record.information_gains.len(), record.route_entropies.len()))?;
        }
        writeln!(f, "{}", Self::row(record))?;
        Ok(())
    }
}

/// Accuracy and routing statistics of a model on one dataset split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// One histogram per routed block (blocks 1..L).
    pub histograms: Vec<RoutingHistogram>,
    pub mean_macs: f64,
}

fn argmax_row<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let c = logits.row_len();
    labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax_row(&logits.data()[i * c..(i + 1) * c]) == y)
        .count()
}

/// Single-path inference over a whole split.
pub fn evaluate<T: Element>(model: &Trellis<T>, data: &LabeledDataset, routing: EvalRouting) -> Result<Evaluation> {
    let config = model.config();
    let counts = config.unit_counts();
    let mut histograms: Vec<RoutingHistogram> =
        (1..counts.len()).map(|l| RoutingHistogram::new(l, config.num_classes, counts[l])).collect();
    let per_sample = count_macs(config, &config.input_shape)?.per_sample as f64;
    let mut correct = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (b, (images, labels)) in batches::<T, _>(data, EVAL_BATCH, false, &mut rng)?.enumerate() {
        let mut tape = Tape::new();
        let routing = match routing {
            EvalRouting::Random { seed } => EvalRouting::Random { seed: seed.wrapping_add(b as u64) },
            r => r,
        };
        let pass = model.forward_with(&mut tape, &images, routing)?;
        correct += count_correct(tape.value(pass.logits), &labels);
        for (h, route) in histograms.iter_mut().zip(&pass.routes.units) {
            for (&y, &k) in labels.iter().zip(route) {
                h.record(y, k);
            }
        }
    }
    let total = data.len();
    Ok(Evaluation {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        histograms,
        mean_macs: if total == 0 { 0.0 } else { per_sample },
    })
}

fn route_entropy(route: &[usize], units: usize) -> f64 {
    let mut counts = vec![0.0; units];
    for &k in route {
        counts[k] += 1.0;
    }
    let n = route.len() as f64;
    entropy(&counts.iter().map(|c| c / n).collect::<Vec<_>>())
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Model, optimiser and all mutable run state.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub(crate) config: TrainConfig,
    pub(crate) model: Trellis<T>,
    pub(crate) optimizer: SgdMomentum<T>,
    pub(crate) data_rng: ChaCha8Rng,
    pub(crate) route_rng: ChaCha8Rng,
    pub(crate) step: u64,
    pub(crate) epoch: usize,
    pub(crate) tau: f64,
    pub(crate) history: Vec<EpochRecord>,
}

impl<T: Element> Trainer<T> {
    pub fn new(config: TrainConfig, trellis: TrellisConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Trellis::new(trellis, config.seed)?;
        model.set_temperature(config.tau_initial)?;
        let optimizer = SgdMomentum::new(model.params(), config.momentum, config.weight_decay);
        Ok(Trainer {
            data_rng: seeded(config.seed, DATA_STREAM),
            route_rng: seeded(config.seed, ROUTE_STREAM),
            tau: config.tau_initial,
            config,
            model,
            optimizer,
            step: 0,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Trellis<T> {
        &self.model
    }

    pub fn optimizer(&self) -> &SgdMomentum<T> {
        &self.optimizer
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn temperature(&self) -> f64 {
        self.tau
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// One optimiser step on a minibatch under the given routing mode.
    pub fn train_step(&mut self, images: &Tensor<T>, labels: &[usize], mode: RoutingMode) -> Result<StepRecord> {
        let diverged = |step: u64, e: Error| match e {
            Error::NonFinite { op } => Error::Diverged { step, detail: format!("non-finite value in {op}") },
            other => other,
        };
        let step = self.step;
        let lr = self.config.lr_at(step);
        self.model.set_temperature(self.tau)?;
        let mut tape = Tape::new();
        let pass = self
            .model
            .forward_train(&mut tape, images, mode, &mut self.route_rng)
            .map_err(|e| diverged(step, e))?;
        let grads = self
            .model
            .backward_train(&mut tape, &pass, labels, self.config.lambda_ig, self.config.lambda_balance)
            .map_err(|e| diverged(step, e))?;
        let wd_term = self.config.weight_decay * self.model.params().half_sq_norm_decayed();
        let total = grads.objective + wd_term;
        if !total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "loss {total} (cross-entropy {}, information gains {:?})",
                    grads.cross_entropy, grads.information_gains
                ),
            });
        }
        let counts = self.model.config().unit_counts();
        let route_entropies =
            pass.routes.units.iter().enumerate().map(|(l, r)| route_entropy(r, counts[l + 1])).collect();
        let correct = count_correct(tape.value(pass.logits), labels);
        self.optimizer.step(self.model.params_mut(), &grads.grads, lr);
        let record = StepRecord {
            step,
            epoch: self.epoch,
            lr,
            tau: self.tau,
            mode,
            cross_entropy: grads.cross_entropy,
            information_gains: grads.information_gains,
            route_entropies,
            weight_decay_term: wd_term,
            total_loss: total,
            correct,
            batch_size: labels.len(),
        };
        self.tau = temperature_step(self.tau, self.config.tau_decay, self.config.tau_min);
        self.step += 1;
        Ok(record)
    }

    /// One pass over the shuffled training set. Returns the per-step records.
    pub fn train_epoch(&mut self, train: &LabeledDataset) -> Result<Vec<StepRecord>> {
        if train.sample_shape() != self.model.config().input_shape.as_slice() {
            return Err(Error::Config(format!(
                "dataset samples have shape {:?}, model expects {:?}",
                train.sample_shape(),
                self.model.config().input_shape
            )));
        }
        let mode = self.config.routing_mode(self.epoch);
        let order = crate::data::epoch_order(train.len(), true, &mut self.data_rng);
        let mut records = Vec::with_capacity(order.len().div_ceil(self.config.batch_size));
        for chunk in order.chunks(self.config.batch_size) {
            let (images, labels) = train.gather::<T>(chunk);
            records.push(self.train_step(&images, &labels, mode)?);
        }
        self.epoch += 1;
        Ok(records)
    }

    pub fn evaluate(&self, data: &LabeledDataset) -> Result<Evaluation> {
        evaluate(&self.model, data, self.config.eval_routing())
    }

    /// Train until the configured epoch count, calling `on_epoch` after each epoch.
    pub fn fit<F>(&mut self, train: &LabeledDataset, test: Option<&LabeledDataset>, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Self, &EpochRecord, &[StepRecord]) -> Result<()>,
    {
        while !self.is_finished() {
            let mode = self.config.routing_mode(self.epoch);
            let steps = self.train_epoch(train)?;
            let routers = self.model.config().blocks.iter().filter(|b| b.router.is_some()).count();
            let routed = self.model.config().routed_blocks();
            let n = steps.len().max(1) as f64;
            let mean = |f: &dyn Fn(&StepRecord) -> f64| steps.iter().map(f).sum::<f64>() / n;
            let seen: usize = steps.iter().map(|s| s.batch_size).sum();
            let correct: usize = steps.iter().map(|s| s.correct).sum();
            let due = self.epoch % self.config.eval_every == 0 || self.is_finished();
            let test_acc = match test {
                Some(t) if due => Some(self.evaluate(t)?.accuracy),
                _ => None,
            };
            let record = EpochRecord {
                step: self.step,
                epoch: self.epoch,
                lr: steps.last().map_or(self.config.lr_at(self.step), |s| s.lr),
                tau: self.tau,
                mode,
                mean_loss: mean(&|s| s.total_loss),
                train_acc: if seen == 0 { 0.0 } else { correct as f64 / seen as f64 },
                test_acc,
                information_gains: (0..routers).map(|l| mean(&|s| s.information_gains[l])).collect(),
                route_entropies: (0..routed).map(|l| mean(&|s| s.route_entropies[l])).collect(),
            };
            self.history.push(record.clone());
            on_epoch(self, &record, &steps)?;
        }
        Ok(())
    }
}
