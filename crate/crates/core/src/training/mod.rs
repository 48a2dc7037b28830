//! Joint training of the task model and the rationale extractor, model
//! evaluation, and sweeps over loss weights, annotation fractions and top-k.

mod eval;
pub mod graph;
mod sweep;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Tape};
use crate::data::{self, Dataset, Example};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights};
use crate::metrics::MetricReport;
use crate::models::{ModelConfig, ModelParams};
use crate::topk::{imle_gradient, AimleConfig, AimleController, ImleConfig, KPercent};

pub use eval::{evaluate_model, evaluate_records, nrg_row_of, EvalConfig, TaskMetric};
pub use sweep::{run_sweep, write_csv, Axis, SweepRow, ANNOTATION_FRACTIONS, CSV_COLUMNS, TRANSFER_KS, WEIGHT_GRID};

/// Seed streams, one per purpose, under the single run seed.
pub(crate) const STREAM_SHUFFLE: u64 = 2;
pub(crate) const STREAM_GUMBEL: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 10,
            patience: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub imle: ImleConfig,
    pub aimle: AimleConfig,
    pub optim: AdamConfig,
    pub train: TrainSettings,
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.imle.validate()?;
        self.eval.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.max_epochs == 0 || t.patience == 0 {
            return Err(Error::Config(
                "train.batch_size, train.max_epochs and train.patience must be >= 1".into(),
            ));
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::Config(format!("optim.lr must be positive, got {}", self.optim.lr)));
        }
        if !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return Err(Error::Config("optim.beta1 and optim.beta2 must be in [0, 1)".into()));
        }
        if self.aimle.enabled && !(self.aimle.step_factor > 0.0 && (0.0..=1.0).contains(&self.aimle.target_rate)) {
            return Err(Error::Config(
                "aimle.step_factor must be > 0 and aimle.target_rate in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
    /// Step size used by the estimator on this step.
    pub lambda: f64,
    /// Fraction of items for which some perturbed top-k pair differed.
    pub diff_rate: f64,
}

/// Parameters plus the optimizer, controller and noise state that evolve
/// with them.
pub struct Trainer {
    pub params: ModelParams,
    cfg: TrainConfig,
    adam: Adam,
    controller: Option<AimleController>,
    gumbel: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, params: ModelParams) -> Result<Self> {
        cfg.validate()?;
        if params.config != cfg.model {
            return Err(Error::Config("model parameters do not match the model config".into()));
        }
        let adam = Adam::new(cfg.optim, params.tensors.iter().map(|t| &t.value));
        let controller = cfg
            .aimle
            .enabled
            .then(|| AimleController::new(cfg.imle.lambda, &cfg.aimle));
        Ok(Self {
            params,
            cfg: cfg.clone(),
            adam,
            controller,
            gumbel: data::rng(cfg.seed, STREAM_GUMBEL),
        })
    }

    pub fn from_seed(cfg: &TrainConfig) -> Result<Self> {
        Self::new(cfg, ModelParams::init(&cfg.model, cfg.seed)?)
    }

    pub fn lambda(&self) -> f64 {
        self.controller.as_ref().map_or(self.cfg.imle.lambda, |c| c.lambda)
    }

    pub fn controller(&self) -> Option<&AimleController> {
        self.controller.as_ref()
    }

    /// Forward, two-pass backward and one Adam update.
    ///
    /// The first backward pass gives parameter gradients and `dL/dr` for
    /// every top-k mask. The estimator turns each `dL/dr` into a score
    /// gradient, evaluated at the per-item per-k loss scale and scaled back,
    /// and the second pass carries those score gradients into the extractor.
    pub fn step(&mut self, batch: &[&Example]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::degenerate("train_step: empty batch"));
        }
        let w = &self.cfg.weights;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let g = graph::build(&mut tape, &bound, batch, w, None)?;
        if !g.breakdown.is_finite() || !tape.value(g.total).is_finite() {
            return Err(Error::NonFinite(format!("training loss {:?}", g.breakdown)));
        }
        let mut grads = tape.backward(g.total)?;

        let lambda = self.lambda();
        let mut differed = vec![false; batch.len()];
        if w.faithfulness_enabled() && lambda > 0.0 {
            let scale = (batch.len() * w.k_set.len()) as f64;
            let mut seeds: Vec<Vec<f64>> = batch.iter().map(|e| vec![0.0; e.len()]).collect();
            for sel in &g.selections {
                let grad_r: Vec<f64> = match grads.get(sel.r) {
                    Some(v) => v.iter().map(|x| x * scale).collect(),
                    None => continue,
                };
                if grad_r.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let s = tape.value(g.scores[sel.item]).values();
                let k: KPercent = w.k_set[sel.k_index];
                let est = match &self.controller {
                    Some(c) => c.gradient(s, &grad_r, k, &self.cfg.imle, &mut self.gumbel)?,
                    None => imle_gradient(s, &grad_r, k, &self.cfg.imle, &mut self.gumbel)?,
                };
                differed[sel.item] |= est.masks_differed;
                for (a, e) in seeds[sel.item].iter_mut().zip(&est.grad) {
                    *a += e / scale;
                }
            }
            let seeded: Vec<_> = g.scores.iter().copied().zip(seeds).collect();
            let second = tape.backward_from(&seeded)?;
            grads.accumulate(&second);
        }

        let grad_refs: Vec<&[f64]> = bound
            .ids
            .iter()
            .map(|&id| grads.get(id).expect("parameter leaves always receive gradients"))
            .collect();
        let mut tensors: Vec<&mut crate::autodiff::Tensor> =
            self.params.tensors.iter_mut().map(|t| &mut t.value).collect();
        self.adam.step(&mut tensors, &grad_refs)?;

        if w.faithfulness_enabled() {
            if let Some(c) = self.controller.as_mut() {
                c.update(&differed);
            }
        }
        Ok(StepReport {
            breakdown: g.breakdown,
            lambda,
            diff_rate: differed.iter().filter(|&&d| d).count() as f64 / batch.len() as f64,
        })
    }
}

/// One optimizer step from `params`; see [`Trainer::step`].
pub fn train_step(params: &ModelParams, batch: &[&Example], cfg: &TrainConfig) -> Result<(ModelParams, StepReport)> {
    let mut t = Trainer::new(cfg, params.clone())?;
    let report = t.step(batch)?;
    Ok((t.params, report))
}

/// Loss components averaged over `dataset`, in batches, without updates.
pub fn dataset_loss(params: &ModelParams, dataset: &Dataset, weights: &LossWeights, batch_size: usize) -> Result<LossBreakdown> {
    if dataset.is_empty() {
        return Err(Error::degenerate("dataset_loss: empty dataset"));
    }
    let mut parts = Vec::new();
    for chunk in dataset.examples.chunks(batch_size.max(1)) {
        let batch: Vec<&Example> = chunk.iter().collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let g = graph::build(&mut tape, &bound, &batch, weights, None)?;
        parts.push((g.breakdown, chunk.len() as f64));
    }
    Ok(LossBreakdown::weighted_mean(&parts).expect("nonempty"))
}

/// Patience-based stopping on a lower-is-better criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_epoch: Option<usize>,
    pub best_value: f64,
    pub epochs_since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_epoch: None,
            best_value: f64::INFINITY,
            epochs_since_best: 0,
        }
    }

    /// Records an epoch's value; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        let improved = self.best_epoch.is_none() || value < self.best_value;
        if improved {
            self.best_epoch = Some(epoch);
            self.best_value = value;
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
        }
        (improved, self.epochs_since_best >= self.patience)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train: LossBreakdown,
    pub dev_loss: LossBreakdown,
    pub dev: MetricReport,
    /// Estimator step size at the end of the epoch.
    pub lambda: f64,
    pub diff_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub wall_time_secs: f64,
}

impl RunLog {
    pub fn best(&self) -> &EpochLog {
        &self.epochs[self.best_epoch - 1]
    }

    /// Copy with timing zeroed, for comparisons across runs.
    pub fn without_timing(&self) -> RunLog {
        RunLog {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: RunLog,
}

/// Trains until `max_epochs` or until dev total loss has not improved for
/// `patience` epochs; returns the parameters of the best epoch. Batches are
/// drawn from a seeded per-epoch shuffle and the last partial batch is kept.
/// With `checkpoint_dir`, the best parameters are written there as
/// `best.json` whenever they improve.
pub fn run_training(cfg: &TrainConfig, train: &Dataset, dev: &Dataset, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::degenerate("run_training: train and dev sets must be nonempty"));
    }
    let start = Instant::now();
    let mut trainer = Trainer::from_seed(cfg)?;
    let mut shuffle = data::rng(cfg.seed, STREAM_SHUFFLE);
    let mut stopper = EarlyStopping::new(cfg.train.patience);
    let mut best = trainer.params.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.train.max_epochs {
        order.shuffle(&mut shuffle);
        let mut parts = Vec::new();
        let mut diff = 0.0;
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train.examples[i]).collect();
            let r = trainer.step(&batch)?;
            diff += r.diff_rate * chunk.len() as f64;
            parts.push((r.breakdown, chunk.len() as f64));
        }
        let dev_loss = dataset_loss(&trainer.params, dev, &cfg.weights, cfg.train.batch_size)?;
        let dev_report = evaluate_model(&trainer.params, dev, &cfg.eval, None)?;
        epochs.push(EpochLog {
            epoch,
            train: LossBreakdown::weighted_mean(&parts).expect("nonempty"),
            dev_loss: dev_loss.clone(),
            dev: dev_report,
            lambda: trainer.lambda(),
            diff_rate: diff / train.len() as f64,
        });
        let (improved, stop) = stopper.observe(epoch, dev_loss.total);
        if improved {
            best = trainer.params.clone();
            if let Some(dir) = checkpoint_dir {
                best.save(dir.join("best.json"))?;
            }
        }
        if stop {
            stopped_early = epoch < cfg.train.max_epochs;
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        log: RunLog {
            seed: cfg.seed,
            config: cfg.clone(),
            epochs,
            best_epoch: stopper.best_epoch.expect("at least one epoch"),
            stopped_early,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    })
}

#[cfg(test)]
mod tests;
