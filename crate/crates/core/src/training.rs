//! Mini-batch training with periodic validation and smoothed checkpoint
//! selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::{Checkpoint, IoError};
use crate::model::{ChunkInput, DyadicModel, Mode, ModelError, TRAITS};
use crate::nn::Module;
use crate::optim::{mse_loss, Adam, AdamConfig};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub validations_per_epoch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            epochs: 1,
            validations_per_epoch: 30,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.validations_per_epoch == 0 {
            return Err(TrainError::Config("batch_size, epochs and validations_per_epoch must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.adam.lr)));
        }
        Ok(())
    }
}

/// One training example: a chunk and its target's OCEAN z-scores.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: ChunkInput,
    pub target: [f64; TRAITS],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationCurve {
    pub points: Vec<(usize, f64)>,
}

impl ValidationCurve {
    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record(["step", "val_mse"]).unwrap();
        for (step, mse) in &self.points {
            w.write_record([step.to_string(), format!("{mse:.17e}")]).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

/// Validation cadence in optimizer steps.
pub fn validation_interval(steps_per_epoch: usize, validations_per_epoch: usize) -> usize {
    steps_per_epoch.div_ceil(validations_per_epoch.max(1)).max(1)
}

/// Mean of the value at `k` with its available neighbours.
pub fn smoothed(curve: &[f64], k: usize) -> f64 {
    let lo = k.saturating_sub(1);
    let hi = (k + 1).min(curve.len() - 1);
    let window = &curve[lo..=hi];
    window.iter().sum::<f64>() / window.len() as f64
}

/// Index minimizing the neighbour-smoothed curve; ties go to the earliest.
pub fn select_smoothed(curve: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for k in 0..curve.len() {
        let s = smoothed(curve, k);
        if best.is_none_or(|(_, b)| s < b) {
            best = Some((k, s));
        }
    }
    best.map(|(k, _)| k)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: ValidationCurve,
    /// Index into `curve.points` of the selected checkpoint.
    pub selected: usize,
    pub selected_step: usize,
    pub selected_score: f64,
    /// Training loss of every optimizer step.
    pub train_losses: Vec<f64>,
    pub steps: usize,
}

type Snapshot = Vec<Vec<f64>>;

fn snapshot(model: &DyadicModel) -> Snapshot {
    model.parameters().iter().map(|p| p.values()).collect()
}

fn restore(model: &DyadicModel, snap: &Snapshot) -> Result<()> {
    for (p, v) in model.parameters().iter().zip(snap) {
        p.assign(v)?;
    }
    Ok(())
}

/// Stack per-sample predictions into `(B, 5)`.
fn batch_predictions(model: &DyadicModel, batch: &[&Sample], mode: &mut Mode) -> Result<(Tensor, Tensor)> {
    let mut preds = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len() * TRAITS);
    for s in batch {
        preds.push(model.predict_chunk(&s.input, mode)?.reshape(&[1, TRAITS])?);
        targets.extend_from_slice(&s.target);
    }
    Ok((Tensor::concat(&preds, 0)?, Tensor::new(&[batch.len(), TRAITS], targets)?))
}

/// Chunk-level MSE in eval mode.
pub fn evaluate_mse(model: &DyadicModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation"));
    }
    let mut total = 0.0;
    for s in samples {
        let (p, t) = batch_predictions(model, &[s], &mut Mode::Eval)?;
        total += mse_loss(&p, &t)?.item().unwrap();
    }
    Ok(total / samples.len() as f64)
}

/// One optimizer step on `batch`; returns the batch loss before the update.
pub fn train_step(model: &DyadicModel, adam: &mut Adam, batch: &[&Sample], mode: &mut Mode) -> Result<f64> {
    let params = model.parameters();
    params.iter().for_each(|p| p.zero_grad());
    let (p, t) = batch_predictions(model, batch, mode)?;
    let loss = mse_loss(&p, &t)?;
    loss.backward()?;
    adam.step(&params)?;
    Ok(loss.item().unwrap())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::io::write_file(path, text.as_bytes()).map_err(Into::into)
}

/// Train in place. On return the model holds the selected checkpoint.
///
/// With `run_dir`, writes `config.toml`, `curve.csv`, one checkpoint per
/// validation under `checkpoints/`, `best.ckpt`, and `selection.toml`.
pub fn train(model: &DyadicModel, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    if let Some(dir) = run_dir {
        #[derive(Serialize)]
        struct RunConfig<'a> {
            train: &'a TrainConfig,
            model: &'a crate::model::ModelConfig,
        }
        let text = toml::to_string(&RunConfig { train: cfg, model: model.config() })
            .map_err(|e| TrainError::Config(e.to_string()))?;
        write_text(&dir.join("config.toml"), &text)?;
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d50b);
    let mut adam = Adam::new(cfg.adam);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let interval = validation_interval(steps_per_epoch, cfg.validations_per_epoch);

    let mut curve = ValidationCurve::default();
    let mut train_losses = vec![];
    // Smoothed scores are final one validation late, so the previous
    // snapshot is kept until its right neighbour exists.
    let mut previous: Option<Snapshot> = None;
    let mut best: Option<(usize, f64, Snapshot)> = None;
    let consider = |k: usize, values: &[f64], snap: Snapshot, best: &mut Option<(usize, f64, Snapshot)>| {
        let s = smoothed(values, k);
        if best.as_ref().is_none_or(|(_, b, _)| s < *b) {
            *best = Some((k, s, snap));
        }
    };

    let mut step = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = batch_idx.iter().map(|&i| &train_set[i]).collect();
            train_losses.push(train_step(model, &mut adam, &batch, &mut Mode::Train(&mut dropout_rng))?);
            step += 1;
            if step % interval == 0 {
                let mse = evaluate_mse(model, val_set)?;
                curve.points.push((step, mse));
                let snap = snapshot(model);
                if let Some(dir) = run_dir {
                    Checkpoint::from_model(model).save(&dir.join("checkpoints").join(format!("step_{step:07}.ckpt")))?;
                }
                let values = curve.values();
                let k = values.len() - 1;
                if let Some(prev) = previous.replace(snap) {
                    consider(k - 1, &values, prev, &mut best);
                }
            }
        }
    }
    let values = curve.values();
    if let Some(last) = previous.take() {
        consider(values.len() - 1, &values, last, &mut best);
    }
    let (selected, score, snap) = best.expect("at least one validation per epoch");
    debug_assert_eq!(Some(selected), select_smoothed(&values));
    restore(model, &snap)?;
    let outcome = TrainOutcome {
        selected_step: curve.points[selected].0,
        selected,
        selected_score: score,
        curve,
        train_losses,
        steps: step,
    };
    if let Some(dir) = run_dir {
        write_text(&dir.join("curve.csv"), &outcome.curve.to_csv())?;
        Checkpoint::from_model(model).save(&dir.join("best.ckpt"))?;
        write_text(
            &dir.join("selection.toml"),
            &format!(
                "index = {}\nstep = {}\nsmoothed_val_mse = {:e}\nval_mse = {:e}\n",
                outcome.selected, outcome.selected_step, outcome.selected_score, outcome.curve.points[outcome.selected].1
            ),
        )?;
    }
    Ok(outcome)
}
