use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adam_step, lr_at, AdamState, Model, ModelConfig};
use crate::contrastive::{augment_pair, nt_xent, AugmentConfig};
use crate::dataset::Dataset;
use crate::nn::Module;
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

const PRETRAIN_STREAM: u64 = 0x5052;
const FINETUNE_STREAM: u64 = 0x4654;
const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_steps: u64,
    pub decay_rate: f64,
    /// Pretraining epochs with the encoder frozen.
    pub freeze_epochs: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Images per batch; a contrastive batch holds twice as many views.
    pub batch_size: usize,
    pub tau: f32,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.02,
            decay_steps: 80_000,
            decay_rate: 0.96,
            freeze_epochs: 50,
            pretrain_epochs: 100,
            finetune_epochs: 50,
            batch_size: 32,
            tau: 0.5,
            seed: 0,
            stratified: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be non-negative, got {}", self.lr0));
        }
        if self.decay_steps == 0 || !(self.decay_rate > 0.0) {
            return bad(format!(
                "decay steps and rate must be positive, got {} and {}",
                self.decay_steps, self.decay_rate
            ));
        }
        if self.freeze_epochs > self.pretrain_epochs {
            return bad(format!(
                "freeze_epochs {} exceeds pretrain_epochs {}",
                self.freeze_epochs, self.pretrain_epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.tau));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub encoder_frozen: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub train_top1: f64,
    pub val_top1: Option<f64>,
    pub seconds: f64,
}

/// Run metadata written next to checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub image_size: usize,
    pub threads: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// How the contrastive loss is averaged.
    pub loss_mean_over: String,
    pub pretrain: Vec<EpochRecord>,
    pub finetune: Vec<FinetuneRecord>,
}

impl RunReport {
    pub fn new(model: &ModelConfig, train: &TrainConfig, augment: &AugmentConfig, image_size: usize) -> Self {
        Self {
            model: model.clone(),
            train: train.clone(),
            augment: augment.clone(),
            image_size,
            threads: crate::tensor::kernel::threads(),
            train_size: 0,
            val_size: 0,
            loss_mean_over: "all 2N directed positive pairs".into(),
            pretrain: Vec::new(),
            finetune: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn shuffled(indices: &[usize], seed: u64, phase: u64, epoch: usize) -> Vec<usize> {
    let mut order = indices.to_vec();
    order.shuffle(&mut rng::stream(seed, &[phase, epoch as u64]));
    order
}

fn check_finite(loss: f32, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} loss became {loss}")))
    }
}

/// Runs one forward/backward pass, stores gradients on the model and takes
/// an Adam step. Returns the loss value.
pub(crate) fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    lr: f64,
    input: Tensor,
    loss_fn: impl FnOnce(&mut Graph<'_>, Var) -> Result<Var>,
) -> Result<f32> {
    let (loss, grads, bound) = {
        let mut g = Graph::new();
        let x = g.constant(input);
        let mut bound = Vec::new();
        let out = model.forward(&mut g, x, &mut bound)?;
        let l = loss_fn(&mut g, out)?;
        let loss = g.value(l).item();
        (loss, g.backward(l)?, bound)
    };
    model.store_grads(&grads, &bound)?;
    drop(grads);
    adam_step(adam, &mut model.params_mut(), lr)?;
    model.zero_grad();
    Ok(loss)
}

/// Contrastive pretraining on `indices` of `ds`. The encoder is frozen for
/// the first `cfg.freeze_epochs` epochs.
pub fn pretrain(
    model: &mut Model,
    ds: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    aug.validate()?;
    if model.is_snipped() || model.has_classifier() {
        return Err(Error::State("pretraining needs the full projection head and no classifier".into()));
    }
    if indices.is_empty() {
        return Err(Error::Data("pretraining set is empty".into()));
    }
    let mut adam = AdamState::new(&model.params());
    let mut records = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let start = Instant::now();
        let frozen = epoch < cfg.freeze_epochs;
        model.set_encoder_trainable(!frozen);
        let order = shuffled(indices, cfg.seed, PRETRAIN_STREAM, epoch);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let views = chunk
                .par_iter()
                .map(|&i| augment_pair(&ds.samples[i].image, aug, epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let (h, w) = aug.output_size;
            let mut data = Vec::with_capacity(2 * chunk.len() * h * w * 3);
            for (a, b) in &views {
                data.extend_from_slice(a.data());
                data.extend_from_slice(b.data());
            }
            let input = Tensor::new(&[2 * chunk.len(), h, w, 3], data)?;
            let lr = lr_at(cfg, adam.step);
            let loss = train_step(model, &mut adam, lr, input, |g, z| nt_xent(g, z, cfg.tau))?;
            check_finite(loss, "contrastive")?;
            total += loss as f64;
            batches += 1;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: total / batches as f64,
            lr: lr_at(cfg, adam.step),
            encoder_frozen: frozen,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "pretrain epoch {}: loss {:.4}{} ({:.1}s)",
            record.epoch,
            record.loss,
            if frozen { " [encoder frozen]" } else { "" },
            record.seconds
        );
        records.push(record);
    }
    model.set_encoder_trainable(true);
    Ok(records)
}

/// Mean softmax cross-entropy of `(batch, classes)` logits.
pub fn cross_entropy(g: &mut Graph<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let &[rows, classes] = shape.as_slice() else {
        return Err(Error::Data(format!("logits must be (batch, classes), got {shape:?}")));
    };
    if rows != labels.len() {
        return Err(Error::Data(format!("{} labels for {rows} rows", labels.len())));
    }
    let mut onehot = vec![0.0f32; rows * classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Data(format!("label {y} out of range 0..{classes}")));
        }
        onehot[r * classes + y] = 1.0;
    }
    let row_max = g.max(logits, Some(1))?;
    let ones = g.constant(Tensor::ones(&[classes])?);
    let spread = g.contract(row_max, ones, &[])?;
    let shifted = g.sub(logits, spread)?;
    let e = g.exp(shifted);
    let denom = g.sum(e, Some(1))?;
    let lse = g.log(denom)?;
    let onehot = g.constant(Tensor::new(&[rows, classes], onehot)?);
    let picked = g.mul(shifted, onehot)?;
    let target = g.sum(picked, Some(1))?;
    let per_row = g.sub(lse, target)?;
    Ok(g.mean(per_row, None)?)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per sample; ties go to the lowest class index.
pub fn predict(model: &Model, ds: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let x = g.constant(ds.batch(chunk)?);
        let y = model.forward(&mut g, x, &mut Vec::new())?;
        let logits = g.value(y);
        out.extend(logits.data().chunks(logits.shape()[1]).map(argmax));
    }
    Ok(out)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn top1_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::Data(format!(
            "top-1 needs a nonempty (n, classes) logit matrix matching {} labels",
            labels.len()
        )));
    }
    let hits = logits
        .data()
        .chunks(logits.shape()[1])
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate_top1(model: &Model, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    if !model.has_classifier() {
        return Err(Error::State("evaluation needs an attached classifier".into()));
    }
    if indices.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let preds = predict(model, ds, indices)?;
    let hits = preds.iter().zip(indices).filter(|(&p, &i)| p == ds.samples[i].label).count();
    Ok(hits as f64 / indices.len() as f64)
}

/// Supervised training of every parameter with cross-entropy.
pub fn finetune(
    model: &mut Model,
    ds: &Dataset,
    train: &[usize],
    validation: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<FinetuneRecord>> {
    cfg.validate()?;
    if !model.has_classifier() {
        return Err(Error::State("fine-tuning needs an attached classifier".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let classes = model.out_dim();
    if let Some(s) = train.iter().chain(validation).map(|&i| &ds.samples[i]).find(|s| s.label >= classes) {
        return Err(Error::Data(format!("label {} of {} out of range 0..{classes}", s.label, s.path)));
    }
    model.set_encoder_trainable(true);
    let mut adam = AdamState::new(&model.params());
    let mut records = Vec::with_capacity(cfg.finetune_epochs);
    for epoch in 0..cfg.finetune_epochs {
        let start = Instant::now();
        let order = shuffled(train, cfg.seed, FINETUNE_STREAM, epoch);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.samples[i].label).collect();
            let lr = lr_at(cfg, adam.step);
            let loss = train_step(model, &mut adam, lr, ds.batch(chunk)?, |g, logits| {
                cross_entropy(g, logits, &labels)
            })?;
            check_finite(loss, "cross-entropy")?;
            total += loss as f64;
            batches += 1;
        }
        let train_top1 = evaluate_top1(model, ds, train)?;
        let val_top1 = if validation.is_empty() {
            None
        } else {
            Some(evaluate_top1(model, ds, validation)?)
        };
        let record = FinetuneRecord {
            epoch: epoch + 1,
            loss: total / batches as f64,
            lr: lr_at(cfg, adam.step),
            train_top1,
            val_top1,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "finetune epoch {}: loss {:.4}, train top-1 {:.3}, validation top-1 {} ({:.1}s)",
            record.epoch,
            record.loss,
            record.train_top1,
            record.val_top1.map_or("-".into(), |v| format!("{v:.3}")),
            record.seconds
        );
        records.push(record);
    }
    Ok(records)
}
