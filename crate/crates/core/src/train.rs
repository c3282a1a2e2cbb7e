//! Pre-training and fine-tuning loops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::model::{argmax, mask_patches, MaeModel, MaskedBatch, ModelError};
use crate::patch::PatchSet;
use crate::synth::sample_seed;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Length of the cosine schedule; `None` decays over `steps`. A longer
    /// horizon runs the first `steps` updates of that schedule.
    pub lr_decay_steps: Option<usize>,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Fine-tuning only: keep embedding and encoder weights fixed.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            steps: 200,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            lr_decay_steps: None,
            checkpoint_every: 0,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.lr_decay_steps == Some(0) {
            return bad("lr_decay_steps must be at least 1");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        cosine_lr(self.lr, step, self.lr_decay_steps.unwrap_or(self.steps))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub step: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "step,loss,acc";

    pub fn csv_row(&self) -> String {
        match self.accuracy {
            Some(a) => format!("{},{:?},{:?}", self.step, self.loss, a),
            None => format!("{},{:?},", self.step, self.loss),
        }
    }
}

/// Learning rate at 0-based `step` of `total`, decaying from `base` toward 0.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let frac = (step as f64 / total.max(1) as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam moments for every parameter of a store.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &MaeModel, cfg: &TrainConfig) -> Self {
        let z = model.params().zeros_like();
        Adam {
            m: z.clone(),
            v: z,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    /// Applies one update. Parameters with `frozen[i]` keep their values
    /// and moments.
    pub fn step(&mut self, model: &mut MaeModel, grads: &[Tensor], lr: f64, frozen: &[bool]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, p) in model.params_mut().values_mut().iter_mut().enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

struct ElementResult {
    loss: f64,
    correct: bool,
    grads: Vec<Tensor>,
}

/// Runs `f` for each element in parallel and reduces losses and gradients
/// in index order, so the result does not depend on thread scheduling.
fn batch_gradients<F>(model: &MaeModel, n: usize, f: F) -> Result<(f64, f64, Vec<Tensor>), ModelError>
where
    F: Fn(usize, &mut Graph) -> Result<(Var, bool), ModelError> + Sync,
{
    let results: Vec<Result<ElementResult, ModelError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::new(model.params());
            let (loss, correct) = f(i, &mut g)?;
            let grads = g.backward(loss)?;
            Ok(ElementResult {
                loss: g.scalar(loss),
                correct,
                grads,
            })
        })
        .collect();
    let mut total = model.params().zeros_like();
    let (mut loss, mut correct) = (0.0, 0usize);
    for r in results {
        let r = r?;
        loss += r.loss;
        correct += usize::from(r.correct);
        for (t, g) in total.iter_mut().zip(&r.grads) {
            t.add_assign(g);
        }
    }
    let inv = 1.0 / n as f64;
    for t in &mut total {
        t.scale(inv);
    }
    Ok((loss * inv, correct as f64 * inv, total))
}

/// One optimizer update on a batch of already-masked patch sets.
pub fn pretrain_step(
    model: &mut MaeModel,
    opt: &mut Adam,
    batch: &[MaskedBatch],
    lr: f64,
    step: usize,
) -> Result<Metrics, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let (loss, _, grads) = batch_gradients(model, batch.len(), |i, g| {
        Ok((model.pretrain_forward(g, &batch[i])?.0, false))
    })?;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }
    opt.step(model, &grads, lr, &[]);
    Ok(Metrics {
        step,
        loss,
        accuracy: None,
    })
}

/// Batch indices for every step, drawn up front from `seed`.
fn batch_schedule(n: usize, cfg: &TrainConfig) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bs = cfg.batch_size.min(n);
    (0..cfg.steps)
        .map(|_| rand::seq::index::sample(&mut rng, n, bs).into_vec())
        .collect()
}

/// Masked-autoencoder pre-training. `on_step` sees the model after every
/// update, for logging and checkpointing.
pub fn pretrain<F>(
    model: &mut MaeModel,
    data: &[PatchSet],
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<Metrics>, TrainError>
where
    F: FnMut(&MaeModel, &Metrics) -> Result<(), TrainError>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let ratio = model.config().mask_ratio;
    let mut opt = Adam::new(model, cfg);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_736b);
    let mut history = Vec::with_capacity(cfg.steps);
    for (step, idx) in batch_schedule(data.len(), cfg).into_iter().enumerate() {
        let batch = idx
            .iter()
            .map(|&i| mask_patches(&data[i], ratio, &mut mask_rng))
            .collect::<Result<Vec<_>, _>>()?;
        let m = pretrain_step(model, &mut opt, &batch, cfg.lr_at(step), step + 1)?;
        on_step(model, &m)?;
        history.push(m);
    }
    Ok(history)
}

/// Mean Chamfer loss over `data` with masks drawn from `seed`.
pub fn eval_pretrain_loss(model: &MaeModel, data: &[PatchSet], seed: u64) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    let ratio = model.config().mask_ratio;
    let losses: Vec<Result<f64, ModelError>> = data
        .par_iter()
        .enumerate()
        .map(|(i, set)| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, i));
            model.pretrain_loss(&mask_patches(set, ratio, &mut rng)?)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len() as f64)
}

fn check_labels(model: &MaeModel, data: &[(PatchSet, usize)]) -> Result<(), TrainError> {
    let n_classes = model.config().n_classes;
    match data.iter().find(|(_, l)| *l >= n_classes) {
        Some(&(_, label)) => Err(TrainError::LabelOutOfRange { label, n_classes }),
        None => Ok(()),
    }
}

/// Mask marking the parameters that stay fixed under `freeze_encoder`.
fn frozen_mask(model: &MaeModel, freeze_encoder: bool) -> Vec<bool> {
    model
        .params()
        .iter()
        .map(|(_, name, _)| {
            freeze_encoder
                && (name.starts_with("embed.") || name.starts_with("pos.") || name.starts_with("encoder."))
        })
        .collect()
}

/// Cross-entropy training of the whole model (or only the parts outside the
/// encoder when `cfg.freeze_encoder` is set). Accuracy in the returned
/// metrics is the training-batch accuracy.
pub fn finetune<F>(
    model: &mut MaeModel,
    data: &[(PatchSet, usize)],
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<Metrics>, TrainError>
where
    F: FnMut(&MaeModel, &Metrics) -> Result<(), TrainError>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    check_labels(model, data)?;
    let frozen = frozen_mask(model, cfg.freeze_encoder);
    let mut opt = Adam::new(model, cfg);
    let mut history = Vec::with_capacity(cfg.steps);
    for (step, idx) in batch_schedule(data.len(), cfg).into_iter().enumerate() {
        let (loss, acc, grads) = batch_gradients(model, idx.len(), |i, g| {
            let (set, label) = &data[idx[i]];
            let logits = model.classify_forward(g, set)?;
            let correct = argmax(g.value(logits).data()) == *label;
            Ok((g.cross_entropy(logits, *label), correct))
        })?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: step + 1 });
        }
        opt.step(model, &grads, cfg.lr_at(step), &frozen);
        let m = Metrics {
            step: step + 1,
            loss,
            accuracy: Some(acc),
        };
        on_step(model, &m)?;
        history.push(m);
    }
    Ok(history)
}

/// Per-window accuracy and mean cross-entropy over a labeled set.
pub fn evaluate(model: &MaeModel, data: &[(PatchSet, usize)]) -> Result<Metrics, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    check_labels(model, data)?;
    let out: Vec<Result<(f64, bool), ModelError>> = data
        .par_iter()
        .map(|(set, label)| {
            let mut g = Graph::new(model.params());
            let logits = model.classify_forward(&mut g, set)?;
            let correct = argmax(g.value(logits).data()) == *label;
            let l = g.cross_entropy(logits, *label);
            Ok((g.scalar(l), correct))
        })
        .collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for r in out {
        let (l, c) = r?;
        loss += l;
        correct += usize::from(c);
    }
    let n = data.len() as f64;
    Ok(Metrics {
        step: 0,
        loss: loss / n,
        accuracy: Some(correct as f64 / n),
    })
}

const SPLIT_SALT: u64 = 0x5eed_5a17;

/// True when sample `id` belongs to the held-out fifth.
pub fn is_held_out(id: u64) -> bool {
    sample_seed(SPLIT_SALT, id as usize) % 5 == 0
}

/// Splits sample ids into `(train, held_out)` positions, roughly 80/20.
pub fn split_holdout(ids: &[u64]) -> (Vec<usize>, Vec<usize>) {
    (0..ids.len()).partition(|&i| !is_held_out(ids[i]))
}
