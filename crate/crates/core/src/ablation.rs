//! Center-selection ablations.
//!
//! For every setting (a center method, or an inlier threshold) and every
//! seed, a model is pre-trained on patches produced by that setting and
//! scored by its masked-reconstruction loss on held-out windows patched the
//! same way. With labels available, each pre-trained model is also
//! fine-tuned and its held-out accuracy reported.

use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::model::{MaeModel, ModelConfig, ModelError};
use crate::patch::{generate_patch_sets, CenterMethod, PatchConfig, PatchError, PatchSet};
use crate::sampler::PointSet;
use crate::train::{eval_pretrain_loss, evaluate, finetune, pretrain, Metrics, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum AblationError {
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("labels do not match windows ({windows} windows, {labels} labels)")]
    LabelCount { windows: usize, labels: usize },
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSetting {
    pub label: String,
    pub patch: PatchConfig,
}

impl AblationSetting {
    pub fn checkpoint_name(&self, seed: u64) -> String {
        format!("{}-seed{seed}.evmc", self.label)
    }

    /// Patch config for one seed; the patch RNG moves with the seed.
    fn patch_for(&self, seed: u64) -> PatchConfig {
        PatchConfig {
            seed: self.patch.seed.wrapping_add(seed),
            ..self.patch.clone()
        }
    }
}

/// One setting per method, labeled by the method name.
pub fn method_settings(base: &PatchConfig, methods: &[CenterMethod]) -> Vec<AblationSetting> {
    methods
        .iter()
        .map(|&method| AblationSetting {
            label: method.to_string(),
            patch: PatchConfig { method, ..base.clone() },
        })
        .collect()
}

/// Inlier-method settings, one per threshold, labeled `H=<value>`.
pub fn threshold_settings(base: &PatchConfig, thresholds: &[f64]) -> Vec<AblationSetting> {
    thresholds
        .iter()
        .map(|&threshold| AblationSetting {
            label: format!("H={threshold:e}"),
            patch: PatchConfig {
                method: CenterMethod::Inlier,
                threshold,
                ..base.clone()
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    /// Mean held-out Chamfer loss over seeds, times 1000.
    pub loss_x1000: f64,
    pub accuracy: Option<f64>,
    pub per_seed_loss: Vec<f64>,
    /// Pre-training history of each seed (empty when loaded from disk).
    pub histories: Vec<Vec<Metrics>>,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "setting,loss_x1000,acc";

    pub fn csv_row(&self) -> String {
        let acc = self.accuracy.map(|a| format!("{a:?}")).unwrap_or_default();
        format!("{},{:?},{}", self.setting, self.loss_x1000, acc)
    }
}

/// Windows for training and evaluation, with optional class labels.
#[derive(Debug, Clone, Copy)]
pub struct AblationData<'a> {
    pub train: &'a [PointSet],
    pub eval: &'a [PointSet],
    pub labels: Option<(&'a [usize], &'a [usize])>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationPlan {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    /// Fine-tuning config for the accuracy column; used only with labels.
    pub finetune: Option<TrainConfig>,
    pub seeds: Vec<u64>,
    /// Seed of the masks drawn for held-out scoring.
    pub eval_seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub enum ModelSource<'a> {
    /// Pre-train every model, optionally saving checkpoints to a directory.
    Train { save_to: Option<&'a Path> },
    /// Load `<label>-seed<seed>.evmc` checkpoints from a directory.
    Load(&'a Path),
}

fn labeled(sets: Vec<PatchSet>, labels: &[usize]) -> Result<Vec<(PatchSet, usize)>, AblationError> {
    if sets.len() != labels.len() {
        return Err(AblationError::LabelCount {
            windows: sets.len(),
            labels: labels.len(),
        });
    }
    Ok(sets.into_iter().zip(labels.iter().copied()).collect())
}

/// Pre-trains the model of one setting and seed.
pub fn pretrain_setting(
    setting: &AblationSetting,
    train: &[PointSet],
    plan: &AblationPlan,
    seed: u64,
) -> Result<(MaeModel, Vec<Metrics>), AblationError> {
    let patch = setting.patch_for(seed);
    let sets = generate_patch_sets(train, &patch)?;
    let mut model = MaeModel::new(ModelConfig {
        seed,
        patch_k: patch.k,
        ..plan.model.clone()
    })?;
    let cfg = TrainConfig {
        seed,
        ..plan.pretrain.clone()
    };
    let history = pretrain(&mut model, &sets, &cfg, |_, _| Ok(()))?;
    Ok((model, history))
}

/// Runs every setting over every seed and averages per setting.
pub fn run_ablation(
    settings: &[AblationSetting],
    data: AblationData<'_>,
    plan: &AblationPlan,
    source: ModelSource<'_>,
) -> Result<Vec<AblationRow>, AblationError> {
    let mut rows = Vec::with_capacity(settings.len());
    for setting in settings {
        let mut losses = Vec::with_capacity(plan.seeds.len());
        let mut accs = Vec::new();
        let mut histories = Vec::new();
        for &seed in &plan.seeds {
            let model = match source {
                ModelSource::Train { save_to } => {
                    let (model, history) = pretrain_setting(setting, data.train, plan, seed)?;
                    if let Some(dir) = save_to {
                        save_checkpoint(&model, &dir.join(setting.checkpoint_name(seed)))?;
                    }
                    histories.push(history);
                    model
                }
                ModelSource::Load(dir) => {
                    let path = dir.join(setting.checkpoint_name(seed));
                    if !path.is_file() {
                        return Err(AblationError::MissingCheckpoint(path));
                    }
                    load_checkpoint(&path)?
                }
            };
            let patch = setting.patch_for(seed);
            let eval_sets = generate_patch_sets(data.eval, &patch)?;
            losses.push(eval_pretrain_loss(&model, &eval_sets, plan.eval_seed)?);

            if let (Some((train_labels, eval_labels)), Some(ft)) = (data.labels, &plan.finetune) {
                let n_classes = train_labels.iter().chain(eval_labels).max().map_or(1, |m| m + 1).max(2);
                let mut clf = model.with_new_head(n_classes, seed)?;
                let train_sets = labeled(generate_patch_sets(data.train, &patch)?, train_labels)?;
                let cfg = TrainConfig { seed, ..ft.clone() };
                finetune(&mut clf, &train_sets, &cfg, |_, _| Ok(()))?;
                let m = evaluate(&clf, &labeled(eval_sets, eval_labels)?)?;
                accs.push(m.accuracy.unwrap_or(0.0));
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        rows.push(AblationRow {
            setting: setting.label.clone(),
            loss_x1000: mean(&losses) * 1000.0,
            accuracy: (!accs.is_empty()).then(|| mean(&accs)),
            per_seed_loss: losses,
            histories,
        });
    }
    Ok(rows)
}
