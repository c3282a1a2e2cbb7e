use std::path::{Path, PathBuf};

use clap::Args;
use evmae::patch::CenterMethod;
use evmae::{ModelConfig, PatchConfig, SamplerConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Every tunable of the pipeline. Missing sections and keys take defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sampler: SamplerConfig,
    pub patch: PatchConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// `--config` plus per-field overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for sampling, patching, initialization and training.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Window length in seconds.
    #[arg(long)]
    pub window: Option<f64>,
    /// Window stride in seconds.
    #[arg(long)]
    pub step: Option<f64>,
    /// Points per window.
    #[arg(long)]
    pub n: Option<usize>,

    /// Patches per window.
    #[arg(long)]
    pub m: Option<usize>,
    /// Points per patch.
    #[arg(long)]
    pub k: Option<usize>,
    /// Inlier residual threshold, normalized time units.
    #[arg(long = "H")]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub method: Option<CenterMethod>,
    #[arg(long)]
    pub max_attempts: Option<usize>,

    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub encoder_depth: Option<usize>,
    #[arg(long)]
    pub decoder_depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,

    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_decay_steps: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub freeze_encoder: bool,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        if let Some(s) = self.seed {
            cfg.sampler.seed = s;
            cfg.patch.seed = s;
            cfg.model.seed = s;
            cfg.train.seed = s;
        }
        set(&mut cfg.sampler.window_s, &self.window);
        set(&mut cfg.sampler.step_s, &self.step);
        set(&mut cfg.sampler.n_points, &self.n);
        set(&mut cfg.patch.m, &self.m);
        set(&mut cfg.patch.k, &self.k);
        set(&mut cfg.patch.threshold, &self.threshold);
        set(&mut cfg.patch.method, &self.method);
        if self.max_attempts.is_some() {
            cfg.patch.max_attempts = self.max_attempts;
        }
        set(&mut cfg.model.embed_dim, &self.embed_dim);
        set(&mut cfg.model.encoder_depth, &self.encoder_depth);
        set(&mut cfg.model.decoder_depth, &self.decoder_depth);
        set(&mut cfg.model.heads, &self.heads);
        set(&mut cfg.model.mask_ratio, &self.mask_ratio);
        set(&mut cfg.train.lr, &self.lr);
        set(&mut cfg.train.steps, &self.steps);
        set(&mut cfg.train.batch_size, &self.batch_size);
        if self.lr_decay_steps.is_some() {
            cfg.train.lr_decay_steps = self.lr_decay_steps;
        }
        set(&mut cfg.train.checkpoint_every, &self.checkpoint_every);
        cfg.train.freeze_encoder |= self.freeze_encoder;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::from_json(r#"{"patch": {"H": 0.002, "method": "fps"}, "train": {"steps": 7}}"#).unwrap();
        assert_eq!(cfg.patch.threshold, 0.002);
        assert_eq!(cfg.patch.method, CenterMethod::Fps);
        assert_eq!(cfg.patch.m, PatchConfig::default().m);
        assert_eq!(cfg.train.steps, 7);
    }

    #[test]
    fn unknown_keys_rejected() {
        for doc in [r#"{"optimizer": {}}"#, r#"{"train": {"learning_rate": 1}}"#, r#"{"patch": {"h": 1}}"#] {
            assert!(matches!(RunConfig::from_json(doc), Err(CliError::Usage(_))), "{doc}");
        }
    }

    #[test]
    fn flags_override_file() {
        let mut cfg = RunConfig::from_json(r#"{"train": {"steps": 7, "lr": 0.5}}"#).unwrap();
        let args = ConfigArgs {
            steps: Some(3),
            seed: Some(9),
            ..Default::default()
        };
        args.apply(&mut cfg);
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!((cfg.sampler.seed, cfg.patch.seed, cfg.model.seed, cfg.train.seed), (9, 9, 9, 9));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
