//! Flat `key = value` configuration files (a TOML subset with no tables).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::RunConfig;
use crate::engine::{ControllerConfig, EngineConfig};
use crate::model::{AdamConfig, ModelKind, ToyModelConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Every run hyperparameter as one flat record. Missing keys take the
/// defaults of [`RunConfig::default`]; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlatConfig {
    pub kind: ModelKind,
    pub layer_dims: Vec<usize>,
    pub vocab_size: usize,
    pub context_len: usize,
    pub include_embedding_block: bool,
    pub include_head_block: bool,
    pub seed: u64,

    pub k_inner: usize,
    pub j_inner: usize,
    pub rho_constant: f64,
    pub initial_alpha: f64,
    pub initial_beta: f64,

    pub gamma: f64,
    pub target_rank_ratio: f64,
    pub target_density: f64,
    pub delta_alpha: f64,
    pub delta_beta: f64,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,

    pub total_cycles: usize,
    pub eval_every: usize,
    pub log_every: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub eval_examples: usize,
    pub data_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_path: Option<PathBuf>,
    pub noise_std: f64,
    pub regularize: bool,
    pub controller_enabled: bool,
    pub kappa: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for FlatConfig {
    fn default() -> Self {
        FlatConfig::from(&RunConfig::default())
    }
}

impl From<&RunConfig> for FlatConfig {
    fn from(c: &RunConfig) -> Self {
        FlatConfig {
            kind: c.model.kind,
            layer_dims: c.model.layer_dims.clone(),
            vocab_size: c.model.vocab_size,
            context_len: c.model.context_len,
            include_embedding_block: c.model.include_embedding_block,
            include_head_block: c.model.include_head_block,
            seed: c.model.seed,
            k_inner: c.engine.k_inner,
            j_inner: c.engine.j_inner,
            rho_constant: c.engine.rho_constant,
            initial_alpha: c.engine.initial_alpha,
            initial_beta: c.engine.initial_beta,
            gamma: c.controller.gamma,
            target_rank_ratio: c.controller.target_rank_ratio,
            target_density: c.controller.target_density,
            delta_alpha: c.controller.delta_alpha,
            delta_beta: c.controller.delta_beta,
            lr: c.adam.lr,
            beta1: c.adam.beta1,
            beta2: c.adam.beta2,
            eps: c.adam.eps,
            weight_decay: c.adam.weight_decay,
            total_cycles: c.total_cycles,
            eval_every: c.eval_every,
            log_every: c.log_every,
            batch_size: c.batch_size,
            eval_batch_size: c.eval_batch_size,
            eval_examples: c.eval_examples,
            data_seed: c.data_seed,
            text_path: c.text_path.clone(),
            noise_std: c.noise_std,
            regularize: c.regularize,
            controller_enabled: c.controller_enabled,
            kappa: c.kappa,
            output_dir: c.output_dir.clone(),
        }
    }
}

impl From<FlatConfig> for RunConfig {
    fn from(f: FlatConfig) -> Self {
        RunConfig {
            model: ToyModelConfig {
                kind: f.kind,
                layer_dims: f.layer_dims,
                vocab_size: f.vocab_size,
                context_len: f.context_len,
                include_embedding_block: f.include_embedding_block,
                include_head_block: f.include_head_block,
                seed: f.seed,
            },
            engine: EngineConfig {
                k_inner: f.k_inner,
                j_inner: f.j_inner,
                rho_constant: f.rho_constant,
                initial_alpha: f.initial_alpha,
                initial_beta: f.initial_beta,
            },
            controller: ControllerConfig {
                gamma: f.gamma,
                target_rank_ratio: f.target_rank_ratio,
                target_density: f.target_density,
                delta_alpha: f.delta_alpha,
                delta_beta: f.delta_beta,
            },
            adam: AdamConfig {
                lr: f.lr,
                beta1: f.beta1,
                beta2: f.beta2,
                eps: f.eps,
                weight_decay: f.weight_decay,
            },
            total_cycles: f.total_cycles,
            eval_every: f.eval_every,
            log_every: f.log_every,
            batch_size: f.batch_size,
            eval_batch_size: f.eval_batch_size,
            eval_examples: f.eval_examples,
            data_seed: f.data_seed,
            text_path: f.text_path,
            noise_std: f.noise_std,
            regularize: f.regularize,
            controller_enabled: f.controller_enabled,
            kappa: f.kappa,
            output_dir: f.output_dir,
        }
    }
}

impl RunConfig {
    /// Parses and validates a flat config.
    pub fn from_config_str(text: &str) -> Result<RunConfig, ConfigError> {
        let flat: FlatConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        let cfg = RunConfig::from(flat);
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_config_string(&self) -> String {
        toml::to_string(&FlatConfig::from(self)).expect("flat config serializes")
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_config_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_config_string();
        assert_eq!(RunConfig::from_config_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_config_str("total_cycles = 3\nkind = \"mlp_regression\"\nlayer_dims = [4, 8, 2]\n").unwrap();
        assert_eq!(cfg.total_cycles, 3);
        assert_eq!(cfg.model.kind, ModelKind::MlpRegression);
        assert_eq!(cfg.controller, ControllerConfig::default());
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(RunConfig::from_config_str("bogus = 1"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::from_config_str("total_cycles = 0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_config_str("kappa = 2.0"), Err(ConfigError::Invalid(_))));
    }
}
