//! `--config` file: model shape, pruning plan, calibration and paths.

use std::path::{Path, PathBuf};

use evla_core::{CachePolicy, DropSpec, ModelConfig, PlanRequest, TokenPruneConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub prune: PruneSection,
    pub calibration: CalibrationSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub drop_layers: Option<Vec<usize>>,
    pub n_drop: Option<usize>,
    pub mlp_sparsity: f64,
    /// `None` disables visual token pruning.
    pub token_final: Option<usize>,
    pub token_key: usize,
    pub alpha: f64,
    pub capture_layer: usize,
    pub cache_interval: usize,
    pub greedy_diversity: bool,
}

impl Default for PruneSection {
    fn default() -> Self {
        let t = TokenPruneConfig::default();
        Self {
            drop_layers: None,
            n_drop: None,
            mlp_sparsity: 0.25,
            token_final: Some(t.k_final),
            token_key: t.k_key,
            alpha: t.alpha,
            capture_layer: t.capture_layer,
            cache_interval: CachePolicy::DEFAULT_INTERVAL,
            greedy_diversity: t.greedy_diversity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub samples: usize,
    pub seed: u64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            samples: evla_core::layer_prune::DEFAULT_CALIBRATION_SAMPLES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub image: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Input(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Failure::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let p = &self.prune;
        if p.drop_layers.is_some() && p.n_drop.is_some() {
            return Err(Failure::Config("set exactly one of drop_layers and n_drop".into()));
        }
        if !(0.0..1.0).contains(&p.mlp_sparsity) {
            return Err(Failure::Config(format!("mlp_sparsity {} outside [0, 1)", p.mlp_sparsity)));
        }
        if !(0.0..=1.0).contains(&p.alpha) {
            return Err(Failure::Config(format!("alpha {} outside [0, 1]", p.alpha)));
        }
        if p.cache_interval == 0 || p.token_key == 0 || p.capture_layer == 0 {
            return Err(Failure::Config(
                "cache_interval, token_key and capture_layer must be at least 1".into(),
            ));
        }
        if self.calibration.samples == 0 {
            return Err(Failure::Config("calibration needs at least one sample".into()));
        }
        Ok(())
    }

    pub fn token_config(&self) -> Option<TokenPruneConfig> {
        let p = &self.prune;
        p.token_final.map(|k_final| TokenPruneConfig {
            k_final,
            k_key: p.token_key,
            alpha: p.alpha,
            capture_layer: p.capture_layer,
            greedy_diversity: p.greedy_diversity,
        })
    }

    /// Plan for a model of `config`; without an explicit drop choice the
    /// default depth fraction applies.
    pub fn plan_request(&self, config: &ModelConfig) -> PlanRequest {
        let p = &self.prune;
        let drop = match (&p.drop_layers, p.n_drop) {
            (Some(list), _) => DropSpec::Layers(list.clone()),
            (None, Some(n)) => DropSpec::Count(n),
            (None, None) => DropSpec::Count(config.default_drop_count()),
        };
        PlanRequest {
            drop,
            mlp_sparsity: p.mlp_sparsity,
            token: self.token_config(),
            cache_interval: p.cache_interval,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"model": {"n_layers": 12}, "prune": {"n_drop": 3}}"#).unwrap();
        assert_eq!(cfg.model.n_layers, 12);
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.prune.alpha, 0.5);
        assert_eq!(cfg.plan_request(&cfg.model).drop, DropSpec::Count(3));
    }

    #[test]
    fn both_drop_fields_is_config_error() {
        let cfg: RunConfig = serde_json::from_str(r#"{"prune": {"n_drop": 1, "drop_layers": [2]}}"#).unwrap();
        assert!(matches!(cfg.validate(), Err(Failure::Config(_))));
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"prune": {"ndrop": 1}}"#).is_err());
    }

    #[test]
    fn default_drop_matches_depth_fraction() {
        let cfg = RunConfig::default();
        let m = ModelConfig {
            n_layers: 32,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.plan_request(&m).drop, DropSpec::Count(10));
    }
}
