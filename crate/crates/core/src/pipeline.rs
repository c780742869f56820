//! End-to-end inference: image + instruction ids to a 7-DoF action chunk,
//! with optional visual token pruning and feature caching.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::action::{denoise_loop, DenoiseOptions, DenoiseOutput};
use crate::config::{CachePolicy, PruningPlan, TokenPruneConfig};
use crate::error::{Error, Result};
use crate::layer_prune::{prune_layers, rank_layers, sparsify_mlp, LayerImportance};
use crate::model::{extract_cognition_feature, forward_stack, ModelBundle};
use crate::tensor::{layer_norm, Tensor};
use crate::token_prune::{forward_with_token_pruning, TokenSelection};

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOptions {
    pub token_prune: Option<TokenPruneConfig>,
    pub cache: CachePolicy,
    pub noise_seed: u64,
    pub record_denoise: bool,
}

impl InferenceOptions {
    /// No token pruning, no feature reuse.
    pub fn baseline(model: &ModelBundle) -> Self {
        Self {
            token_prune: None,
            cache: CachePolicy::disabled(),
            noise_seed: model.config.seed,
            record_denoise: false,
        }
    }

    /// Whatever the model's embedded pruning plan asks for, or the baseline.
    pub fn from_plan(model: &ModelBundle) -> Self {
        let mut opts = Self::baseline(model);
        if let Some(plan) = &model.plan {
            opts.token_prune = plan.token;
            opts.cache = CachePolicy {
                interval: plan.cache_interval,
            };
        }
        opts
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub vision_ms: f64,
    pub language_ms: f64,
    pub action_ms: f64,
}

impl StageTimes {
    pub fn total_ms(&self) -> f64 {
        self.vision_ms + self.language_ms + self.action_ms
    }
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub actions: Tensor,
    pub cognition: Vec<f32>,
    pub selection: Option<TokenSelection>,
    /// Final hidden states of the language stack.
    pub hidden: Tensor,
    pub denoise: DenoiseOutput,
    pub times: StageTimes,
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

pub fn infer(model: &ModelBundle, image: &Tensor, ids: &[u32], opts: &InferenceOptions) -> Result<InferenceOutput> {
    let cfg = &model.config;

    let start = Instant::now();
    let visual = model.encode_image(image)?;
    let vision_ms = ms_since(start);

    let start = Instant::now();
    let text = model.embed_text(ids)?;
    let layers = &model.language.layers;
    let (hidden, selection) = match &opts.token_prune {
        Some(tp) => {
            let out = forward_with_token_pruning(&visual, &text, layers, cfg.n_heads, tp)?;
            (out.hidden, Some(out.selection))
        }
        None => (forward_stack(&visual, &text, layers, cfg.n_heads, None)?.hidden, None),
    };
    let last = Tensor::new(vec![1, cfg.d_model], extract_cognition_feature(&hidden)?)?;
    let cognition = layer_norm(
        &last,
        model.language.final_norm_gain.data(),
        model.language.final_norm_bias.data(),
    )?
    .into_data();
    let language_ms = ms_since(start);

    let start = Instant::now();
    let denoise = denoise_loop(
        &cognition,
        &model.action,
        cfg,
        opts.cache,
        opts.noise_seed,
        &DenoiseOptions {
            record: opts.record_denoise,
        },
    )?;
    let action_ms = ms_since(start);

    Ok(InferenceOutput {
        actions: denoise.actions.clone(),
        cognition,
        selection,
        hidden,
        denoise,
        times: StageTimes {
            vision_ms,
            language_ms,
            action_ms,
        },
    })
}

/// Which decoder layers to remove.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropSpec {
    /// The `n` least important layers.
    Count(usize),
    /// Explicit original layer indices.
    Layers(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanRequest {
    pub drop: DropSpec,
    pub mlp_sparsity: f64,
    pub token: Option<TokenPruneConfig>,
    pub cache_interval: usize,
}

/// Drops layers, sparsifies the remaining MLPs, and records the plan in the
/// returned bundle.
pub fn apply_plan(model: &ModelBundle, importance: &LayerImportance, req: &PlanRequest) -> Result<ModelBundle> {
    if model.plan.is_some() {
        return Err(Error::config("model is already pruned"));
    }
    let cfg = &model.config;
    let depth = model.language.layers.len();
    if importance.scores.len() != depth {
        return Err(Error::config(format!(
            "importance covers {} layers, model has {depth}",
            importance.scores.len()
        )));
    }
    let ranked = rank_layers(importance);
    let dropped: Vec<usize> = match &req.drop {
        DropSpec::Count(n) => ranked.iter().take(*n).copied().collect(),
        DropSpec::Layers(list) => list.clone(),
    };
    if dropped.len() >= depth {
        return Err(Error::config(format!(
            "dropping {} of {depth} layers leaves nothing to run",
            dropped.len()
        )));
    }
    for (i, &l) in dropped.iter().enumerate() {
        if l >= depth || dropped[..i].contains(&l) {
            return Err(Error::config(format!("invalid or repeated layer index {l} in drop list")));
        }
    }
    let retained = depth - dropped.len();
    if let Some(tp) = &req.token {
        tp.validate(cfg.n_visual_tokens)?;
        if tp.capture_layer > retained {
            return Err(Error::config(format!(
                "capture layer {} beyond the {retained} retained layers",
                tp.capture_layer
            )));
        }
    }
    CachePolicy::new(req.cache_interval, cfg.denoise_steps)?;

    let order: Vec<usize> = dropped
        .iter()
        .copied()
        .chain(ranked.iter().copied().filter(|l| !dropped.contains(l)))
        .collect();
    let pruned = prune_layers(model, dropped.len(), &order)?;
    let (mut pruned, mlp_keep) = sparsify_mlp(&pruned, req.mlp_sparsity)?;
    pruned.plan = Some(PruningPlan {
        importance: importance.scores.clone(),
        ranked,
        dropped,
        mlp_sparsity: req.mlp_sparsity,
        mlp_keep,
        token: req.token,
        cache_interval: req.cache_interval,
    });
    Ok(pruned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::layer_prune::calibration_sample;

    #[test]
    fn full_budget_and_interval_one_match_baseline() {
        let cfg = ModelConfig::tiny();
        let m = ModelBundle::generate(&cfg).unwrap();
        let (img, ids) = calibration_sample(&cfg, 1, 0);
        let base = infer(&m, &img, &ids, &InferenceOptions::baseline(&m)).unwrap();
        let opts = InferenceOptions {
            token_prune: Some(TokenPruneConfig {
                k_final: 16,
                k_key: 4,
                alpha: 0.5,
                capture_layer: 2,
                greedy_diversity: false,
            }),
            ..InferenceOptions::baseline(&m)
        };
        let same = infer(&m, &img, &ids, &opts).unwrap();
        assert!(same.actions.bitwise_eq(&base.actions));
        assert_eq!(base.actions.dims(), &[cfg.action_horizon, 7]);
    }

    #[test]
    fn accelerated_run_is_finite() {
        let cfg = ModelConfig::tiny();
        let m = ModelBundle::generate(&cfg).unwrap();
        let (img, ids) = calibration_sample(&cfg, 1, 0);
        let opts = InferenceOptions {
            token_prune: Some(TokenPruneConfig {
                k_final: 6,
                k_key: 2,
                alpha: 0.5,
                capture_layer: 2,
                greedy_diversity: false,
            }),
            cache: CachePolicy { interval: 5 },
            ..InferenceOptions::baseline(&m)
        };
        let out = infer(&m, &img, &ids, &opts).unwrap();
        assert!(out.actions.all_finite());
        assert_eq!(out.selection.unwrap().pruned.len(), 6);
        assert_eq!(out.hidden.rows(), ids.len() + 6);
        assert!(out.times.total_ms() > 0.0);
    }

    #[test]
    fn plan_records_ranked_drops_and_param_count() {
        use crate::layer_prune::{count_language_params, LanguageShape};
        let cfg = ModelConfig::tiny();
        let m = ModelBundle::generate(&cfg).unwrap();
        let imp = LayerImportance {
            scores: vec![0.3, 0.1, 0.4, 0.2],
            calibration_size: 1,
        };
        let req = PlanRequest {
            drop: DropSpec::Count(2),
            mlp_sparsity: 0.25,
            token: None,
            cache_interval: 5,
        };
        let p = apply_plan(&m, &imp, &req).unwrap();
        let plan = p.plan.as_ref().unwrap();
        assert_eq!(plan.dropped, vec![1, 3]);
        assert_eq!(p.retained_layers(), vec![0, 2]);
        let shape = LanguageShape::from_config(&cfg);
        assert_eq!(p.language_param_count() as u64, count_language_params(&shape, 2, 0.25));
        assert!(matches!(apply_plan(&p, &imp, &req), Err(Error::Config(_))));
        let bad = PlanRequest {
            drop: DropSpec::Layers(vec![1, 1]),
            ..req.clone()
        };
        assert!(matches!(apply_plan(&m, &imp, &bad), Err(Error::Config(_))));
        let explicit = PlanRequest {
            drop: DropSpec::Layers(vec![2, 0]),
            ..req
        };
        let p = apply_plan(&m, &imp, &explicit).unwrap();
        assert_eq!(p.plan.as_ref().unwrap().dropped, vec![2, 0]);
        assert_eq!(p.retained_layers(), vec![1, 3]);
    }
}
