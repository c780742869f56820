//! Analytical FLOPs/parameter model, a median-of-trials latency harness, and
//! the inter-layer and temporal redundancy analyzers.
//!
//! FLOPs follow a linear-plus-quadratic model: every stage costs
//! `2 · (matmul parameters) · (tokens processed)`, and every decoder or DiT
//! layer adds `4 · S² · d` for the score and context products. Embedding
//! lookups cost nothing.

use serde::{Deserialize, Serialize};

use crate::action::{count_effective_steps, StepRecord, DIT_MLP_RATIO};
use crate::config::{ModelConfig, TokenPruneConfig};
use crate::error::{Error, Result};
use crate::layer_prune::{mean_layer_cosines, LanguageShape};
use crate::model::{HiddenTrace, ModelBundle};
use crate::pipeline::StageTimes;
use crate::tensor::cosine_similarity;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub params: u64,
    pub tokens: usize,
    pub steps: usize,
    pub time_ms: f64,
    pub flops: u64,
}

/// Per-stage report; serializes as `{stage: {params, tokens, steps, time_ms, flops}}`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModuleBreakdown {
    pub vision: StageReport,
    pub language: StageReport,
    pub action: StageReport,
}

impl ModuleBreakdown {
    pub fn stages(&self) -> [(&'static str, &StageReport); 3] {
        [
            ("vision", &self.vision),
            ("language", &self.language),
            ("action", &self.action),
        ]
    }

    pub fn total_flops(&self) -> u64 {
        self.vision.flops + self.language.flops + self.action.flops
    }

    pub fn total_params(&self) -> u64 {
        self.vision.params + self.language.params + self.action.params
    }

    pub fn total_ms(&self) -> f64 {
        self.vision.time_ms + self.language.time_ms + self.action.time_ms
    }

    pub fn with_times(mut self, t: &StageTimes) -> Self {
        self.vision.time_ms = t.vision_ms;
        self.language.time_ms = t.language_ms;
        self.action.time_ms = t.action_ms;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageFlops {
    pub vision: u64,
    pub language: u64,
    pub action: u64,
}

impl StageFlops {
    pub fn total(&self) -> u64 {
        self.vision + self.language + self.action
    }
}

/// `2 · P · N` for the patch projection.
pub fn vision_flops(vision_params: u64, n_tokens: usize) -> u64 {
    2 * vision_params * n_tokens as u64
}

/// Token counts seen by a language stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequencePlan {
    pub text_tokens: usize,
    pub visual_tokens: usize,
    /// `(capture_layer, k_final)`: layers after the 1-based capture layer see
    /// only `k_final` visual tokens.
    pub token_pruning: Option<(usize, usize)>,
}

impl SequencePlan {
    /// Sequence length processed by the 1-based retained layer `layer`.
    pub fn seq_len(&self, layer: usize) -> usize {
        let visual = match self.token_pruning {
            Some((capture, k)) if layer > capture => k,
            _ => self.visual_tokens,
        };
        self.text_tokens + visual
    }
}

/// Per retained layer `2 · P_layer · S + 4 · S² · d`, plus the final norm and
/// output head on the last layer's tokens. `layer_d_ff` lists the (possibly
/// pruned) MLP width of each retained layer.
pub fn language_flops(shape: &LanguageShape, layer_d_ff: &[usize], seq: &SequencePlan) -> u64 {
    let d = shape.d_model as u64;
    let mut total = 0u64;
    let mut last = seq.seq_len(0) as u64;
    for (i, &f) in layer_d_ff.iter().enumerate() {
        let s = seq.seq_len(i + 1) as u64;
        total += 2 * shape.layer_params(f) * s + 4 * s * s * d;
        last = s;
    }
    let head = shape.non_layer_params() - (shape.vocab * shape.d_model) as u64;
    total + 2 * head * last
}

/// Shape of the action head for FLOPs accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionShape {
    pub cond_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub block_params: u64,
    pub horizon: usize,
    pub action_dim: usize,
}

impl ActionShape {
    pub fn from_config(config: &ModelConfig) -> Self {
        let d = config.dit_d_model as u64;
        let f = DIT_MLP_RATIO as u64 * d;
        Self {
            cond_dim: config.d_model,
            width: config.dit_d_model,
            blocks: config.dit_blocks,
            // 4 attention projections, MLP with biases, two LayerNorms
            block_params: 4 * d * d + 2 * d * f + f + d + 4 * d,
            horizon: config.action_horizon,
            action_dim: config.action_dim,
        }
    }
}

/// Blocks cost `2 · P_block · R + 4 · R² · w` per effective step (`R` rows);
/// the noise head runs every step; condition projection and action decoding
/// run once.
pub fn action_flops(shape: &ActionShape, total_steps: usize, effective_steps: usize) -> u64 {
    let (w, h) = (shape.width as u64, shape.horizon as u64);
    let rows = h + 1;
    let per_block = 2 * shape.block_params * rows + 4 * rows * rows * w;
    let once = 2 * shape.cond_dim as u64 * w + 2 * w * shape.action_dim as u64 * h;
    once + total_steps as u64 * 2 * w * w * h + effective_steps as u64 * shape.blocks as u64 * per_block
}

/// Analytical report (times zero) for running `model` on `text_tokens`
/// instruction tokens with the given token pruning and cache interval.
pub fn estimate_breakdown(
    model: &ModelBundle,
    text_tokens: usize,
    token_prune: Option<&TokenPruneConfig>,
    cache_interval: usize,
) -> ModuleBreakdown {
    let cfg = &model.config;
    let shape = LanguageShape::from_config(cfg);
    let d_ff: Vec<usize> = model.language.layers.iter().map(|l| l.d_ff()).collect();
    let seq = SequencePlan {
        text_tokens,
        visual_tokens: cfg.n_visual_tokens,
        token_pruning: token_prune.map(|t| (t.capture_layer, t.k_final)),
    };
    let effective = count_effective_steps(cfg.denoise_steps, cache_interval);
    let vision_params = model.vision_param_count() as u64;
    ModuleBreakdown {
        vision: StageReport {
            params: vision_params,
            tokens: cfg.n_visual_tokens,
            steps: 0,
            time_ms: 0.0,
            flops: vision_flops(vision_params, cfg.n_visual_tokens),
        },
        language: StageReport {
            params: model.language_param_count() as u64,
            tokens: token_prune.map_or(cfg.n_visual_tokens, |t| t.k_final),
            steps: 0,
            time_ms: 0.0,
            flops: language_flops(&shape, &d_ff, &seq),
        },
        action: StageReport {
            params: model.action_param_count() as u64,
            tokens: 0,
            steps: effective,
            time_ms: 0.0,
            flops: action_flops(&ActionShape::from_config(cfg), cfg.denoise_steps, effective),
        },
    }
}

pub fn estimate_flops(
    model: &ModelBundle,
    text_tokens: usize,
    token_prune: Option<&TokenPruneConfig>,
    cache_interval: usize,
) -> StageFlops {
    let b = estimate_breakdown(model, text_tokens, token_prune, cache_interval);
    StageFlops {
        vision: b.vision.flops,
        language: b.language.flops,
        action: b.action.flops,
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-stage median over `trials` runs after one discarded warm-up run.
pub fn measure_latency(trials: usize, mut run: impl FnMut() -> Result<StageTimes>) -> Result<StageTimes> {
    if trials < 3 {
        return Err(Error::input(format!("need at least 3 trials, got {trials}")));
    }
    run()?;
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        samples.push(run()?);
    }
    let pick = |f: fn(&StageTimes) -> f64| median(&mut samples.iter().map(f).collect::<Vec<_>>());
    Ok(StageTimes {
        vision_ms: pick(|t| t.vision_ms),
        language_ms: pick(|t| t.language_ms),
        action_ms: pick(|t| t.action_ms),
    })
}

/// Mean input/output cosine of every layer; the complement of layer importance.
pub fn interlayer_similarity(traces: &[HiddenTrace]) -> Result<Vec<f64>> {
    mean_layer_cosines(traces)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Attn,
    Mlp,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Attn => "attn",
            FeatureKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalPoint {
    pub t: usize,
    pub kind: FeatureKind,
    pub cos: f64,
}

/// For each consecutive step pair `(t, t-1)` and each feature kind, the
/// cosine between the flattened features, averaged over blocks.
pub fn temporal_similarity(steps: &[StepRecord]) -> Result<Vec<TemporalPoint>> {
    if steps.len() < 2 {
        return Err(Error::input("temporal similarity needs at least two recorded steps"));
    }
    let mut out = Vec::with_capacity(2 * (steps.len() - 1));
    for pair in steps.windows(2) {
        let (cur, next) = (&pair[0], &pair[1]);
        let blocks = cur.features.len();
        if blocks == 0 || next.features.len() != blocks {
            return Err(Error::input("steps were recorded without block features"));
        }
        for kind in [FeatureKind::Attn, FeatureKind::Mlp] {
            let sum: f64 = cur
                .features
                .iter()
                .zip(&next.features)
                .map(|(a, b)| match kind {
                    FeatureKind::Attn => cosine_similarity(a.attn.data(), b.attn.data()),
                    FeatureKind::Mlp => cosine_similarity(a.mlp.data(), b.mlp.data()),
                })
                .sum();
            out.push(TemporalPoint {
                t: cur.t,
                kind,
                cos: sum / blocks as f64,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRatios {
    pub vision: f64,
    pub language: f64,
    pub action: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub speedup: f64,
    pub flops_ratio: f64,
    pub param_ratio: f64,
    pub stage_flops_ratio: StageRatios,
}

fn ratio(num: f64, den: f64, what: &str) -> Result<f64> {
    if den > 0.0 {
        Ok(num / den)
    } else if num == 0.0 {
        Ok(1.0)
    } else {
        Err(Error::input(format!("baseline {what} is zero")))
    }
}

/// `speedup = base.ms / accel.ms`; flops and params as `accel / base`.
pub fn compare_reports(base: &ModuleBreakdown, accel: &ModuleBreakdown) -> Result<Comparison> {
    for ((name, b), (_, a)) in base.stages().iter().zip(accel.stages()) {
        if (b.flops == 0) != (a.flops == 0) || (b.params == 0) != (a.params == 0) {
            return Err(Error::input(format!("stage {name} is missing from one report")));
        }
    }
    let speedup = if accel.total_ms() > 0.0 {
        base.total_ms() / accel.total_ms()
    } else {
        return Err(Error::input("accelerated report has no measured time"));
    };
    Ok(Comparison {
        speedup,
        flops_ratio: ratio(accel.total_flops() as f64, base.total_flops() as f64, "flops")?,
        param_ratio: ratio(accel.total_params() as f64, base.total_params() as f64, "params")?,
        stage_flops_ratio: StageRatios {
            vision: ratio(accel.vision.flops as f64, base.vision.flops as f64, "vision flops")?,
            language: ratio(accel.language.flops as f64, base.language.flops as f64, "language flops")?,
            action: ratio(accel.action.flops as f64, base.action.flops as f64, "action flops")?,
        },
    })
}
