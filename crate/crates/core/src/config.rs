//! Model shape and run-time acceleration settings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the desk-scale VLA model. All weights are a deterministic
/// function of these fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_visual_tokens: usize,
    /// Side length of the square grayscale input image.
    pub image_size: usize,
    pub max_text_tokens: usize,
    pub vocab_size: usize,
    pub action_dim: usize,
    pub action_horizon: usize,
    pub dit_blocks: usize,
    pub dit_d_model: usize,
    pub dit_heads: usize,
    pub denoise_steps: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 8,
            d_ff: 256,
            n_visual_tokens: 256,
            image_size: 64,
            max_text_tokens: 32,
            vocab_size: 256,
            action_dim: 7,
            action_horizon: 16,
            dit_blocks: 4,
            dit_d_model: 64,
            dit_heads: 4,
            denoise_steps: 10,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// Wider, deeper stack used for wall-clock benchmarking.
    pub fn scaled() -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            n_layers: 12,
            d_ff: 1376,
            dit_blocks: 8,
            dit_d_model: 256,
            dit_heads: 8,
            ..Self::default()
        }
    }

    /// Small enough for exhaustive tests.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            n_layers: 4,
            d_ff: 32,
            n_visual_tokens: 16,
            image_size: 16,
            max_text_tokens: 8,
            vocab_size: 256,
            action_dim: 7,
            action_horizon: 4,
            dit_blocks: 2,
            dit_d_model: 16,
            dit_heads: 2,
            denoise_steps: 10,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_visual_tokens", self.n_visual_tokens),
            ("image_size", self.image_size),
            ("max_text_tokens", self.max_text_tokens),
            ("vocab_size", self.vocab_size),
            ("action_dim", self.action_dim),
            ("action_horizon", self.action_horizon),
            ("dit_blocks", self.dit_blocks),
            ("dit_d_model", self.dit_d_model),
            ("dit_heads", self.dit_heads),
            ("denoise_steps", self.denoise_steps),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config("d_model must be divisible by n_heads"));
        }
        if self.dit_d_model % self.dit_heads != 0 {
            return Err(Error::config("dit_d_model must be divisible by dit_heads"));
        }
        let grid = self.patch_grid()?;
        if self.image_size % grid != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible into a {grid}x{grid} patch grid",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Patches per image side; `n_visual_tokens` must be a perfect square.
    pub fn patch_grid(&self) -> Result<usize> {
        let g = (self.n_visual_tokens as f64).sqrt().round() as usize;
        if g * g != self.n_visual_tokens {
            return Err(Error::config(format!(
                "n_visual_tokens {} is not a square patch grid",
                self.n_visual_tokens
            )));
        }
        Ok(g)
    }

    pub fn patch_size(&self) -> Result<usize> {
        Ok(self.image_size / self.patch_grid()?)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Layers removed by the default plan: the stack keeps the same fraction
    /// as a 32-layer stack keeping 22 (rounded to nearest).
    pub fn default_drop_count(&self) -> usize {
        let keep = (self.n_layers as f64 * 22.0 / 32.0).round() as usize;
        self.n_layers - keep.clamp(1.min(self.n_layers), self.n_layers)
    }
}

/// Visual token pruning settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenPruneConfig {
    pub k_final: usize,
    pub k_key: usize,
    pub alpha: f64,
    /// 1-based index into the retained stack; pruning takes effect on its output.
    pub capture_layer: usize,
    /// Grow the diversity reference set with each pick instead of scoring
    /// against the key set only.
    #[serde(default)]
    pub greedy_diversity: bool,
}

impl Default for TokenPruneConfig {
    fn default() -> Self {
        Self {
            k_final: 56,
            k_key: 4,
            alpha: 0.5,
            capture_layer: 2,
            greedy_diversity: false,
        }
    }
}

impl TokenPruneConfig {
    pub fn validate(&self, n_total: usize) -> Result<()> {
        if !(1 <= self.k_key && self.k_key <= self.k_final && self.k_final <= n_total) {
            return Err(Error::config(format!(
                "need 1 <= k_key ({}) <= k_final ({}) <= visual tokens ({n_total})",
                self.k_key, self.k_final
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.capture_layer == 0 {
            return Err(Error::config("capture_layer is 1-based"));
        }
        Ok(())
    }

    pub fn k_aug(&self) -> usize {
        self.k_final - self.k_key
    }

    pub fn k_task(&self) -> usize {
        (self.alpha * self.k_aug() as f64).floor() as usize
    }

    pub fn k_div(&self) -> usize {
        self.k_aug() - self.k_task()
    }
}

/// Static feature-cache schedule for the action head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachePolicy {
    pub interval: usize,
}

impl CachePolicy {
    pub const DEFAULT_INTERVAL: usize = 5;

    pub fn new(interval: usize, denoise_steps: usize) -> Result<Self> {
        if interval == 0 || interval > denoise_steps {
            return Err(Error::config(format!(
                "cache interval {interval} outside [1, {denoise_steps}]"
            )));
        }
        Ok(Self { interval })
    }

    pub fn disabled() -> Self {
        Self { interval: 1 }
    }
}

/// Everything `prune` decided, embedded in the pruned model's manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    /// Per original layer, from the calibration pass.
    pub importance: Vec<f64>,
    /// Original layer indices, least important first.
    pub ranked: Vec<usize>,
    /// The first `n` entries of `ranked`, in ranked order.
    pub dropped: Vec<usize>,
    pub mlp_sparsity: f64,
    /// Kept intermediate columns per retained layer, ascending.
    pub mlp_keep: Vec<Vec<usize>>,
    pub token: Option<TokenPruneConfig>,
    pub cache_interval: usize,
}
