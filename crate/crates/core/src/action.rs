//! Diffusion-transformer action head with a static N-step feature cache.
//!
//! The denoising state is `[cond; latents]`: row 0 is the projected cognition
//! feature, rows `1..=horizon` the noised action latents. Each DiT block
//! computes `h_attn = Attn(z)` and `h_mlp = MLP(h_attn + z)` and returns
//! `z + h_attn + h_mlp`. Under a cache policy with interval `N` both features
//! are recomputed only at `t = T_start` and whenever `t mod N == 0`; every
//! other step reuses the most recently computed pair.

use crate::config::{CachePolicy, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{self_attention, STREAM_ACTION, STREAM_DIT_BASE};
use crate::tensor::{gelu, layer_norm, matmul, uniform_init, SeededGenerator, Tensor};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;
/// DiT MLP expansion factor.
pub const DIT_MLP_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct DitBlockWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// `[dit_d × 4·dit_d]`
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl DitBlockWeights {
    pub fn generate(config: &ModelConfig, index: usize) -> Self {
        let d = config.dit_d_model;
        let f = DIT_MLP_RATIO * d;
        let mut g = SeededGenerator::derive(config.seed, STREAM_DIT_BASE + index as u64);
        Self {
            ln1_gain: Tensor::filled(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            wq: uniform_init(&mut g, &[d, d], d, d),
            wk: uniform_init(&mut g, &[d, d], d, d),
            wv: uniform_init(&mut g, &[d, d], d, d),
            wo: uniform_init(&mut g, &[d, d], d, d),
            ln2_gain: Tensor::filled(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            w1: uniform_init(&mut g, &[d, f], d, f),
            b1: uniform_init(&mut g, &[f], d, f),
            w2: uniform_init(&mut g, &[f, d], f, d),
            b2: uniform_init(&mut g, &[d], f, d),
        }
    }

    pub(crate) fn named_tensors(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionWeights {
    pub heads: usize,
    /// `[d_model × dit_d]`: cognition feature to the condition row.
    pub cond_proj: Tensor,
    pub cond_bias: Tensor,
    pub blocks: Vec<DitBlockWeights>,
    /// `[dit_d × dit_d]`: final block output to predicted noise.
    pub eps_head: Tensor,
    /// `[dit_d × action_dim]`
    pub action_head: Tensor,
    pub action_bias: Tensor,
}

impl ActionWeights {
    pub fn generate(config: &ModelConfig) -> Self {
        let (d, dd, a) = (config.d_model, config.dit_d_model, config.action_dim);
        let mut g = SeededGenerator::derive(config.seed, STREAM_ACTION);
        let cond_proj = uniform_init(&mut g, &[d, dd], d, dd);
        let cond_bias = uniform_init(&mut g, &[dd], d, dd);
        let eps_head = uniform_init(&mut g, &[dd, dd], dd, dd);
        let action_head = uniform_init(&mut g, &[dd, a], dd, a);
        let action_bias = uniform_init(&mut g, &[a], dd, a);
        Self {
            heads: config.dit_heads,
            cond_proj,
            cond_bias,
            blocks: (0..config.dit_blocks)
                .map(|b| DitBlockWeights::generate(config, b))
                .collect(),
            eps_head,
            action_head,
            action_bias,
        }
    }

    pub fn param_count(&self) -> usize {
        [&self.cond_proj, &self.cond_bias, &self.eps_head, &self.action_head, &self.action_bias]
            .iter()
            .map(|t| t.numel())
            .sum::<usize>()
            + self.blocks.iter().map(DitBlockWeights::param_count).sum::<usize>()
    }

    pub fn width(&self) -> usize {
        self.cond_proj.cols()
    }
}

/// `h_attn = Attn(LN1(z))`, bidirectional.
pub fn attention_feature(z: &Tensor, block: &DitBlockWeights, heads: usize) -> Result<Tensor> {
    let h = layer_norm(z, block.ln1_gain.data(), block.ln1_bias.data())?;
    Ok(self_attention(&h, &block.wq, &block.wk, &block.wv, &block.wo, heads, false, false)?.0)
}

/// `h_mlp = W2 · gelu(W1 · LN2(x) + b1) + b2`
pub fn mlp_feature(x: &Tensor, block: &DitBlockWeights) -> Result<Tensor> {
    let h = layer_norm(x, block.ln2_gain.data(), block.ln2_bias.data())?;
    let mut hidden = matmul(&h, &block.w1)?;
    hidden.add_row_broadcast(block.b1.data())?;
    let hidden = hidden.map(gelu);
    let mut out = matmul(&hidden, &block.w2)?;
    out.add_row_broadcast(block.b2.data())?;
    Ok(out)
}

/// `(t, t_start, interval) -> recompute?`
pub type RecomputeRule = fn(usize, usize, usize) -> bool;

/// Recompute at the first step and whenever `t` is a multiple of `interval`.
pub fn should_recompute(t: usize, t_start: usize, interval: usize) -> bool {
    t == t_start || t % interval == 0
}

/// Timesteps in `T_start..=1` at which block features are computed.
pub fn count_effective_steps(t_start: usize, interval: usize) -> usize {
    (1..=t_start)
        .filter(|&t| should_recompute(t, t_start, interval))
        .count()
}

/// Cached features of one DiT block plus execution counters.
#[derive(Debug, Clone, Default)]
pub struct CacheSlot {
    pub attn: Option<Tensor>,
    pub mlp: Option<Tensor>,
    pub attn_calls: usize,
    pub mlp_calls: usize,
}

/// One cache per denoising trajectory.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub slots: Vec<CacheSlot>,
    pub last_computed_t: Option<usize>,
}

impl FeatureCache {
    pub fn new(blocks: usize) -> Self {
        Self {
            slots: vec![CacheSlot::default(); blocks],
            last_computed_t: None,
        }
    }
}

/// Features a block used at one step (for temporal-similarity analysis).
#[derive(Debug, Clone)]
pub struct BlockFeatures {
    pub attn: Tensor,
    pub mlp: Tensor,
}

/// One block at timestep `t`. Returns `z + h_attn + h_mlp` and the features used.
pub fn dit_block_forward(
    z: &Tensor,
    block: &DitBlockWeights,
    heads: usize,
    slot: &mut CacheSlot,
    policy: CachePolicy,
    t: usize,
    t_start: usize,
) -> Result<(Tensor, BlockFeatures)> {
    block_step(z, block, heads, slot, should_recompute(t, t_start, policy.interval), t)
}

fn block_step(
    z: &Tensor,
    block: &DitBlockWeights,
    heads: usize,
    slot: &mut CacheSlot,
    recompute: bool,
    t: usize,
) -> Result<(Tensor, BlockFeatures)> {
    let (attn, mlp) = if recompute {
        let attn = attention_feature(z, block, heads)?;
        slot.attn_calls += 1;
        let mlp = mlp_feature(&attn.add(z)?, block)?;
        slot.mlp_calls += 1;
        slot.attn = Some(attn.clone());
        slot.mlp = Some(mlp.clone());
        (attn, mlp)
    } else {
        match (&slot.attn, &slot.mlp) {
            (Some(a), Some(m)) => (a.clone(), m.clone()),
            _ => {
                return Err(Error::State(format!(
                    "feature reuse requested at t={t} before the cache was populated"
                )))
            }
        }
    };
    let mut out = z.add(&attn)?;
    out.add_assign(&mlp)?;
    Ok((out, BlockFeatures { attn, mlp }))
}

/// Linear-beta DDIM (eta = 0) over `T_start` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DdimSchedule {
    /// `alphas_cumprod[t]` for `t = 0..=T_start`, with `alphas_cumprod[0] = 1`.
    pub alphas_cumprod: Vec<f64>,
}

impl DdimSchedule {
    pub fn linear(t_start: usize) -> Self {
        let mut acc = vec![1.0f64];
        let mut prod = 1.0;
        for k in 0..t_start {
            let beta = if t_start == 1 {
                BETA_START
            } else {
                BETA_START + (BETA_END - BETA_START) * k as f64 / (t_start - 1) as f64
            };
            prod *= 1.0 - beta;
            acc.push(prod);
        }
        Self {
            alphas_cumprod: acc,
        }
    }

    pub fn steps(&self) -> usize {
        self.alphas_cumprod.len() - 1
    }

    /// `z_{t-1}` from `z_t` and the predicted noise of the latent rows; row 0
    /// (the condition) passes through.
    pub fn step(&self, z: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        if t == 0 || t > self.steps() {
            return Err(Error::input(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        if eps.rows() + 1 != z.rows() || eps.cols() != z.cols() {
            return Err(Error::shape(format!(
                "noise {:?} does not match state {:?}",
                eps.dims(),
                z.dims()
            )));
        }
        let (a_t, a_prev) = (self.alphas_cumprod[t], self.alphas_cumprod[t - 1]);
        let (sa_t, s1a_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
        let (sa_prev, s1a_prev) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
        let mut out = z.clone();
        let d = z.cols();
        for (o, e) in out.data_mut()[d..].iter_mut().zip(eps.data()) {
            let (zv, ev) = (*o as f64, *e as f64);
            let x0 = (zv - s1a_t * ev) / sa_t;
            *o = (sa_prev * x0 + s1a_prev * ev) as f32;
        }
        Ok(out)
    }
}

/// Sinusoidal embedding of timestep `t`, width `d`.
pub fn timestep_embedding(t: usize, d: usize) -> Vec<f32> {
    (0..d)
        .map(|i| {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let x = t as f64 * freq;
            (if i % 2 == 0 { x.sin() } else { x.cos() }) as f32
        })
        .collect()
}

/// `z_{T_start}`: condition row from the cognition feature, latent rows from
/// standard-normal noise seeded by `seed`.
pub fn initial_state(cognition: &[f32], weights: &ActionWeights, horizon: usize, seed: u64) -> Result<Tensor> {
    let d = weights.width();
    let mut cond = matmul(&Tensor::new(vec![1, cognition.len()], cognition.to_vec())?, &weights.cond_proj)?;
    cond.add_row_broadcast(weights.cond_bias.data())?;
    let mut g = SeededGenerator::new(seed);
    let noise = (0..horizon * d).map(|_| g.next_gaussian() as f32).collect();
    Tensor::concat_rows(&[&cond, &Tensor::new(vec![horizon, d], noise)?])
}

/// Block-stack input at step `t`: the state with the timestep embedding
/// added to every latent row.
pub fn block_input(z: &Tensor, t: usize) -> Tensor {
    let temb = timestep_embedding(t, z.cols());
    let mut u = z.clone();
    for r in 1..u.rows() {
        for (v, e) in u.row_mut(r).iter_mut().zip(&temb) {
            *v += e;
        }
    }
    u
}

/// Predicted noise for the latent rows of the final block output.
pub fn predict_noise(u: &Tensor, weights: &ActionWeights) -> Result<Tensor> {
    matmul(&u.slice_rows(1..u.rows())?, &weights.eps_head)
}

/// Maps the final latent rows to `[horizon × action_dim]` actions.
pub fn decode_actions(z: &Tensor, weights: &ActionWeights) -> Result<Tensor> {
    let mut out = matmul(&z.slice_rows(1..z.rows())?, &weights.action_head)?;
    out.add_row_broadcast(weights.action_bias.data())?;
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct DenoiseOptions {
    /// Keep every step's block features and post-step state.
    pub record: bool,
}

/// Per-step record: `t`, the features each block used, and `z_{t-1}`.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub features: Vec<BlockFeatures>,
    pub state: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    pub actions: Tensor,
    pub cache: FeatureCache,
    /// Timesteps at which block features were computed.
    pub recompute_steps: Vec<usize>,
    pub steps: Vec<StepRecord>,
}

impl DenoiseOutput {
    pub fn attn_calls(&self) -> Vec<usize> {
        self.cache.slots.iter().map(|s| s.attn_calls).collect()
    }

    pub fn mlp_calls(&self) -> Vec<usize> {
        self.cache.slots.iter().map(|s| s.mlp_calls).collect()
    }
}

/// Iterates `t = T_start..=1`, running every DiT block under the shared
/// cache decision, and decodes the final latents to actions.
pub fn denoise_loop(
    cognition: &[f32],
    weights: &ActionWeights,
    config: &ModelConfig,
    policy: CachePolicy,
    seed: u64,
    opts: &DenoiseOptions,
) -> Result<DenoiseOutput> {
    denoise_loop_with_rule(cognition, weights, config, policy, seed, opts, should_recompute)
}

/// [`denoise_loop`] with a substitute recompute rule.
pub fn denoise_loop_with_rule(
    cognition: &[f32],
    weights: &ActionWeights,
    config: &ModelConfig,
    policy: CachePolicy,
    seed: u64,
    opts: &DenoiseOptions,
    rule: RecomputeRule,
) -> Result<DenoiseOutput> {
    let t_start = config.denoise_steps;
    let policy = CachePolicy::new(policy.interval, t_start)?;
    let schedule = DdimSchedule::linear(t_start);
    let mut z = initial_state(cognition, weights, config.action_horizon, seed)?;
    let mut cache = FeatureCache::new(weights.blocks.len());
    let mut recompute_steps = Vec::new();
    let mut steps = Vec::new();

    for t in (1..=t_start).rev() {
        let recompute = rule(t, t_start, policy.interval);
        if recompute {
            recompute_steps.push(t);
            cache.last_computed_t = Some(t);
        }
        let mut u = block_input(&z, t);
        let mut features = Vec::new();
        for (block, slot) in weights.blocks.iter().zip(cache.slots.iter_mut()) {
            let (next, f) = block_step(&u, block, weights.heads, slot, recompute, t)?;
            u = next;
            if opts.record {
                features.push(f);
            }
        }
        let eps = predict_noise(&u, weights)?;
        z = schedule.step(&z, &eps, t)?;
        if opts.record {
            steps.push(StepRecord {
                t,
                features,
                state: z.clone(),
            });
        }
    }
    Ok(DenoiseOutput {
        actions: decode_actions(&z, weights)?,
        cache,
        recompute_steps,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::tiny()
    }

    fn cognition(c: &ModelConfig, seed: u64) -> Vec<f32> {
        let mut g = SeededGenerator::new(seed);
        (0..c.d_model).map(|_| g.next_gaussian() as f32).collect()
    }

    #[test]
    fn recompute_schedule_examples() {
        let on = |t_start, n| -> Vec<usize> {
            (1..=t_start).rev().filter(|&t| should_recompute(t, t_start, n)).collect()
        };
        assert_eq!(on(10, 5), vec![10, 5]);
        assert_eq!(on(10, 1), (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(on(10, 3), vec![10, 9, 6, 3]);
        assert_eq!(count_effective_steps(10, 5), 2);
        assert_eq!(count_effective_steps(10, 1), 10);
        assert_eq!(count_effective_steps(10, 3), 4);
    }

    #[test]
    fn reuse_before_populate_is_state_error() {
        let c = cfg();
        let w = ActionWeights::generate(&c);
        let z = Tensor::zeros(&[5, 16]);
        let mut slot = CacheSlot::default();
        let policy = CachePolicy { interval: 5 };
        let err = dit_block_forward(&z, &w.blocks[0], 2, &mut slot, policy, 9, 10).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn reuse_steps_are_deterministic() {
        let c = cfg();
        let w = ActionWeights::generate(&c);
        let mut g = SeededGenerator::new(1);
        let z = Tensor::new(vec![5, 16], (0..80).map(|_| g.next_gaussian() as f32).collect()).unwrap();
        let mut slot = CacheSlot::default();
        let policy = CachePolicy { interval: 5 };
        dit_block_forward(&z, &w.blocks[0], 2, &mut slot, policy, 10, 10).unwrap();
        let (a, _) = dit_block_forward(&z, &w.blocks[0], 2, &mut slot, policy, 9, 10).unwrap();
        let (b, _) = dit_block_forward(&z, &w.blocks[0], 2, &mut slot, policy, 8, 10).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!((slot.attn_calls, slot.mlp_calls), (1, 1));
    }

    #[test]
    fn zero_noise_rescales_by_cumulative_alpha() {
        let s = DdimSchedule::linear(10);
        let mut g = SeededGenerator::new(4);
        let z_t = Tensor::new(vec![3, 4], (0..12).map(|_| g.next_gaussian() as f32).collect()).unwrap();
        let eps = Tensor::zeros(&[2, 4]);
        let mut z = z_t.clone();
        for t in (1..=10).rev() {
            z = s.step(&z, &eps, t).unwrap();
        }
        // closed form: each step multiplies by sqrt(abar_{t-1}/abar_t); product = 1/sqrt(abar_T)
        let mut abar = 1.0f64;
        for k in 0..10 {
            abar *= 1.0 - (1e-4 + (2e-2 - 1e-4) * k as f64 / 9.0);
        }
        let factor = 1.0 / abar.sqrt();
        assert_eq!(z.row(0), z_t.row(0));
        for (a, b) in z.data()[4..].iter().zip(&z_t.data()[4..]) {
            assert!((*a as f64 - *b as f64 * factor).abs() < 1e-5);
        }
    }

    #[test]
    fn single_step_reconstruction() {
        let s = DdimSchedule::linear(1);
        assert_eq!(s.alphas_cumprod, vec![1.0, 1.0 - 1e-4]);
        let z = Tensor::from_rows(&[vec![9.0], vec![2.0]]).unwrap();
        let eps = Tensor::from_rows(&[vec![0.5]]).unwrap();
        let out = s.step(&z, &eps, 1).unwrap();
        let a = 1.0f64 - 1e-4;
        let expect = (2.0 - (1.0 - a).sqrt() * 0.5) / a.sqrt();
        assert_eq!(out.data()[0], 9.0);
        assert!((out.data()[1] as f64 - expect).abs() < 1e-6);
        assert!(s.step(&z, &eps, 2).is_err());
    }

    #[test]
    fn effective_counts_are_instrumented() {
        let c = cfg();
        let w = ActionWeights::generate(&c);
        let cog = cognition(&c, 3);
        for interval in 1..=10 {
            let out = denoise_loop(&cog, &w, &c, CachePolicy { interval }, 7, &DenoiseOptions::default()).unwrap();
            let n = count_effective_steps(10, interval);
            assert!(out.attn_calls().iter().all(|&k| k == n));
            assert!(out.mlp_calls().iter().all(|&k| k == n));
            assert_eq!(out.recompute_steps.len(), n);
            assert_eq!(out.actions.dims(), &[4, 7]);
            assert!(out.actions.all_finite());
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let c = cfg();
        let w = ActionWeights::generate(&c);
        let cog = cognition(&c, 3);
        let opts = DenoiseOptions { record: true };
        let a = denoise_loop(&cog, &w, &c, CachePolicy { interval: 5 }, 7, &opts).unwrap();
        let b = denoise_loop(&cog, &w, &c, CachePolicy { interval: 5 }, 7, &opts).unwrap();
        assert!(a.actions.bitwise_eq(&b.actions));
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert!(x.state.bitwise_eq(&y.state));
        }
        let other = denoise_loop(&cog, &w, &c, CachePolicy { interval: 5 }, 8, &opts).unwrap();
        assert!(!other.actions.bitwise_eq(&a.actions));
    }

    #[test]
    fn rejects_invalid_policy() {
        let c = cfg();
        let w = ActionWeights::generate(&c);
        let cog = cognition(&c, 1);
        assert!(denoise_loop(&cog, &w, &c, CachePolicy { interval: 0 }, 1, &DenoiseOptions::default()).is_err());
        assert!(denoise_loop(&cog, &w, &c, CachePolicy { interval: 11 }, 1, &DenoiseOptions::default()).is_err());
    }
}
