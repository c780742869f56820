//! Oracle suite: every optimized routine checked against its straight-line
//! reference on seeded random instances.

use serde::Serialize;

use crate::action::{
    count_effective_steps, denoise_loop_with_rule, should_recompute, ActionWeights, DenoiseOptions, RecomputeRule,
};
use crate::config::{CachePolicy, ModelConfig, TokenPruneConfig};
use crate::error::Result;
use crate::layer_prune::{count_language_params, layer_importance, LanguageShape};
use crate::model::{AttentionCapture, HiddenTrace, LayerPair};
use crate::oracle;
use crate::profiler::{action_flops, ActionShape};
use crate::tensor::{SeededGenerator, Tensor};
use crate::token_prune::{normalize_scores, prune_tokens, task_relevance};

pub const PARAMS_FULL_M: f64 = 6738.9;
pub const PARAMS_PRUNED_M: f64 = 3971.1;
pub const PARAM_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    fn from_result(name: &str, r: Result<std::result::Result<String, String>>) -> Self {
        match r {
            Ok(Ok(d)) => Self::new(name, true, d),
            Ok(Err(d)) => Self::new(name, false, d),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub seed: u64,
    pub importance_traces: usize,
    pub token_cases: usize,
    pub cache_cases: usize,
    pub rule: RecomputeRule,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            importance_traces: 100,
            token_cases: 500,
            cache_cases: 50,
            rule: should_recompute,
        }
    }
}

pub fn run_suite(opts: &SuiteOptions) -> Vec<CheckResult> {
    vec![
        check_importance(opts.seed, opts.importance_traces),
        check_token_selection(opts.seed, opts.token_cases),
        check_cache_transparency(opts.seed, opts.cache_cases, opts.rule),
        check_cache_schedule(opts.rule),
        check_param_counts(),
    ]
}

fn gaussian_tensor(g: &mut SeededGenerator, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| g.next_gaussian() as f32).collect()).expect("dims match")
}

fn random_trace(g: &mut SeededGenerator, layers: usize, s: usize, d: usize) -> HiddenTrace {
    HiddenTrace {
        sample: 0,
        layers: (0..layers)
            .map(|_| LayerPair {
                input: gaussian_tensor(g, &[s, d]),
                output: gaussian_tensor(g, &[s, d]),
            })
            .collect(),
    }
}

/// Random traces against the double loop, plus the identity and sign-flip
/// extremes.
pub fn check_importance(seed: u64, traces: usize) -> CheckResult {
    const NAME: &str = "layer importance";
    let run = || -> Result<std::result::Result<String, String>> {
        let mut g = SeededGenerator::derive(seed, 0xA1);
        let mut worst = 0.0f64;
        let mut done = 0;
        while done < traces {
            let batch = 1 + (g.next_u64() % 4) as usize;
            let layers = 1 + (g.next_u64() % 6) as usize;
            let s = 1 + (g.next_u64() % 12) as usize;
            let d = 2 + (g.next_u64() % 15) as usize;
            let set: Vec<HiddenTrace> = (0..batch).map(|_| random_trace(&mut g, layers, s, d)).collect();
            let got = layer_importance(&set)?.scores;
            let want = oracle::layer_importance(&set);
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
            done += batch;
        }
        if worst > 1e-6 {
            return Ok(Err(format!("max deviation {worst:.3e} exceeds 1e-6")));
        }

        let mut same = random_trace(&mut g, 3, 5, 8);
        for p in &mut same.layers {
            p.output = p.input.clone();
        }
        let ident = layer_importance(&[same])?.scores;
        if ident.iter().any(|&v| v != 0.0) {
            return Ok(Err(format!("pure-residual layers scored {ident:?}, expected 0")));
        }
        let mut flip = random_trace(&mut g, 3, 5, 8);
        for p in &mut flip.layers {
            p.output = p.input.scale(-1.0);
        }
        let flipped = layer_importance(&[flip])?.scores;
        if flipped.iter().any(|&v| v != 2.0) {
            return Ok(Err(format!("sign-flip layers scored {flipped:?}, expected 2")));
        }
        Ok(Ok(format!("{done} traces, max deviation {worst:.1e}; identity 0, sign flip 2")))
    };
    CheckResult::from_result(NAME, run())
}

/// One random selection instance with `N ≤ 16`.
struct TokenCase {
    emb: Vec<Vec<f32>>,
    scores: Vec<f64>,
    cfg: TokenPruneConfig,
}

fn token_case(g: &mut SeededGenerator, index: usize) -> TokenCase {
    let n = 1 + (g.next_u64() % 16) as usize;
    let d = 2 + (g.next_u64() % 6) as usize;
    let mut emb: Vec<Vec<f32>> = (0..n)
        .map(|_| (0..d).map(|_| g.next_gaussian() as f32).collect())
        .collect();
    // duplicated embeddings force diversity ties
    if n > 2 && g.next_u64() % 4 == 0 {
        emb[n - 1] = emb[0].clone();
    }
    let raw: Vec<f64> = match index % 5 {
        0 => vec![0.7; n],
        1 => (0..n).map(|_| (g.next_u64() % 4) as f64).collect(),
        _ => (0..n).map(|_| g.next_unit()).collect(),
    };
    let k_final = match index % 7 {
        0 => n,
        _ => 1 + (g.next_u64() % n as u64) as usize,
    };
    let k_key = 1 + (g.next_u64() % k_final as u64) as usize;
    let alpha = match index % 4 {
        0 => 0.0,
        1 => 1.0,
        2 => 0.5,
        _ => g.next_unit(),
    };
    TokenCase {
        emb,
        scores: normalize_scores(&raw),
        cfg: TokenPruneConfig {
            k_final,
            k_key,
            alpha,
            capture_layer: 1,
            greedy_diversity: index % 3 == 2,
        },
    }
}

/// Relevance and full selection against the exhaustive implementation.
pub fn check_token_selection(seed: u64, cases: usize) -> CheckResult {
    const NAME: &str = "token selection";
    let run = || -> Result<std::result::Result<String, String>> {
        let mut g = SeededGenerator::derive(seed, 0xB2);
        for i in 0..cases {
            let c = token_case(&mut g, i);
            let n = c.emb.len();
            let emb = Tensor::from_rows(&c.emb)?;
            let sel = prune_tokens(&emb, &c.scores, &c.cfg)?;
            let (key, task, div) = oracle::select_tokens(
                &c.emb,
                &c.scores,
                c.cfg.k_final,
                c.cfg.k_key,
                c.cfg.alpha,
                c.cfg.greedy_diversity,
            );
            if sel.key != key || sel.task != task || sel.diverse != div {
                return Ok(Err(format!(
                    "case {i} (N={n}, {:?}): got {:?}/{:?}/{:?}, oracle {key:?}/{task:?}/{div:?}",
                    c.cfg, sel.key, sel.task, sel.diverse
                )));
            }
            if sel.pruned.len() != c.cfg.k_final || sel.pruned.windows(2).any(|w| w[0] >= w[1]) {
                return Ok(Err(format!("case {i}: pruned set {:?} malformed", sel.pruned)));
            }
        }

        for i in 0..cases.min(100) {
            let heads = 1 + (g.next_u64() % 4) as usize;
            let (l, n) = (1 + (g.next_u64() % 4) as usize, 1 + (g.next_u64() % 12) as usize);
            let s = l + n;
            let data = (0..heads * s * s).map(|_| g.next_unit() as f32).collect();
            let a = AttentionCapture {
                layer: 1,
                weights: Tensor::new(vec![heads, s, s], data)?,
            };
            let got = task_relevance(&a, l..s, 0..l)?;
            let want = oracle::task_relevance(&a, l..s, 0..l);
            let dev = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if dev > 1e-9 {
                return Ok(Err(format!("relevance case {i} deviates by {dev:.3e}")));
            }
        }
        Ok(Ok(format!("{cases} selection instances (N <= 16) and relevance match")))
    };
    CheckResult::from_result(NAME, run())
}

/// Small random action-head configuration.
pub fn random_action_config(g: &mut SeededGenerator) -> ModelConfig {
    let heads = [1usize, 2, 4][(g.next_u64() % 3) as usize];
    let dit_d = heads * (2 + (g.next_u64() % 7) as usize);
    ModelConfig {
        d_model: 4 + (g.next_u64() % 13) as usize,
        action_horizon: 1 + (g.next_u64() % 8) as usize,
        dit_blocks: 1 + (g.next_u64() % 3) as usize,
        dit_d_model: dit_d,
        dit_heads: heads,
        denoise_steps: 1 + (g.next_u64() % 12) as usize,
        seed: g.next_u64(),
        ..ModelConfig::tiny()
    }
}

fn cognition(g: &mut SeededGenerator, d: usize) -> Vec<f32> {
    (0..d).map(|_| g.next_gaussian() as f32).collect()
}

/// Interval 1 against the cache-free loop, and interval `N` against the
/// reference that recomputes at the expected timesteps, both bitwise.
pub fn check_cache_transparency(seed: u64, cases: usize, rule: RecomputeRule) -> CheckResult {
    const NAME: &str = "cache transparency";
    let run = || -> Result<std::result::Result<String, String>> {
        let mut g = SeededGenerator::derive(seed, 0xC3);
        for i in 0..cases {
            let cfg = random_action_config(&mut g);
            let w = ActionWeights::generate(&cfg);
            let c = cognition(&mut g, cfg.d_model);
            let noise_seed = g.next_u64();
            let opts = DenoiseOptions::default();

            let fast = denoise_loop_with_rule(&c, &w, &cfg, CachePolicy::disabled(), noise_seed, &opts, rule)?;
            let slow = oracle::denoise(&c, &w, &cfg, noise_seed, |_| true)?;
            if !fast.actions.bitwise_eq(&slow) {
                return Ok(Err(format!(
                    "case {i}: interval 1 differs from cache-free loop by {:.3e}",
                    fast.actions.max_abs_diff(&slow)
                )));
            }

            let interval = 1 + (g.next_u64() % cfg.denoise_steps as u64) as usize;
            let policy = CachePolicy::new(interval, cfg.denoise_steps)?;
            let expected = oracle::expected_recompute_steps(cfg.denoise_steps, interval);
            let cached = denoise_loop_with_rule(&c, &w, &cfg, policy, noise_seed, &opts, rule)?;
            let reference = oracle::denoise(&c, &w, &cfg, noise_seed, |t| expected.contains(&t))?;
            if cached.recompute_steps != expected || !cached.actions.bitwise_eq(&reference) {
                return Ok(Err(format!(
                    "case {i}: interval {interval} over {} steps recomputed at {:?}, expected {expected:?}",
                    cfg.denoise_steps, cached.recompute_steps
                )));
            }
        }
        Ok(Ok(format!("{cases} random configurations bitwise identical")))
    };
    CheckResult::from_result(NAME, run())
}

/// Ten steps at interval 5: features computed twice per block, and the
/// action-stage FLOPs fall to roughly a fifth.
pub fn check_cache_schedule(rule: RecomputeRule) -> CheckResult {
    const NAME: &str = "cache step count";
    let run = || -> Result<std::result::Result<String, String>> {
        let cfg = ModelConfig::default();
        let w = ActionWeights::generate(&cfg);
        let c = vec![0.5f32; cfg.d_model];
        let out = denoise_loop_with_rule(&c, &w, &cfg, CachePolicy::new(5, 10)?, 7, &Default::default(), rule)?;
        let (attn, mlp) = (out.attn_calls(), out.mlp_calls());
        if attn.iter().chain(&mlp).any(|&n| n != 2) || out.recompute_steps != [10, 5] {
            return Ok(Err(format!(
                "recomputed at {:?}; attention calls {attn:?}, MLP calls {mlp:?}",
                out.recompute_steps
            )));
        }
        let eff = (1..=10).filter(|&t| rule(t, 10, 5)).count();
        let shape = ActionShape::from_config(&cfg);
        let ratio = action_flops(&shape, 10, eff) as f64 / action_flops(&shape, 10, 10) as f64;
        if eff != count_effective_steps(10, 5) || !(0.20..=0.23).contains(&ratio) {
            return Ok(Err(format!("{eff} effective steps, action FLOPs ratio {ratio:.4}")));
        }
        Ok(Ok(format!("2 computations per block at t = 10, 5; action FLOPs ratio {ratio:.4}")))
    };
    CheckResult::from_result(NAME, run())
}

/// Full and pruned Llama-2-7B language parameter counts.
pub fn check_param_counts() -> CheckResult {
    const NAME: &str = "parameter counts";
    let shape = LanguageShape::llama2_7b();
    let full = count_language_params(&shape, 32, 0.0);
    let pruned = count_language_params(&shape, 22, 0.25);
    let pruned_d_ff = 11008 - (0.25f64 * 11008.0).round() as u64;
    let want_full = oracle::language_params(32000, 4096, 11008, 32, 4096, true);
    let want_pruned = oracle::language_params(32000, 4096, pruned_d_ff, 22, 4096, true);
    let (fm, pm) = (full as f64 / 1e6, pruned as f64 / 1e6);
    let rel = |v: f64, p: f64| ((v - p) / p).abs();
    let passed = full == want_full
        && pruned == want_pruned
        && rel(fm, PARAMS_FULL_M) <= PARAM_TOLERANCE
        && rel(pm, PARAMS_PRUNED_M) <= PARAM_TOLERANCE;
    CheckResult::new(
        NAME,
        passed,
        format!(
            "full {fm:.1}M ({:+.3}% vs {PARAMS_FULL_M}), pruned {pm:.1}M ({:+.3}% vs {PARAMS_PRUNED_M})",
            100.0 * (fm - PARAMS_FULL_M) / PARAMS_FULL_M,
            100.0 * (pm - PARAMS_PRUNED_M) / PARAMS_PRUNED_M
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> SuiteOptions {
        SuiteOptions {
            importance_traces: 10,
            token_cases: 60,
            cache_cases: 6,
            ..SuiteOptions::default()
        }
    }

    #[test]
    fn pristine_suite_passes() {
        for r in run_suite(&quick()) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    fn off_by_one(t: usize, t_start: usize, interval: usize) -> bool {
        t == t_start || (t + 1) % interval == 0
    }

    #[test]
    fn mutated_rule_is_caught() {
        let opts = SuiteOptions {
            rule: off_by_one,
            ..quick()
        };
        let results = run_suite(&opts);
        let by_name = |n: &str| results.iter().find(|r| r.name == n).unwrap();
        assert!(!by_name("cache transparency").passed);
        assert!(!by_name("cache step count").passed);
        assert!(by_name("parameter counts").passed);
    }
}
