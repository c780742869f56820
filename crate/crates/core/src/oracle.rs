//! Straight-line reference implementations used by `verify` and the test
//! suites. Each one is written from the definitions with plain loops and
//! shares no code with the optimized path beyond the tensor kernels.

use crate::action::{ActionWeights, DitBlockWeights, BETA_END, BETA_START};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::{AttentionCapture, HiddenTrace};
use crate::tensor::{gelu, layer_norm, matmul, softmax_in_place, SeededGenerator, Tensor};

fn cos(u: &[f32], v: &[f32]) -> f64 {
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..u.len() {
        let (a, b) = (u[i] as f64, v[i] as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu.sqrt() < 1e-12 || nv.sqrt() < 1e-12 {
        return 0.0;
    }
    (dot / (nu * nv).sqrt()).clamp(-1.0, 1.0)
}

/// `1 - mean over samples of (mean over positions of cos(x_in, x_out))`.
pub fn layer_importance(traces: &[HiddenTrace]) -> Vec<f64> {
    let n_layers = traces[0].layers.len();
    let mut out = vec![0.0; n_layers];
    for (l, slot) in out.iter_mut().enumerate() {
        let mut over_samples = 0.0;
        for trace in traces {
            let pair = &trace.layers[l];
            let s = pair.input.rows();
            let mut over_positions = 0.0;
            for j in 0..s {
                over_positions += cos(pair.input.row(j), pair.output.row(j));
            }
            over_samples += over_positions / s as f64;
        }
        *slot = 1.0 - over_samples / traces.len() as f64;
    }
    out
}

/// `r_i = Σ_j mean_h A[h][i][j]` over visual queries `i` and text keys `j`.
pub fn task_relevance(a: &AttentionCapture, visual: std::ops::Range<usize>, text: std::ops::Range<usize>) -> Vec<f64> {
    let mut r = Vec::new();
    for i in visual {
        let mut total = 0.0f64;
        for j in text.clone() {
            let mut per_head = 0.0f64;
            for h in 0..a.heads() {
                per_head += a.at(h, i, j) as f64;
            }
            total += per_head / a.heads() as f64;
        }
        r.push(total);
    }
    r
}

/// Index of the largest `score` among `pool`, first occurrence on ties.
fn argmax(score: &[f64], pool: &[usize]) -> usize {
    let mut best = pool[0];
    for &i in &pool[1..] {
        if score[i] > score[best] || (score[i] == score[best] && i < best) {
            best = i;
        }
    }
    best
}

fn take_best(score: &[f64], pool: &mut Vec<usize>, k: usize) -> Vec<usize> {
    let mut picked = Vec::new();
    for _ in 0..k {
        let b = argmax(score, pool);
        pool.retain(|&i| i != b);
        picked.push(b);
    }
    picked.sort_unstable();
    picked
}

/// `(key, task, diverse)` for embeddings `emb` and normalized scores `s`.
pub fn select_tokens(
    emb: &[Vec<f32>],
    s: &[f64],
    k_final: usize,
    k_key: usize,
    alpha: f64,
    greedy: bool,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let n = emb.len();
    let k_aug = k_final - k_key;
    let k_task = (alpha * k_aug as f64).floor() as usize;
    let k_div = k_aug - k_task;

    let mut pool: Vec<usize> = (0..n).collect();
    let key = take_best(s, &mut pool, k_key);
    let task = take_best(s, &mut pool, k_task);

    let mut reference: Vec<usize> = key.clone();
    let mut diverse = Vec::new();
    let mut div_score = vec![f64::NEG_INFINITY; n];
    let score_pool = |reference: &[usize], pool: &[usize], div_score: &mut Vec<f64>| {
        for &j in pool {
            let mut max_cos = f64::NEG_INFINITY;
            for &k in reference {
                max_cos = max_cos.max(cos(&emb[j], &emb[k]));
            }
            div_score[j] = 1.0 - max_cos;
        }
    };
    if greedy {
        for _ in 0..k_div {
            score_pool(&reference, &pool, &mut div_score);
            let b = argmax(&div_score, &pool);
            pool.retain(|&i| i != b);
            reference.push(b);
            diverse.push(b);
        }
        diverse.sort_unstable();
    } else {
        score_pool(&reference, &pool, &mut div_score);
        diverse = take_best(&div_score, &mut pool, k_div);
    }
    (key, task, diverse)
}

/// Language parameters for a decoder of `layers` layers with MLP width
/// `d_ff`, plus embedding, final norm, and optional untied output head.
pub fn language_params(vocab: u64, d: u64, d_ff: u64, layers: u64, norm: u64, head: bool) -> u64 {
    let attention = 4 * d * d;
    let mlp = 3 * d * d_ff;
    let norms = 2 * norm;
    let per_layer = attention + mlp + norms;
    vocab * d + layers * per_layer + norm + if head { vocab * d } else { 0 }
}

fn attention(z: &Tensor, b: &DitBlockWeights, heads: usize) -> Result<Tensor> {
    let h = layer_norm(z, b.ln1_gain.data(), b.ln1_bias.data())?;
    let q = matmul(&h, &b.wq)?;
    let k = matmul(&h, &b.wk)?;
    let v = matmul(&h, &b.wv)?;
    let (s, d) = (z.rows(), q.cols());
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut merged = vec![0.0f32; s * d];
    for head in 0..heads {
        let c0 = head * dh;
        let mut qh = vec![0.0f32; s * dh];
        let mut kt = vec![0.0f32; dh * s];
        let mut vh = vec![0.0f32; s * dh];
        for i in 0..s {
            for c in 0..dh {
                qh[i * dh + c] = q.row(i)[c0 + c];
                kt[c * s + i] = k.row(i)[c0 + c];
                vh[i * dh + c] = v.row(i)[c0 + c];
            }
        }
        let mut scores = matmul(&Tensor::new(vec![s, dh], qh)?, &Tensor::new(vec![dh, s], kt)?)?;
        for i in 0..s {
            let row = scores.row_mut(i);
            for x in row.iter_mut() {
                *x *= scale;
            }
            softmax_in_place(row);
        }
        let ctx = matmul(&scores, &Tensor::new(vec![s, dh], vh)?)?;
        for i in 0..s {
            for c in 0..dh {
                merged[i * d + c0 + c] = ctx.row(i)[c];
            }
        }
    }
    matmul(&Tensor::new(vec![s, d], merged)?, &b.wo)
}

fn mlp(x: &Tensor, b: &DitBlockWeights) -> Result<Tensor> {
    let h = layer_norm(x, b.ln2_gain.data(), b.ln2_bias.data())?;
    let mut hid = matmul(&h, &b.w1)?;
    let f = hid.cols();
    for (i, v) in hid.data_mut().iter_mut().enumerate() {
        *v = gelu(*v + b.b1.data()[i % f]);
    }
    let mut out = matmul(&hid, &b.w2)?;
    let d = out.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b.b2.data()[i % d];
    }
    Ok(out)
}

fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Denoising with block features computed at exactly the timesteps where
/// `recompute(t)` holds and reused otherwise. With `|_| true` this is the
/// cache-free loop.
pub fn denoise(
    cognition: &[f32],
    w: &ActionWeights,
    config: &ModelConfig,
    seed: u64,
    recompute: impl Fn(usize) -> bool,
) -> Result<Tensor> {
    let t_start = config.denoise_steps;
    let horizon = config.action_horizon;
    let d = w.cond_proj.cols();

    let mut alpha_bar = vec![1.0f64];
    for k in 0..t_start {
        let beta = if t_start == 1 {
            BETA_START
        } else {
            BETA_START + (BETA_END - BETA_START) * k as f64 / (t_start - 1) as f64
        };
        let prev = alpha_bar[k];
        alpha_bar.push(prev * (1.0 - beta));
    }

    let cond = matmul(&Tensor::new(vec![1, cognition.len()], cognition.to_vec())?, &w.cond_proj)?;
    let mut z: Vec<f32> = add(cond.data(), w.cond_bias.data());
    let mut g = SeededGenerator::new(seed);
    for _ in 0..horizon * d {
        z.push(g.next_gaussian() as f32);
    }

    let mut cached: Vec<Option<(Tensor, Tensor)>> = vec![None; w.blocks.len()];
    for t in (1..=t_start).rev() {
        let mut u = z.clone();
        for r in 1..=horizon {
            for i in 0..d {
                let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
                let x = t as f64 * freq;
                u[r * d + i] += (if i % 2 == 0 { x.sin() } else { x.cos() }) as f32;
            }
        }
        for (b, block) in w.blocks.iter().enumerate() {
            let ut = Tensor::new(vec![horizon + 1, d], u.clone())?;
            if recompute(t) || cached[b].is_none() {
                let a = attention(&ut, block, w.heads)?;
                let m = mlp(&Tensor::new(vec![horizon + 1, d], add(a.data(), &u))?, block)?;
                cached[b] = Some((a, m));
            }
            let (a, m) = cached[b].as_ref().unwrap();
            u = add(&add(&u, a.data()), m.data());
        }
        let latents = Tensor::new(vec![horizon, d], u[d..].to_vec())?;
        let eps = matmul(&latents, &w.eps_head)?;

        let (a_t, a_prev) = (alpha_bar[t], alpha_bar[t - 1]);
        for i in 0..horizon * d {
            let (zv, ev) = (z[d + i] as f64, eps.data()[i] as f64);
            let x0 = (zv - (1.0 - a_t).sqrt() * ev) / a_t.sqrt();
            z[d + i] = (a_prev.sqrt() * x0 + (1.0 - a_prev).sqrt() * ev) as f32;
        }
    }

    let latents = Tensor::new(vec![horizon, d], z[d..].to_vec())?;
    let mut actions = matmul(&latents, &w.action_head)?;
    let a = actions.cols();
    for (i, v) in actions.data_mut().iter_mut().enumerate() {
        *v += w.action_bias.data()[i % a];
    }
    Ok(actions)
}

/// `{T_start} ∪ {t : N | t}` listed by walking down from `T_start`.
pub fn expected_recompute_steps(t_start: usize, interval: usize) -> Vec<usize> {
    let mut steps = vec![t_start];
    for k in (1..=t_start / interval).rev() {
        if k * interval != t_start {
            steps.push(k * interval);
        }
    }
    steps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recompute_lists() {
        assert_eq!(expected_recompute_steps(10, 5), vec![10, 5]);
        assert_eq!(expected_recompute_steps(10, 3), vec![10, 9, 6, 3]);
        assert_eq!(expected_recompute_steps(4, 1), vec![4, 3, 2, 1]);
        assert_eq!(expected_recompute_steps(7, 7), vec![7]);
    }

    #[test]
    fn argmax_prefers_lower_index() {
        assert_eq!(argmax(&[0.5, 0.9, 0.9], &[2, 1, 0]), 1);
    }

    #[test]
    fn llama_param_count() {
        let p = language_params(32000, 4096, 11008, 32, 4096, true);
        assert_eq!(p, 6_738_415_616);
    }
}
