//! Task-relevance and diversity driven visual token selection.
//!
//! Visual tokens are scored by how much attention they pay to the text
//! tokens at a capture layer. The top `k_key` are kept unconditionally; the
//! remaining budget is split by `alpha` between further high-relevance tokens
//! and tokens least similar to the key set. From the capture layer's output
//! onward the stack runs on `[text..., kept visual...]` only.
//!
//! Every ranking breaks ties toward the lower original token index.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::config::TokenPruneConfig;
use crate::error::{Error, Result};
use crate::model::{concat_sequence, forward_layer, run_layers, AttentionCapture, LayerWeights};
use crate::tensor::{cosine_similarity, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScores {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl RelevanceScores {
    pub fn from_raw(raw: Vec<f64>) -> Self {
        let normalized = normalize_scores(&raw);
        Self { raw, normalized }
    }
}

/// Which rule retained a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionSet {
    Key,
    Task,
    Div,
}

impl SelectionSet {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionSet::Key => "key",
            SelectionSet::Task => "task",
            SelectionSet::Div => "div",
        }
    }
}

/// Retained visual token indices (positions within the visual block). Each
/// set is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSelection {
    pub key: Vec<usize>,
    pub task: Vec<usize>,
    pub diverse: Vec<usize>,
    /// Union of the three sets in original token order.
    pub pruned: Vec<usize>,
    /// Candidates left over after all three selections.
    pub remainder: Vec<usize>,
}

impl TokenSelection {
    /// `(token, set)` in original token order.
    pub fn labelled(&self) -> Vec<(usize, SelectionSet)> {
        self.pruned
            .iter()
            .map(|&i| {
                let set = if self.key.binary_search(&i).is_ok() {
                    SelectionSet::Key
                } else if self.task.binary_search(&i).is_ok() {
                    SelectionSet::Task
                } else {
                    SelectionSet::Div
                };
                (i, set)
            })
            .collect()
    }
}

/// `r_i = sum_j mean_h A[h][i][j]` with queries from `visual` and keys from
/// `text` (sequence positions).
pub fn task_relevance(a: &AttentionCapture, visual: Range<usize>, text: Range<usize>) -> Result<Vec<f64>> {
    if text.is_empty() {
        return Err(Error::input("task relevance needs at least one text token"));
    }
    let s = a.seq_len();
    if visual.end > s || text.end > s {
        return Err(Error::shape(format!(
            "ranges {visual:?}/{text:?} exceed sequence length {s}"
        )));
    }
    if visual.start < text.end && text.start < visual.end {
        return Err(Error::input("visual and text ranges overlap"));
    }
    let h = a.heads();
    Ok(visual
        .map(|i| {
            text.clone()
                .map(|j| (0..h).map(|head| a.at(head, i, j) as f64).sum::<f64>() / h as f64)
                .sum()
        })
        .collect())
}

/// Min-max scaling to [0, 1]; a constant vector maps to all zeros.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if !(span > 0.0) {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|r| (r - min) / span).collect()
}

/// The `k` candidates with the largest score, lower index first on ties,
/// returned in rank order.
fn top_k(scores: &[f64], candidates: &[usize], k: usize) -> Vec<usize> {
    let mut idx = candidates.to_vec();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

pub fn select_key_tokens(s: &[f64], k_key: usize) -> Result<Vec<usize>> {
    if k_key > s.len() {
        return Err(Error::input(format!("k_key {k_key} exceeds {} tokens", s.len())));
    }
    let all: Vec<usize> = (0..s.len()).collect();
    Ok(sorted(top_k(s, &all, k_key)))
}

/// Top `k_task` of `remaining` by `s`; the picks are removed from `remaining`.
pub fn select_task_tokens(s: &[f64], remaining: &mut Vec<usize>, k_task: usize) -> Result<Vec<usize>> {
    if k_task > remaining.len() {
        return Err(Error::input(format!(
            "k_task {k_task} exceeds {} remaining tokens",
            remaining.len()
        )));
    }
    let picked = sorted(top_k(s, remaining, k_task));
    remaining.retain(|i| picked.binary_search(i).is_err());
    Ok(picked)
}

/// `1 - max_k cos(v, key_k)`
pub fn diversity_score(v: &[f32], keys: &[&[f32]]) -> Result<f64> {
    let max_cos = keys
        .iter()
        .map(|k| cosine_similarity(v, k))
        .fold(None, |acc: Option<f64>, c| Some(acc.map_or(c, |a| a.max(c))))
        .ok_or_else(|| Error::input("diversity against an empty key set"))?;
    Ok(1.0 - max_cos)
}

/// The `k_div` members of `remaining` most dissimilar to the key tokens.
/// With `greedy`, each pick joins the reference set before the next one.
pub fn select_diverse_tokens(
    embeddings: &Tensor,
    key: &[usize],
    remaining: &[usize],
    k_div: usize,
    greedy: bool,
) -> Result<Vec<usize>> {
    if k_div > remaining.len() {
        return Err(Error::input(format!(
            "k_div {k_div} exceeds {} remaining tokens",
            remaining.len()
        )));
    }
    if key.is_empty() {
        return Err(Error::input("diversity selection needs a key set"));
    }
    let mut reference: Vec<&[f32]> = key.iter().map(|&k| embeddings.row(k)).collect();
    let mut scores = vec![f64::NEG_INFINITY; embeddings.rows()];

    if !greedy {
        for &j in remaining {
            scores[j] = diversity_score(embeddings.row(j), &reference)?;
        }
        return Ok(sorted(top_k(&scores, remaining, k_div)));
    }

    let mut pool = remaining.to_vec();
    let mut picked = Vec::with_capacity(k_div);
    for _ in 0..k_div {
        for &j in &pool {
            scores[j] = diversity_score(embeddings.row(j), &reference)?;
        }
        let best = top_k(&scores, &pool, 1)[0];
        pool.retain(|&j| j != best);
        reference.push(embeddings.row(best));
        picked.push(best);
    }
    Ok(sorted(picked))
}

/// Full selection over `N` visual embeddings with normalized relevance `s`.
pub fn prune_tokens(embeddings: &Tensor, s: &[f64], cfg: &TokenPruneConfig) -> Result<TokenSelection> {
    let n = embeddings.rows();
    if s.len() != n {
        return Err(Error::shape(format!("{} scores for {n} tokens", s.len())));
    }
    cfg.validate(n)?;
    let key = select_key_tokens(s, cfg.k_key)?;
    let mut remaining: Vec<usize> = (0..n).filter(|i| key.binary_search(i).is_err()).collect();
    let task = select_task_tokens(s, &mut remaining, cfg.k_task())?;
    let diverse = select_diverse_tokens(embeddings, &key, &remaining, cfg.k_div(), cfg.greedy_diversity)?;
    remaining.retain(|i| diverse.binary_search(i).is_err());

    let pruned = sorted(key.iter().chain(&task).chain(&diverse).copied().collect());
    Ok(TokenSelection {
        key,
        task,
        diverse,
        pruned,
        remainder: remaining,
    })
}

pub struct PrunedForward {
    pub hidden: Tensor,
    pub selection: TokenSelection,
    pub relevance: RelevanceScores,
}

/// Runs `[text; visual]` through `layers`, selecting visual tokens from the
/// attention of the 1-based `cfg.capture_layer`; later layers see only the
/// text tokens and the retained visual tokens.
pub fn forward_with_token_pruning(
    visual: &Tensor,
    text: &Tensor,
    layers: &[LayerWeights],
    n_heads: usize,
    cfg: &TokenPruneConfig,
) -> Result<PrunedForward> {
    let (l_ctx, n) = (text.rows(), visual.rows());
    cfg.validate(n)?;
    if cfg.capture_layer > layers.len() {
        return Err(Error::config(format!(
            "capture layer {} beyond the {}-layer stack",
            cfg.capture_layer,
            layers.len()
        )));
    }
    let (head, tail) = layers.split_at(cfg.capture_layer);
    let (capture_layer, before) = head.split_last().expect("capture_layer >= 1");

    let x_in = run_layers(concat_sequence(text, visual)?, before, n_heads)?;
    let (x_out, weights) = forward_layer(&x_in, capture_layer, n_heads, true)?;
    let capture = AttentionCapture {
        layer: cfg.capture_layer,
        weights: weights.expect("capture requested"),
    };

    let relevance = RelevanceScores::from_raw(task_relevance(&capture, l_ctx..l_ctx + n, 0..l_ctx)?);
    let embeddings = x_in.slice_rows(l_ctx..l_ctx + n)?;
    let selection = prune_tokens(&embeddings, &relevance.normalized, cfg)?;

    let keep: Vec<usize> = (0..l_ctx).chain(selection.pruned.iter().map(|&i| l_ctx + i)).collect();
    let hidden = run_layers(x_out.select_rows(&keep)?, tail, n_heads)?;
    Ok(PrunedForward {
        hidden,
        selection,
        relevance,
    })
}
