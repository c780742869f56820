//! Similarity-driven layer importance, non-contiguous layer removal, and
//! structured MLP column pruning.
//!
//! A layer whose output hidden states point the same way as its inputs adds
//! little; its importance is one minus the mean input/output cosine over a
//! calibration batch. The `n` lowest-scoring layers are dropped in one pass.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{forward_stack, HiddenTrace, LayerWeights, ModelBundle};
use crate::tensor::{cosine_similarity, SeededGenerator, Tensor};

/// Default calibration batch size.
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 16;
/// Text length of each synthetic calibration sample (capped by the model).
const CALIBRATION_TEXT_TOKENS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    pub scores: Vec<f64>,
    pub calibration_size: usize,
}

/// Mean over positions of `cos(input_j, output_j)` for one layer of one trace.
fn mean_position_cosine(input: &Tensor, output: &Tensor) -> f64 {
    let s = input.rows();
    if s == 0 {
        return 0.0;
    }
    let total: f64 = (0..s)
        .map(|j| cosine_similarity(input.row(j), output.row(j)))
        .sum();
    total / s as f64
}

fn check_traces(traces: &[HiddenTrace]) -> Result<usize> {
    let first = traces
        .first()
        .ok_or_else(|| Error::input("no calibration traces"))?;
    let n = first.n_layers();
    if traces.iter().any(|t| t.n_layers() != n) {
        return Err(Error::input("traces come from stacks of different depth"));
    }
    Ok(n)
}

/// Per-layer mean input/output cosine, averaged over positions then samples.
pub(crate) fn mean_layer_cosines(traces: &[HiddenTrace]) -> Result<Vec<f64>> {
    let n = check_traces(traces)?;
    let per_sample: Vec<Vec<f64>> = traces
        .par_iter()
        .map(|t| {
            t.layers
                .iter()
                .map(|p| mean_position_cosine(&p.input, &p.output))
                .collect()
        })
        .collect();
    // fixed summation order over samples
    Ok((0..n)
        .map(|l| per_sample.iter().map(|s| s[l]).sum::<f64>() / traces.len() as f64)
        .collect())
}

pub fn layer_importance(traces: &[HiddenTrace]) -> Result<LayerImportance> {
    let cos = mean_layer_cosines(traces)?;
    Ok(LayerImportance {
        scores: cos.into_iter().map(|c| 1.0 - c).collect(),
        calibration_size: traces.len(),
    })
}

/// Layer indices by ascending importance; ties keep the lower index first.
pub fn rank_layers(imp: &LayerImportance) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..imp.scores.len()).collect();
    idx.sort_by(|&a, &b| imp.scores[a].total_cmp(&imp.scores[b]));
    idx
}

/// Drops the first `n` layers of `ranked` (original indices); the rest keep
/// their order and weights.
pub fn prune_layers(model: &ModelBundle, n: usize, ranked: &[usize]) -> Result<ModelBundle> {
    let depth = model.language.layers.len();
    if n >= depth {
        return Err(Error::input(format!(
            "cannot drop {n} of {depth} layers; at least one must remain"
        )));
    }
    if n > ranked.len() {
        return Err(Error::input("ranking shorter than the drop count"));
    }
    let dropped = &ranked[..n];
    let present = model.retained_layers();
    if let Some(missing) = dropped.iter().find(|i| !present.contains(i)) {
        return Err(Error::input(format!("layer {missing} is not in the stack")));
    }
    let mut out = model.clone();
    out.language.layers.retain(|l| !dropped.contains(&l.index));
    Ok(out)
}

/// `round((1 - sparsity) * d_ff)`
pub fn kept_columns(d_ff: usize, sparsity: f64) -> usize {
    ((1.0 - sparsity) * d_ff as f64).round() as usize
}

/// Combined L2 norm of each intermediate unit: up column, gate column and
/// down row together.
pub fn mlp_column_norms(layer: &LayerWeights) -> Vec<f64> {
    let f = layer.d_ff();
    let mut sq = vec![0.0f64; f];
    for w in [&layer.w_up, &layer.w_gate] {
        for r in 0..w.rows() {
            for (acc, &v) in sq.iter_mut().zip(w.row(r)) {
                *acc += v as f64 * v as f64;
            }
        }
    }
    for (j, acc) in sq.iter_mut().enumerate() {
        *acc += layer.w_down.row(j).iter().map(|&v| v as f64 * v as f64).sum::<f64>();
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// Highest-norm `keep` units, returned in ascending index order.
fn top_columns(norms: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

/// Structured magnitude pruning of every MLP: keeps the top `1 - sparsity`
/// fraction of intermediate units by combined weight norm and rebuilds
/// smaller dense matrices. Returns the kept unit indices per layer.
pub fn sparsify_mlp(model: &ModelBundle, sparsity: f64) -> Result<(ModelBundle, Vec<Vec<usize>>)> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::config(format!("MLP sparsity {sparsity} outside [0, 1)")));
    }
    let mut out = model.clone();
    let mut keeps = Vec::with_capacity(out.language.layers.len());
    for layer in &mut out.language.layers {
        let keep = kept_columns(layer.d_ff(), sparsity);
        if keep == 0 {
            return Err(Error::config(format!(
                "sparsity {sparsity} leaves no MLP units of {}",
                layer.d_ff()
            )));
        }
        let cols = top_columns(&mlp_column_norms(layer), keep);
        layer.w_up = layer.w_up.select_cols(&cols)?;
        layer.w_gate = layer.w_gate.select_cols(&cols)?;
        layer.w_down = layer.w_down.select_rows(&cols)?;
        keeps.push(cols);
    }
    Ok((out, keeps))
}

/// One synthetic calibration sample: a uniform-noise image and random ids.
pub fn calibration_sample(config: &ModelConfig, seed: u64, index: usize) -> (Tensor, Vec<u32>) {
    let mut g = SeededGenerator::derive(seed, 0x5EED_0000 + index as u64);
    let n = config.image_size;
    let image = Tensor::new(vec![n, n], (0..n * n).map(|_| g.next_unit() as f32).collect())
        .expect("square image");
    let len = CALIBRATION_TEXT_TOKENS.min(config.max_text_tokens);
    let ids = (0..len)
        .map(|_| (g.next_u64() % config.vocab_size as u64) as u32)
        .collect();
    (image, ids)
}

/// Hidden-state traces of `samples` synthetic inputs through the full stack.
pub fn calibration_traces(model: &ModelBundle, samples: usize, seed: u64) -> Result<Vec<HiddenTrace>> {
    if samples == 0 {
        return Err(Error::input("calibration needs at least one sample"));
    }
    (0..samples)
        .into_par_iter()
        .map(|i| {
            let (image, ids) = calibration_sample(&model.config, seed, i);
            let visual = model.encode_image(&image)?;
            let text = model.embed_text(&ids)?;
            let mut out = forward_stack(&visual, &text, &model.language.layers, model.config.n_heads, None)?;
            out.trace.sample = i;
            Ok(out.trace)
        })
        .collect()
}

/// Parameter layout of a decoder-only language model, for counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LanguageShape {
    pub vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    /// Parameters per normalization layer (`d` for RMSNorm, `2d` for LayerNorm).
    pub norm_params: usize,
    /// Untied output projection back to the vocabulary.
    pub output_head: bool,
}

impl LanguageShape {
    /// The published Llama-2 7B decoder.
    pub fn llama2_7b() -> Self {
        Self {
            vocab: 32000,
            d_model: 4096,
            d_ff: 11008,
            n_layers: 32,
            norm_params: 4096,
            output_head: true,
        }
    }

    /// The toy stack: LayerNorm with bias, no output head.
    pub fn from_config(config: &ModelConfig) -> Self {
        Self {
            vocab: config.vocab_size,
            d_model: config.d_model,
            d_ff: config.d_ff,
            n_layers: config.n_layers,
            norm_params: 2 * config.d_model,
            output_head: false,
        }
    }

    pub fn layer_params(&self, d_ff_kept: usize) -> u64 {
        let d = self.d_model as u64;
        4 * d * d + 3 * d * d_ff_kept as u64 + 2 * self.norm_params as u64
    }

    /// Embedding table, final norm and output head.
    pub fn non_layer_params(&self) -> u64 {
        let vd = (self.vocab * self.d_model) as u64;
        vd + self.norm_params as u64 + if self.output_head { vd } else { 0 }
    }
}

/// Embeddings + retained layers (with `mlp_sparsity` applied to every MLP) +
/// final norm + output head.
pub fn count_language_params(shape: &LanguageShape, retained_layers: usize, mlp_sparsity: f64) -> u64 {
    shape.non_layer_params()
        + retained_layers as u64 * shape.layer_params(kept_columns(shape.d_ff, mlp_sparsity))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerPair;

    fn rand_t(g: &mut SeededGenerator, s: usize, d: usize) -> Tensor {
        Tensor::new(vec![s, d], (0..s * d).map(|_| (2.0 * g.next_unit() - 1.0) as f32).collect()).unwrap()
    }

    fn synthetic_trace(seed: u64, layers: usize, s: usize, d: usize) -> HiddenTrace {
        let mut g = SeededGenerator::new(seed);
        let mut x = rand_t(&mut g, s, d);
        let mut t = HiddenTrace::default();
        for _ in 0..layers {
            let y = x.add(&rand_t(&mut g, s, d).scale(0.5)).unwrap();
            t.layers.push(LayerPair { input: x, output: y.clone() });
            x = y;
        }
        t
    }

    #[test]
    fn pure_residual_and_sign_flip() {
        let mut g = SeededGenerator::new(1);
        let x = rand_t(&mut g, 4, 6);
        let same = HiddenTrace {
            sample: 0,
            layers: vec![LayerPair { input: x.clone(), output: x.clone() }],
        };
        let flip = HiddenTrace {
            sample: 0,
            layers: vec![LayerPair { input: x.clone(), output: x.scale(-1.0) }],
        };
        assert_eq!(layer_importance(&[same]).unwrap().scores, vec![0.0]);
        assert_eq!(layer_importance(&[flip]).unwrap().scores, vec![2.0]);
    }

    #[test]
    fn importance_matches_double_loop() {
        let traces: Vec<_> = (0..2).map(|i| synthetic_trace(10 + i, 3, 4, 5)).collect();
        let imp = layer_importance(&traces).unwrap();
        for l in 0..3 {
            let mut outer = 0.0;
            for t in &traces {
                let mut inner = 0.0;
                for j in 0..4 {
                    let (a, b) = (t.layers[l].input.row(j), t.layers[l].output.row(j));
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
                    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                    inner += dot / (na * nb);
                }
                outer += inner / 4.0;
            }
            assert!((imp.scores[l] - (1.0 - outer / 2.0)).abs() < 1e-6);
        }
        assert_eq!(imp.calibration_size, 2);
    }

    #[test]
    fn importance_rejects_empty_and_ragged() {
        assert!(matches!(layer_importance(&[]), Err(Error::Input(_))));
        let a = synthetic_trace(1, 3, 2, 2);
        let b = synthetic_trace(2, 2, 2, 2);
        assert!(layer_importance(&[a, b]).is_err());
    }

    #[test]
    fn ranking_cases() {
        let imp = |s: Vec<f64>| LayerImportance { scores: s, calibration_size: 1 };
        assert_eq!(rank_layers(&imp(vec![0.5, 0.1, 0.9])), vec![1, 0, 2]);
        assert_eq!(rank_layers(&imp(vec![0.3; 5])), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn prune_zero_layers_is_identity_and_rejects_all() {
        let m = ModelBundle::generate(&ModelConfig::tiny()).unwrap();
        let ranked = vec![2, 0, 3, 1];
        assert_eq!(prune_layers(&m, 0, &ranked).unwrap(), m);
        assert!(matches!(prune_layers(&m, 4, &ranked), Err(Error::Input(_))));
        let p = prune_layers(&m, 2, &ranked).unwrap();
        assert_eq!(p.retained_layers(), vec![1, 3]);
    }

    #[test]
    fn sparsify_zero_is_unchanged() {
        let m = ModelBundle::generate(&ModelConfig::tiny()).unwrap();
        let (s, keep) = sparsify_mlp(&m, 0.0).unwrap();
        assert_eq!(s, m);
        assert!(keep.iter().all(|k| k.len() == 32));
        assert!(sparsify_mlp(&m, 1.0).is_err());
    }

    #[test]
    fn sparsify_keeps_brute_force_top_norms() {
        let m = ModelBundle::generate(&ModelConfig::tiny()).unwrap();
        let (s, keep) = sparsify_mlp(&m, 0.25).unwrap();
        for (layer, kept) in m.language.layers.iter().zip(&keep) {
            assert_eq!(kept.len(), 24);
            // brute force: a unit is kept iff fewer than 24 units beat it
            let f = layer.d_ff();
            let norm = |j: usize| {
                let mut acc = 0.0f64;
                for r in 0..layer.w_up.rows() {
                    acc += (layer.w_up.row(r)[j] as f64).powi(2) + (layer.w_gate.row(r)[j] as f64).powi(2);
                }
                acc + layer.w_down.row(j).iter().map(|v| (*v as f64).powi(2)).sum::<f64>()
            };
            for j in 0..f {
                let better = (0..f).filter(|&o| norm(o) > norm(j) || (norm(o) == norm(j) && o < j)).count();
                assert_eq!(kept.contains(&j), better < 24, "unit {j}");
            }
        }
        assert!(s.language.layers.iter().all(|l| l.d_ff() == 24 && l.w_down.rows() == 24));
    }

    #[test]
    fn toy_param_count_hand_summed() {
        let shape = LanguageShape {
            vocab: 256,
            d_model: 64,
            d_ff: 256,
            n_layers: 4,
            norm_params: 128,
            output_head: false,
        };
        // embed 16384; per layer 4*4096 + 3*64*256 + 2*128 = 16384 + 49152 + 256 = 65792; final norm 128
        assert_eq!(count_language_params(&shape, 4, 0.0), 16384 + 4 * 65792 + 128);
        let cfg = ModelConfig {
            n_layers: 4,
            ..ModelConfig::default()
        };
        let m = ModelBundle::generate(&cfg).unwrap();
        assert_eq!(m.language_param_count() as u64, count_language_params(&shape, 4, 0.0));
    }

    #[test]
    fn calibration_is_deterministic() {
        let m = ModelBundle::generate(&ModelConfig::tiny()).unwrap();
        let a = calibration_traces(&m, 3, 9).unwrap();
        let b = calibration_traces(&m, 3, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[2].sample, 2);
        assert!(calibration_traces(&m, 0, 9).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn scores_bounded_and_scale_invariant(seed in any::<u64>(), scale in 0.01f32..50.0) {
                let t = synthetic_trace(seed, 3, 4, 5);
                let imp = layer_importance(std::slice::from_ref(&t)).unwrap();
                prop_assert!(imp.scores.iter().all(|s| (0.0..=2.0).contains(s)));
                let scaled = HiddenTrace {
                    sample: 0,
                    layers: t.layers.iter().map(|p| LayerPair { input: p.input.scale(scale), output: p.output.scale(scale) }).collect(),
                };
                let imp2 = layer_importance(&[scaled]).unwrap();
                for (a, b) in imp.scores.iter().zip(&imp2.scores) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }

            #[test]
            fn dropped_are_n_smallest(scores in proptest::collection::vec(0u8..6, 1..12), n_frac in 0.0f64..1.0) {
                let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 4.0).collect();
                let ranked = rank_layers(&LayerImportance { scores: scores.clone(), calibration_size: 1 });
                let n = (n_frac * scores.len() as f64) as usize;
                // oracle: sort (score, index) pairs lexicographically
                let mut pairs: Vec<(f64, usize)> = scores.iter().cloned().zip(0..).collect();
                pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let expect: Vec<usize> = pairs.iter().map(|p| p.1).collect();
                prop_assert_eq!(&ranked, &expect);
                prop_assert_eq!(&ranked[..n], &expect[..n]);
            }

            #[test]
            fn param_count_strictly_monotone(n in 0usize..31, s in 0.0f64..0.9) {
                let shape = LanguageShape::llama2_7b();
                let base = count_language_params(&shape, 32 - n, s);
                prop_assert!(count_language_params(&shape, 32 - n - 1, s) < base);
                prop_assert!(count_language_params(&shape, 32 - n, s + 0.05) < base);
            }
        }
    }
}
