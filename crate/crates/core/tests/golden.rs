//! Frozen outputs of the seed-42 default model. A change here means the
//! numerics changed; update only deliberately.

use evla_core::format::{sha256_hex, to_bytes};
use evla_core::layer_prune::calibration_sample;
use evla_core::model::forward_stack;
use evla_core::{infer, CachePolicy, InferenceOptions, ModelBundle, ModelConfig, Tensor, TokenPruneConfig};

const MODEL_SHA256: &str = "93e6bfe3daeccbd63ff277a4c31898e237767b4c6b605f667c42a059fc9bc747";
/// Measured 0.3030 when frozen.
const INTERVAL5_DEVIATION_BOUND: f32 = 0.32;

fn setup() -> (ModelBundle, Tensor, Vec<u32>) {
    let m = ModelBundle::generate(&ModelConfig::default()).unwrap();
    let (img, ids) = calibration_sample(&m.config, 42, 0);
    (m, img, ids)
}

#[test]
fn model_file_digest() {
    let (m, _, _) = setup();
    assert_eq!(sha256_hex(&to_bytes(&m).unwrap()), MODEL_SHA256);
}

#[test]
fn forward_checksums() {
    let (m, img, ids) = setup();
    assert_eq!(img.checksum(), 0x1ed1_46a5_daf2_deb9);
    let v = m.encode_image(&img).unwrap();
    let t = m.embed_text(&ids).unwrap();
    assert_eq!(v.checksum(), 0x2635_6dab_f698_f23e);
    assert_eq!(t.checksum(), 0x61af_42ee_9c19_2839);
    let s = forward_stack(&v, &t, &m.language.layers, m.config.n_heads, Some(2)).unwrap();
    assert_eq!(s.hidden.checksum(), 0xd2d8_44d1_a250_bdcd);
}

#[test]
fn action_checksums() {
    let (m, img, ids) = setup();
    let base = infer(&m, &img, &ids, &InferenceOptions::baseline(&m)).unwrap();
    assert_eq!(Tensor::vector(base.cognition.clone()).checksum(), 0xcc37_e894_7e6a_8cef);
    assert_eq!(base.actions.checksum(), 0x023e_06df_a06e_bb5f);
    let accel = InferenceOptions {
        token_prune: Some(TokenPruneConfig::default()),
        cache: CachePolicy { interval: 5 },
        ..InferenceOptions::baseline(&m)
    };
    let out = infer(&m, &img, &ids, &accel).unwrap();
    assert_eq!(out.actions.checksum(), 0x587c_6036_cc1a_e6ae);
}

#[test]
fn cache_deviation_bound() {
    let (m, img, ids) = setup();
    let base = infer(&m, &img, &ids, &InferenceOptions::baseline(&m)).unwrap();
    let cached = InferenceOptions {
        cache: CachePolicy { interval: 5 },
        ..InferenceOptions::baseline(&m)
    };
    let dev = infer(&m, &img, &ids, &cached).unwrap().actions.max_abs_diff(&base.actions);
    assert!(dev > 0.0 && dev <= INTERVAL5_DEVIATION_BOUND, "{dev}");
}
