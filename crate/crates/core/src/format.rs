//! The EVLA model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EVLA" | u32 version | u64 manifest_len | manifest (UTF-8 JSON)
//! u32 tensor_count
//! per tensor: u32 name_len | name | u32 rank | rank × u64 dims | f32 data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::{ActionWeights, DitBlockWeights};
use crate::config::{ModelConfig, PruningPlan};
use crate::error::{Error, Result};
use crate::model::{LanguageWeights, LayerWeights, ModelBundle, VisionWeights};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"EVLA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    /// Original indices of the retained decoder layers.
    pub retained_layers: Vec<usize>,
    /// MLP width of each retained layer.
    pub layer_d_ff: Vec<usize>,
    pub plan: Option<PruningPlan>,
    pub language_params: u64,
}

impl Manifest {
    pub fn of(model: &ModelBundle) -> Self {
        Self {
            config: model.config.clone(),
            retained_layers: model.retained_layers(),
            layer_d_ff: model.language.layers.iter().map(LayerWeights::d_ff).collect(),
            plan: model.plan.clone(),
            language_params: model.language_param_count() as u64,
        }
    }
}

fn named_tensors(model: &ModelBundle) -> Vec<(String, &Tensor)> {
    let mut out = vec![
        ("vision.proj".to_string(), &model.vision.proj),
        ("vision.bias".to_string(), &model.vision.bias),
        ("language.embed".to_string(), &model.language.embed),
    ];
    for layer in &model.language.layers {
        for (n, t) in layer.named_tensors() {
            out.push((format!("language.layers.{}.{n}", layer.index), t));
        }
    }
    out.push(("language.final_norm_gain".into(), &model.language.final_norm_gain));
    out.push(("language.final_norm_bias".into(), &model.language.final_norm_bias));
    let a = &model.action;
    out.push(("action.cond_proj".into(), &a.cond_proj));
    out.push(("action.cond_bias".into(), &a.cond_bias));
    for (b, block) in a.blocks.iter().enumerate() {
        for (n, t) in block.named_tensors() {
            out.push((format!("action.blocks.{b}.{n}"), t));
        }
    }
    out.push(("action.eps_head".into(), &a.eps_head));
    out.push(("action.action_head".into(), &a.action_head));
    out.push(("action.action_bias".into(), &a.action_bias));
    out
}

pub fn to_bytes(model: &ModelBundle) -> Result<Vec<u8>> {
    let manifest = serde_json::to_vec(&Manifest::of(model))?;
    let tensors = named_tensors(model);
    let payload: usize = tensors.iter().map(|(n, t)| 8 + n.len() + 8 * t.dims().len() + 4 * t.numel()).sum();
    let mut buf = Vec::with_capacity(24 + manifest.len() + payload);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format(format!("{what} overflows usize")))
    }
}

fn read_tensors(r: &mut Reader) -> Result<BTreeMap<String, Tensor>> {
    let count = r.u32("tensor count")?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.len("dimension")?);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let data = r
            .take(numel, "tensor data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))?;
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != r.buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", r.buf.len() - r.pos)));
    }
    Ok(map)
}

struct Tensors(BTreeMap<String, Tensor>);

impl Tensors {
    fn get(&mut self, name: &str, dims: &[usize]) -> Result<Tensor> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if t.dims() != dims {
            return Err(Error::Format(format!(
                "tensor {name} has dims {:?}, expected {dims:?}",
                t.dims()
            )));
        }
        Ok(t)
    }
}

fn assemble(manifest: Manifest, mut t: Tensors) -> Result<ModelBundle> {
    let cfg = manifest.config;
    cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
    if manifest.retained_layers.len() != manifest.layer_d_ff.len() {
        return Err(Error::Format("retained_layers and layer_d_ff differ in length".into()));
    }
    let (d, dd, a) = (cfg.d_model, cfg.dit_d_model, cfg.action_dim);
    let p = cfg.patch_size().map_err(|e| Error::Format(e.to_string()))?;

    let vision = VisionWeights {
        proj: t.get("vision.proj", &[p * p, d])?,
        bias: t.get("vision.bias", &[d])?,
    };
    let embed = t.get("language.embed", &[cfg.vocab_size, d])?;
    let mut layers = Vec::with_capacity(manifest.retained_layers.len());
    for (&index, &f) in manifest.retained_layers.iter().zip(&manifest.layer_d_ff) {
        let pre = format!("language.layers.{index}.");
        let mut g = |n: &str, dims: &[usize]| t.get(&format!("{pre}{n}"), dims);
        layers.push(LayerWeights {
            index,
            wq: g("wq", &[d, d])?,
            wk: g("wk", &[d, d])?,
            wv: g("wv", &[d, d])?,
            wo: g("wo", &[d, d])?,
            w_gate: g("w_gate", &[d, f])?,
            w_up: g("w_up", &[d, f])?,
            w_down: g("w_down", &[f, d])?,
            ln1_gain: g("ln1_gain", &[d])?,
            ln1_bias: g("ln1_bias", &[d])?,
            ln2_gain: g("ln2_gain", &[d])?,
            ln2_bias: g("ln2_bias", &[d])?,
        });
    }
    let language = LanguageWeights {
        embed,
        layers,
        final_norm_gain: t.get("language.final_norm_gain", &[d])?,
        final_norm_bias: t.get("language.final_norm_bias", &[d])?,
    };

    let cond_proj = t.get("action.cond_proj", &[d, dd])?;
    let cond_bias = t.get("action.cond_bias", &[dd])?;
    let f = crate::action::DIT_MLP_RATIO * dd;
    let mut blocks = Vec::with_capacity(cfg.dit_blocks);
    for b in 0..cfg.dit_blocks {
        let pre = format!("action.blocks.{b}.");
        let mut g = |n: &str, dims: &[usize]| t.get(&format!("{pre}{n}"), dims);
        blocks.push(DitBlockWeights {
            ln1_gain: g("ln1_gain", &[dd])?,
            ln1_bias: g("ln1_bias", &[dd])?,
            wq: g("wq", &[dd, dd])?,
            wk: g("wk", &[dd, dd])?,
            wv: g("wv", &[dd, dd])?,
            wo: g("wo", &[dd, dd])?,
            ln2_gain: g("ln2_gain", &[dd])?,
            ln2_bias: g("ln2_bias", &[dd])?,
            w1: g("w1", &[dd, f])?,
            b1: g("b1", &[f])?,
            w2: g("w2", &[f, dd])?,
            b2: g("b2", &[dd])?,
        });
    }
    let action = ActionWeights {
        heads: cfg.dit_heads,
        cond_proj,
        cond_bias,
        blocks,
        eps_head: t.get("action.eps_head", &[dd, dd])?,
        action_head: t.get("action.action_head", &[dd, a])?,
        action_bias: t.get("action.action_bias", &[a])?,
    };
    if let Some(extra) = t.0.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }

    let model = ModelBundle {
        config: cfg,
        vision,
        language,
        action,
        plan: manifest.plan,
    };
    if model.language_param_count() as u64 != manifest.language_params {
        return Err(Error::Format(format!(
            "manifest claims {} language parameters, tensors hold {}",
            manifest.language_params,
            model.language_param_count()
        )));
    }
    Ok(model)
}

pub fn from_bytes(buf: &[u8]) -> Result<ModelBundle> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not an EVLA file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = r.len("manifest length")?;
    let manifest: Manifest =
        serde_json::from_slice(r.take(n, "manifest")?).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let tensors = read_tensors(&mut r)?;
    assemble(manifest, Tensors(tensors))
}

/// Reads only the manifest.
pub fn read_manifest(buf: &[u8]) -> Result<Manifest> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not an EVLA file".into()));
    }
    r.u32("version")?;
    let n = r.len("manifest length")?;
    serde_json::from_slice(r.take(n, "manifest")?).map_err(|e| Error::Format(format!("manifest: {e}")))
}

pub fn save(model: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelBundle> {
    from_bytes(&fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer_prune::{prune_layers, sparsify_mlp};

    #[test]
    fn header_layout() {
        let m = ModelBundle::generate(&ModelConfig::tiny()).unwrap();
        let b = to_bytes(&m).unwrap();
        assert_eq!(&b[..4], &[0x45, 0x56, 0x4C, 0x41]);
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        let n = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&b[16..16 + n]).unwrap();
        assert_eq!(manifest["retained_layers"], serde_json::json!([0, 1, 2, 3]));
        let count = u32::from_le_bytes(b[16 + n..20 + n].try_into().unwrap());
        assert_eq!(count as usize, 3 + 4 * 11 + 2 + 2 + 2 * 12 + 3);
    }

    #[test]
    fn pruned_round_trip() {
        let m = ModelBundle::generate(&ModelConfig::tiny()).unwrap();
        let m = prune_layers(&m, 2, &[3, 1, 0, 2]).unwrap();
        let (m, _) = sparsify_mlp(&m, 0.25).unwrap();
        let b = to_bytes(&m).unwrap();
        let back = from_bytes(&b).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back).unwrap(), b);
        assert_eq!(read_manifest(&b).unwrap().layer_d_ff, vec![24, 24]);
    }

    #[test]
    fn rejects_corruption() {
        let m = ModelBundle::generate(&ModelConfig::tiny()).unwrap();
        let b = to_bytes(&m).unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(from_bytes(&b[..b.len() - 1]), Err(Error::Format(_))));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(from_bytes(&long), Err(Error::Format(_))));
        let mut ver = b;
        ver[4] = 2;
        assert!(matches!(from_bytes(&ver), Err(Error::Format(_))));
    }

    #[test]
    fn sha_of_empty() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    mod props {
        use super::*;
        use crate::layer_prune::LayerImportance;
        use crate::pipeline::{apply_plan, DropSpec, PlanRequest};
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn round_trip_is_bitwise(seed in any::<u64>(), scores in proptest::collection::vec(-10.0f64..10.0, 4), drop in 0usize..3) {
                let cfg = ModelConfig { seed, ..ModelConfig::tiny() };
                let m = ModelBundle::generate(&cfg).unwrap();
                let imp = LayerImportance { scores, calibration_size: 3 };
                let req = PlanRequest { drop: DropSpec::Count(drop), mlp_sparsity: 0.1, token: None, cache_interval: 3 };
                let m = apply_plan(&m, &imp, &req).unwrap();
                let bytes = to_bytes(&m).unwrap();
                let back = from_bytes(&bytes).unwrap();
                prop_assert_eq!(&back, &m);
                prop_assert_eq!(to_bytes(&back).unwrap(), bytes);
            }
        }
    }
}
