//! The VLA forward pipeline up to the cognition feature: patch-projection
//! vision stub, text embedding, and a pre-norm causal decoder stack.
//!
//! Sequence order inside the stack is `[text..., visual...]`, so every visual
//! query can attend to every text key under the causal mask.

use crate::action::ActionWeights;
use crate::config::{ModelConfig, PruningPlan};
use crate::error::{Error, Result};
use crate::tensor::{layer_norm, matmul, silu, softmax_in_place, uniform_init, SeededGenerator, Tensor};

pub(crate) const STREAM_VISION: u64 = 1;
pub(crate) const STREAM_EMBED: u64 = 2;
pub(crate) const STREAM_ACTION: u64 = 3;
pub(crate) const STREAM_LAYER_BASE: u64 = 100;
pub(crate) const STREAM_DIT_BASE: u64 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct VisionWeights {
    /// `[patch_dim × d_model]`
    pub proj: Tensor,
    pub bias: Tensor,
}

/// One decoder layer. `index` is the layer's position in the original,
/// unpruned stack.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub index: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    /// `[d_model × d_ff]`
    pub w_gate: Tensor,
    pub w_up: Tensor,
    /// `[d_ff × d_model]`
    pub w_down: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl LayerWeights {
    pub fn generate(config: &ModelConfig, index: usize) -> Self {
        let d = config.d_model;
        let f = config.d_ff;
        let mut g = SeededGenerator::derive(config.seed, STREAM_LAYER_BASE + index as u64);
        let wq = uniform_init(&mut g, &[d, d], d, d);
        let wk = uniform_init(&mut g, &[d, d], d, d);
        let wv = uniform_init(&mut g, &[d, d], d, d);
        let wo = uniform_init(&mut g, &[d, d], d, d);
        let w_gate = uniform_init(&mut g, &[d, f], d, f);
        let w_up = uniform_init(&mut g, &[d, f], d, f);
        let w_down = uniform_init(&mut g, &[f, d], f, d);
        Self {
            index,
            wq,
            wk,
            wv,
            wo,
            w_gate,
            w_up,
            w_down,
            ln1_gain: Tensor::filled(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::filled(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn d_ff(&self) -> usize {
        self.w_up.cols()
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Zero the attention output and MLP down projections, turning the layer
    /// into an exact identity.
    pub fn make_pure_residual(&mut self) {
        self.wo = Tensor::zeros(self.wo.dims());
        self.w_down = Tensor::zeros(self.w_down.dims());
    }

    pub(crate) fn named_tensors(&self) -> [(&'static str, &Tensor); 11] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageWeights {
    /// `[vocab × d_model]`
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Tensor,
    pub final_norm_bias: Tensor,
}

impl LanguageWeights {
    pub fn param_count(&self) -> usize {
        self.embed.numel()
            + self.layers.iter().map(LayerWeights::param_count).sum::<usize>()
            + self.final_norm_gain.numel()
            + self.final_norm_bias.numel()
    }
}

/// Configuration plus every weight tensor of the three pipeline stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub vision: VisionWeights,
    pub language: LanguageWeights,
    pub action: ActionWeights,
    /// Set once the bundle has been through `prune`.
    pub plan: Option<PruningPlan>,
}

impl ModelBundle {
    pub fn generate(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let p = config.patch_size()?;
        let patch_dim = p * p;

        let mut g = SeededGenerator::derive(config.seed, STREAM_VISION);
        let vision = VisionWeights {
            proj: uniform_init(&mut g, &[patch_dim, d], patch_dim, d),
            bias: uniform_init(&mut g, &[d], patch_dim, d),
        };

        let mut g = SeededGenerator::derive(config.seed, STREAM_EMBED);
        let language = LanguageWeights {
            embed: uniform_init(&mut g, &[config.vocab_size, d], config.vocab_size, d),
            layers: (0..config.n_layers)
                .map(|i| LayerWeights::generate(config, i))
                .collect(),
            final_norm_gain: Tensor::filled(&[d], 1.0),
            final_norm_bias: Tensor::zeros(&[d]),
        };

        Ok(Self {
            config: config.clone(),
            vision,
            language,
            action: ActionWeights::generate(config),
            plan: None,
        })
    }

    /// Original indices of the layers still in the stack.
    pub fn retained_layers(&self) -> Vec<usize> {
        self.language.layers.iter().map(|l| l.index).collect()
    }

    pub fn vision_param_count(&self) -> usize {
        self.vision.proj.numel() + self.vision.bias.numel()
    }

    pub fn language_param_count(&self) -> usize {
        self.language.param_count()
    }

    pub fn action_param_count(&self) -> usize {
        self.action.param_count()
    }

    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        encode_image(image, &self.vision, self.config.patch_grid()?)
    }

    pub fn embed_text(&self, ids: &[u32]) -> Result<Tensor> {
        if ids.len() > self.config.max_text_tokens {
            return Err(Error::input(format!(
                "{} text tokens exceed max_text_tokens {}",
                ids.len(),
                self.config.max_text_tokens
            )));
        }
        embed_text(ids, &self.language.embed)
    }
}

/// Splits `image` into a `grid × grid` raster of non-overlapping patches,
/// flattens each row-major, and projects to `d_model`.
pub fn encode_image(image: &Tensor, weights: &VisionWeights, grid: usize) -> Result<Tensor> {
    let [h, w] = image.dims() else {
        return Err(Error::shape(format!(
            "image must be 2-D, got {:?}",
            image.dims()
        )));
    };
    let (h, w) = (*h, *w);
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} image does not split into a {grid}x{grid} patch grid"
        )));
    }
    let (ph, pw) = (h / grid, w / grid);
    if ph * pw != weights.proj.rows() {
        return Err(Error::shape(format!(
            "{ph}x{pw} patches do not match projection input {}",
            weights.proj.rows()
        )));
    }
    let px = image.data();
    let mut patches = Vec::with_capacity(h * w);
    for gy in 0..grid {
        for gx in 0..grid {
            for y in 0..ph {
                let start = (gy * ph + y) * w + gx * pw;
                patches.extend_from_slice(&px[start..start + pw]);
            }
        }
    }
    let patches = Tensor::new(vec![grid * grid, ph * pw], patches)?;
    let mut out = matmul(&patches, &weights.proj)?;
    out.add_row_broadcast(weights.bias.data())?;
    Ok(out)
}

pub fn embed_text(ids: &[u32], table: &Tensor) -> Result<Tensor> {
    let vocab = table.rows();
    let idx = ids
        .iter()
        .map(|&id| {
            if (id as usize) < vocab {
                Ok(id as usize)
            } else {
                Err(Error::input(format!("token id {id} outside vocab {vocab}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    table.select_rows(&idx)
}

/// Post-softmax attention weights of one layer, `[heads × S × S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    /// 1-based position in the stack that produced it.
    pub layer: usize,
    pub weights: Tensor,
}

impl AttentionCapture {
    pub fn heads(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.weights.dims()[1]
    }

    /// `A[h][query][key]`
    pub fn at(&self, head: usize, query: usize, key: usize) -> f32 {
        let s = self.seq_len();
        self.weights.data()[(head * s + query) * s + key]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPair {
    pub input: Tensor,
    pub output: Tensor,
}

/// Input/output hidden states of every layer for one sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HiddenTrace {
    pub sample: usize,
    pub layers: Vec<LayerPair>,
}

impl HiddenTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Multi-head self-attention on already-normalized rows `h`, returning the
/// projected output and, when asked, the `[heads × S × S]` attention weights.
pub(crate) fn self_attention(
    h: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    n_heads: usize,
    causal: bool,
    capture: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let s = h.rows();
    let d = wq.cols();
    let dh = d / n_heads;
    let q = matmul(h, wq)?;
    let k = matmul(h, wk)?;
    let v = matmul(h, wv)?;
    let scale = 1.0 / (dh as f32).sqrt();

    let mut merged = Tensor::zeros(&[s, d]);
    let mut captured = capture.then(|| Vec::with_capacity(n_heads * s * s));
    for head in 0..n_heads {
        let cols: Vec<usize> = (head * dh..(head + 1) * dh).collect();
        let qh = q.select_cols(&cols)?;
        let kh_t = k.select_cols(&cols)?.transpose()?;
        let vh = v.select_cols(&cols)?;
        let mut scores = matmul(&qh, &kh_t)?;
        for i in 0..s {
            let row = scores.row_mut(i);
            row.iter_mut().for_each(|x| *x *= scale);
            if causal {
                softmax_in_place(&mut row[..=i]);
                row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
            } else {
                softmax_in_place(row);
            }
        }
        let ctx = matmul(&scores, &vh)?;
        for i in 0..s {
            merged.row_mut(i)[head * dh..(head + 1) * dh].copy_from_slice(ctx.row(i));
        }
        if let Some(buf) = captured.as_mut() {
            buf.extend_from_slice(scores.data());
        }
    }
    let out = matmul(&merged, wo)?;
    let weights = captured
        .map(|buf| Tensor::new(vec![n_heads, s, s], buf))
        .transpose()?;
    Ok((out, weights))
}

/// `x + Attn(LN1(x))`, then `+ MLP(LN2(.))` with a SiLU-gated MLP.
pub fn forward_layer(
    x: &Tensor,
    layer: &LayerWeights,
    n_heads: usize,
    capture: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    if x.rows() == 0 {
        return Err(Error::input("forward_layer on an empty sequence"));
    }
    let h = layer_norm(x, layer.ln1_gain.data(), layer.ln1_bias.data())?;
    let (attn, weights) =
        self_attention(&h, &layer.wq, &layer.wk, &layer.wv, &layer.wo, n_heads, true, capture)?;
    let x1 = x.add(&attn)?;

    let h2 = layer_norm(&x1, layer.ln2_gain.data(), layer.ln2_bias.data())?;
    let gate = matmul(&h2, &layer.w_gate)?;
    let mut up = matmul(&h2, &layer.w_up)?;
    for (u, g) in up.data_mut().iter_mut().zip(gate.data()) {
        *u *= silu(*g);
    }
    let mlp = matmul(&up, &layer.w_down)?;
    Ok((x1.add(&mlp)?, weights))
}

pub struct StackOutput {
    pub hidden: Tensor,
    pub trace: HiddenTrace,
    pub capture: Option<AttentionCapture>,
}

/// Runs `[text; visual]` through every layer, recording the hidden-state trace
/// and the attention weights of the 1-based `capture_layer`.
pub fn forward_stack(
    visual: &Tensor,
    text: &Tensor,
    layers: &[LayerWeights],
    n_heads: usize,
    capture_layer: Option<usize>,
) -> Result<StackOutput> {
    if let Some(c) = capture_layer {
        if c == 0 || c > layers.len() {
            return Err(Error::config(format!(
                "capture layer {c} outside [1, {}]",
                layers.len()
            )));
        }
    }
    let mut x = concat_sequence(text, visual)?;
    let mut trace = HiddenTrace::default();
    let mut capture = None;
    for (i, layer) in layers.iter().enumerate() {
        let want = capture_layer == Some(i + 1);
        let (next, weights) = forward_layer(&x, layer, n_heads, want)?;
        if let Some(weights) = weights {
            capture = Some(AttentionCapture {
                layer: i + 1,
                weights,
            });
        }
        trace.layers.push(LayerPair {
            input: x,
            output: next.clone(),
        });
        x = next;
    }
    Ok(StackOutput {
        hidden: x,
        trace,
        capture,
    })
}

/// Runs layers without recording anything.
pub(crate) fn run_layers(mut x: Tensor, layers: &[LayerWeights], n_heads: usize) -> Result<Tensor> {
    for layer in layers {
        x = forward_layer(&x, layer, n_heads, false)?.0;
    }
    Ok(x)
}

pub(crate) fn concat_sequence(text: &Tensor, visual: &Tensor) -> Result<Tensor> {
    if text.rows() + visual.rows() == 0 {
        return Err(Error::input("no tokens to process"));
    }
    if text.rows() == 0 {
        return Ok(visual.clone());
    }
    if visual.rows() == 0 {
        return Ok(text.clone());
    }
    Tensor::concat_rows(&[text, visual])
}

/// Hidden state at the final sequence position.
pub fn extract_cognition_feature(hidden: &Tensor) -> Result<Vec<f32>> {
    match hidden.rows() {
        0 => Err(Error::input("empty hidden state")),
        s => Ok(hidden.row(s - 1).to_vec()),
    }
}
