//! Tiny pre-norm decoder-only transformer with tied input/output embeddings
//! and optional low-rank adapters on its projection matrices.

pub mod checkpoint;
mod lora;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::tokenizer::{EOS, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use lora::{merge_lora, LoraAdapter, LoraAdapters, LoraConfig};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            context_len: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("model.vocab_size", self.vocab_size),
            ("model.d_model", self.d_model),
            ("model.n_layers", self.n_layers),
            ("model.n_heads", self.n_heads),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
            problems.push(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.context_len < 2 {
            problems.push("model.context_len must be at least 2".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Exact number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * 4 * d * d + 4 * d;
        self.vocab_size * d + self.context_len * d + self.n_layers * per_layer + 2 * d
    }

    pub fn to_header(&self) -> Vec<(String, String)> {
        vec![
            ("model.vocab_size".into(), self.vocab_size.to_string()),
            ("model.d_model".into(), self.d_model.to_string()),
            ("model.n_layers".into(), self.n_layers.to_string()),
            ("model.n_heads".into(), self.n_heads.to_string()),
            ("model.context_len".into(), self.context_len.to_string()),
            ("model.seed".into(), self.seed.to_string()),
        ]
    }
}

const PER_LAYER: usize = 10;

/// Position of a weight inside one transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Ln1Gain = 0,
    Ln1Bias,
    Query,
    Key,
    Value,
    Output,
    Ln2Gain,
    Ln2Bias,
    MlpIn,
    MlpOut,
}

impl Slot {
    const ALL: [Slot; PER_LAYER] = [
        Slot::Ln1Gain,
        Slot::Ln1Bias,
        Slot::Query,
        Slot::Key,
        Slot::Value,
        Slot::Output,
        Slot::Ln2Gain,
        Slot::Ln2Bias,
        Slot::MlpIn,
        Slot::MlpOut,
    ];

    fn suffix(self) -> &'static str {
        match self {
            Slot::Ln1Gain => "ln1.gain",
            Slot::Ln1Bias => "ln1.bias",
            Slot::Query => "attn.q",
            Slot::Key => "attn.k",
            Slot::Value => "attn.v",
            Slot::Output => "attn.o",
            Slot::Ln2Gain => "ln2.gain",
            Slot::Ln2Bias => "ln2.bias",
            Slot::MlpIn => "mlp.in",
            Slot::MlpOut => "mlp.out",
        }
    }
}

pub const TOKEN_EMBEDDING: usize = 0;
pub const POSITION_EMBEDDING: usize = 1;

pub fn layer_index(layer: usize, slot: Slot) -> usize {
    2 + layer * PER_LAYER + slot as usize
}

/// The weight set θ: tensors in a fixed canonical order with stable names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![
        ("tok_emb".to_string(), vec![cfg.vocab_size, d]),
        ("pos_emb".to_string(), vec![cfg.context_len, d]),
    ];
    for l in 0..cfg.n_layers {
        for slot in Slot::ALL {
            let shape = match slot {
                Slot::Ln1Gain | Slot::Ln1Bias | Slot::Ln2Gain | Slot::Ln2Bias => vec![d],
                Slot::Query | Slot::Key | Slot::Value | Slot::Output => vec![d, d],
                Slot::MlpIn => vec![d, 4 * d],
                Slot::MlpOut => vec![4 * d, d],
            };
            out.push((format!("h{l}.{}", slot.suffix()), shape));
        }
    }
    out.push(("ln_f.gain".to_string(), vec![d]));
    out.push(("ln_f.bias".to_string(), vec![d]));
    out
}

/// Draws a fresh parameter set; deterministic in `config.seed`.
pub fn init<T: Scalar>(config: &ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in param_layout(config) {
        let n: usize = shape.iter().product();
        let data: Vec<T> = if name.ends_with("gain") {
            vec![T::one(); n]
        } else if name.ends_with("bias") {
            vec![T::zero(); n]
        } else {
            (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
        };
        names.push(name);
        tensors.push(Tensor::new(shape, data)?);
    }
    Ok(ModelParams {
        config: config.clone(),
        names,
        tensors,
    })
}

impl<T: Scalar> ModelParams<T> {
    /// Rebuilds a parameter set from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} weights, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for ((want, shape), (name, t)) in layout.into_iter().zip(named) {
            if want != name || t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "expected {want} {shape:?}, found {name} {:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParams {
            config,
            names,
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places every tensor into `g`, as trainable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.shape().to_vec(), t.data().to_vec())
                } else {
                    g.constant(t.shape().to_vec(), t.data().to_vec())
                }
            })
            .collect()
    }

    /// SHA-256 over names, shapes and values; equal hashes mean bit-equal weights.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn check_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Contract("empty token sequence".into()));
    }
    if tokens.len() > config.context_len {
        return Err(Error::ContextOverflow {
            len: tokens.len(),
            context_len: config.context_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Vocabulary {
            id,
            vocab_size: config.vocab_size,
        });
    }
    Ok(())
}

/// Adapter tensors bound into a graph: `(weight index, A, B, scale)`.
pub struct BoundAdapters<T: Scalar> {
    entries: Vec<(usize, Var, Var)>,
    scale: T,
}

impl<T: Scalar> BoundAdapters<T> {
    pub fn vars(&self) -> impl Iterator<Item = (Var, Var)> + '_ {
        self.entries.iter().map(|&(_, a, b)| (a, b))
    }
}

fn project<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    params: &[Var],
    index: usize,
    adapters: Option<&BoundAdapters<T>>,
) -> Result<Var> {
    let base = g.matmul(x, params[index])?;
    let Some(bound) = adapters else { return Ok(base) };
    let Some(&(_, a, b)) = bound.entries.iter().find(|(i, _, _)| *i == index) else {
        return Ok(base);
    };
    let xb = g.matmul(x, b)?;
    let xba = g.matmul(xb, a)?;
    let delta = g.scale(xba, bound.scale)?;
    g.add(base, delta)
}

fn norm_affine<T: Scalar>(g: &mut Graph<T>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let s = g.mul(n, gain)?;
    g.add(s, bias)
}

/// Final hidden states `[T, d_model]` for `tokens`.
pub fn hidden_states<T: Scalar>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    params: &[Var],
    tokens: &[usize],
    adapters: Option<&BoundAdapters<T>>,
) -> Result<Var> {
    check_tokens(config, tokens)?;
    let len = tokens.len();
    let d = config.d_model;
    let dh = config.head_dim();
    let inv_sqrt = T::lit(1.0 / (dh as f64).sqrt());
    let positions: Vec<usize> = (0..len).collect();

    let tok = g.gather(params[TOKEN_EMBEDDING], tokens)?;
    let pos = g.gather(params[POSITION_EMBEDDING], &positions)?;
    let mut h = g.add(tok, pos)?;

    for l in 0..config.n_layers {
        let p = |s: Slot| params[layer_index(l, s)];
        let a = norm_affine(g, h, p(Slot::Ln1Gain), p(Slot::Ln1Bias))?;
        let q = project(g, a, params, layer_index(l, Slot::Query), adapters)?;
        let k = project(g, a, params, layer_index(l, Slot::Key), adapters)?;
        let v = project(g, a, params, layer_index(l, Slot::Value), adapters)?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, inv_sqrt)?;
            let masked = g.causal_mask(scores)?;
            let attn = g.softmax(masked)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let o = project(g, cat, params, layer_index(l, Slot::Output), adapters)?;
        h = g.add(h, o)?;

        let a = norm_affine(g, h, p(Slot::Ln2Gain), p(Slot::Ln2Bias))?;
        let up = project(g, a, params, layer_index(l, Slot::MlpIn), adapters)?;
        let act = g.gelu(up)?;
        let down = project(g, act, params, layer_index(l, Slot::MlpOut), adapters)?;
        h = g.add(h, down)?;
    }
    let n = params.len();
    debug_assert_eq!(g.shape(h), &[len, d]);
    norm_affine(g, h, params[n - 2], params[n - 1])
}

/// Logits `[T, vocab]` through the tied output projection.
pub fn logits_graph<T: Scalar>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    params: &[Var],
    tokens: &[usize],
    adapters: Option<&BoundAdapters<T>>,
) -> Result<Var> {
    let h = hidden_states(g, config, params, tokens, adapters)?;
    let unembed = g.transpose(params[TOKEN_EMBEDDING])?;
    g.matmul(h, unembed)
}

/// Evaluates logits `[T, vocab]` without tracking gradients.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[usize],
    adapters: Option<&LoraAdapters<T>>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false)?;
    let bound = adapters.map(|a| a.bind(&mut g, params, false)).transpose()?;
    let logits = logits_graph(&mut g, &params.config, &vars, tokens, bound.as_ref())?;
    Tensor::new(g.shape(logits).to_vec(), g.value(logits).to_vec())
}

/// Logits for the last position only.
fn next_token_logits<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[usize],
    adapters: Option<&LoraAdapters<T>>,
) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false)?;
    let bound = adapters.map(|a| a.bind(&mut g, params, false)).transpose()?;
    let h = hidden_states(&mut g, &params.config, &vars, tokens, bound.as_ref())?;
    let d = params.config.d_model;
    let last = &g.value(h)[(tokens.len() - 1) * d..];
    let emb = params.tensors[TOKEN_EMBEDDING].data();
    Ok(emb
        .chunks(d)
        .map(|row| row.iter().zip(last).map(|(&w, &x)| w * x).sum())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    /// Prompt followed by the continuation.
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    /// True when the window had to drop tokens from the left.
    pub truncated: bool,
    pub stopped_at_eos: bool,
}

impl Generation {
    pub fn continuation(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }
}

/// Autoregressive decoding until `max_new` tokens or end-of-text.
pub fn generate<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &[usize],
    max_new: usize,
    decoding: Decoding,
    adapters: Option<&LoraAdapters<T>>,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::Contract("generation needs a non-empty prompt".into()));
    }
    let ctx = params.config.context_len;
    let mut tokens = prompt.to_vec();
    let mut truncated = false;
    let mut stopped_at_eos = false;
    let mut rng = match decoding {
        Decoding::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Decoding::Greedy => None,
    };
    for _ in 0..max_new {
        let start = tokens.len().saturating_sub(ctx);
        truncated |= start > 0;
        let logits = next_token_logits(params, &tokens[start..], adapters)?;
        let next = match (decoding, rng.as_mut()) {
            (Decoding::Temperature { temperature, .. }, Some(rng)) if temperature > 0.0 => {
                sample(&logits, temperature, rng)
            }
            _ => argmax(&logits),
        };
        tokens.push(next);
        if next == EOS {
            stopped_at_eos = true;
            break;
        }
    }
    Ok(Generation {
        tokens,
        prompt_len: prompt.len(),
        truncated,
        stopped_at_eos,
    })
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample<T: Scalar>(logits: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    use rand::Rng;
    let scaled: Vec<f64> = logits.iter().map(|v| v.as_f64() / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}
