//! Post-norm transformer encoder with a tied MLM head and a CLS
//! classification head.
//!
//! Parameters live in a [`ParamStore`] under a prefix (`general` or
//! `domain`):
//!
//! ```text
//! {p}.embed.tokens            V × d
//! {p}.embed.positions         max_seq_len × d
//! {p}.layer{i}.attn.{wq,wk,wv,wo}   d × d   (head j owns columns j·d_k..(j+1)·d_k)
//! {p}.layer{i}.ln1.{gamma,beta}     d
//! {p}.layer{i}.ffn.w1 d × d_ff, .b1 d_ff, .w2 d_ff × d, .b2 d
//! {p}.layer{i}.ln2.{gamma,beta}     d
//! {p}.mlm.bias                V
//! {p}.cls.l{j}.{weight,bias}
//! ```
//!
//! Layers are numbered from 1.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::special;
use crate::error::{Error, Result};
use crate::fusion::{self, Variant};
use crate::graph::{Graph, Var};
use crate::params::{init, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// L=6, d_model=32, 2 heads, d_ff=64, n ≤ 32.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 6,
            d_model: 32,
            num_heads: 2,
            d_ff: 64,
            vocab_size,
            max_seq_len: 32,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config("max_seq_len must be at least 1"));
        }
        if self.vocab_size <= special::COUNT {
            return Err(Error::config(format!(
                "vocab_size {} leaves no room beyond {} specials",
                self.vocab_size,
                special::COUNT
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Parameter count of the encoder body plus the MLM bias.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let per_layer = 4 * d * d + d * f + f + f * d + d + 4 * d;
        (self.vocab_size + self.max_seq_len) * d + self.num_layers * per_layer + self.vocab_size
    }
}

/// Classification head shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub num_layers: usize,
    pub dropout: f64,
}

impl HeadConfig {
    pub fn new(num_classes: usize, num_layers: usize) -> Self {
        HeadConfig {
            num_classes,
            num_layers,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("classification needs at least 2 classes"));
        }
        if !(1..=2).contains(&self.num_layers) {
            return Err(Error::config("classification head has 1 or 2 layers"));
        }
        Ok(())
    }
}

pub(crate) fn layer_name(prefix: &str, layer: usize, leaf: &str) -> String {
    format!("{prefix}.layer{layer}.{leaf}")
}

/// Registers a randomly initialized encoder under `prefix`.
pub fn init_encoder<R: Rng>(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    prefix: &str,
    rng: &mut R,
    std: f64,
    frozen: bool,
) -> Result<()> {
    cfg.validate()?;
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let put = |store: &mut ParamStore, name: String, t: Tensor| store.insert(name, t, frozen);
    put(
        store,
        format!("{prefix}.embed.tokens"),
        init::normal_tensor(rng, vec![cfg.vocab_size, d], std),
    )?;
    put(
        store,
        format!("{prefix}.embed.positions"),
        init::normal_tensor(rng, vec![cfg.max_seq_len, d], std),
    )?;
    for i in 1..=cfg.num_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            put(
                store,
                layer_name(prefix, i, &format!("attn.{w}")),
                init::normal_tensor(rng, vec![d, d], std),
            )?;
        }
        for ln in ["ln1", "ln2"] {
            put(
                store,
                layer_name(prefix, i, &format!("{ln}.gamma")),
                Tensor::filled(vec![d], 1.0),
            )?;
            put(
                store,
                layer_name(prefix, i, &format!("{ln}.beta")),
                Tensor::zeros(vec![d]),
            )?;
        }
        put(
            store,
            layer_name(prefix, i, "ffn.w1"),
            init::normal_tensor(rng, vec![d, f], std),
        )?;
        put(store, layer_name(prefix, i, "ffn.b1"), Tensor::zeros(vec![f]))?;
        put(
            store,
            layer_name(prefix, i, "ffn.w2"),
            init::normal_tensor(rng, vec![f, d], std),
        )?;
        put(store, layer_name(prefix, i, "ffn.b2"), Tensor::zeros(vec![d]))?;
    }
    put(store, format!("{prefix}.mlm.bias"), Tensor::zeros(vec![cfg.vocab_size]))?;
    Ok(())
}

pub fn init_class_head<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    d_model: usize,
    head: &HeadConfig,
    rng: &mut R,
    std: f64,
) -> Result<()> {
    head.validate()?;
    for l in 1..=head.num_layers {
        let out = if l == head.num_layers {
            head.num_classes
        } else {
            d_model
        };
        store.insert(
            format!("{prefix}.cls.l{l}.weight"),
            init::normal_tensor(rng, vec![d_model, out], std),
            false,
        )?;
        store.insert(format!("{prefix}.cls.l{l}.bias"), Tensor::zeros(vec![out]), false)?;
    }
    Ok(())
}

/// Inverted dropout with its own deterministic stream. `Dropout::off()` is
/// the identity and records nothing on the tape.
#[derive(Debug)]
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    /// Encoder dropout at rate `p`; head dropout rates are taken from the
    /// head config. A zero rate still draws no mask.
    pub fn new(p: f64, seed: u64) -> Self {
        Dropout {
            p,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        self.apply_rate(g, x, self.p)
    }

    pub fn apply_rate(&mut self, g: &mut Graph, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let (r, c) = g.dims(x);
        let keep = 1.0 / (1.0 - p);
        let factors = (0..r * c)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        g.mul_const(x, factors)
    }
}

/// Embedding output and every layer output of one forward pass.
#[derive(Clone, Debug)]
pub struct EncoderActivations {
    pub embedding: Var,
    pub layers: Vec<Var>,
}

impl EncoderActivations {
    pub fn last(&self) -> Var {
        *self.layers.last().unwrap_or(&self.embedding)
    }
}

/// Per-layer hidden states of the general encoder for one input, computed
/// without dropout on an inference graph.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryCache {
    pub layers: Vec<Tensor>,
    pub fingerprint: u64,
}

/// Memory fused at one domain layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerHook {
    pub memory: Var,
    pub variant: Variant,
}

/// Token embedding plus learned absolute position embedding.
pub fn embed(g: &mut Graph, store: &ParamStore, cfg: &EncoderConfig, prefix: &str, ids: &[usize]) -> Result<Var> {
    if ids.len() > cfg.max_seq_len {
        return Err(Error::Length {
            len: ids.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Input(format!("token id {bad} >= vocab_size {}", cfg.vocab_size)));
    }
    let table = g.param(store, &format!("{prefix}.embed.tokens"))?;
    let positions = g.param(store, &format!("{prefix}.embed.positions"))?;
    let tok = g.gather(table, ids)?;
    let pos_ids: Vec<usize> = (0..ids.len()).collect();
    let pos = g.gather(positions, &pos_ids)?;
    g.add(tok, pos)
}

/// Projection weights of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttnWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl AttnWeights {
    /// Binds `{base}.{wq,wk,wv,wo}`.
    pub fn bind(g: &mut Graph, store: &ParamStore, base: &str) -> Result<Self> {
        Ok(AttnWeights {
            wq: g.param(store, &format!("{base}.wq"))?,
            wk: g.param(store, &format!("{base}.wk"))?,
            wv: g.param(store, &format!("{base}.wv"))?,
            wo: g.param(store, &format!("{base}.wo"))?,
        })
    }
}

pub(crate) fn check_pad_mask(n: usize, pad_mask: &[bool]) -> Result<()> {
    if pad_mask.len() != n {
        return Err(Error::shape(format!("pad mask of {} for {n} tokens", pad_mask.len())));
    }
    if n > 0 && !pad_mask.iter().any(|&k| k) {
        return Err(Error::Input("every position is padding".into()));
    }
    Ok(())
}

/// Runs the encoder stack. `hooks` maps 1-based layer indices to the memory
/// fused at that layer; all other layers use plain self-attention.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    prefix: &str,
    ids: &[usize],
    pad_mask: &[bool],
    hooks: Option<&BTreeMap<usize, LayerHook>>,
    dropout: &mut Dropout,
) -> Result<EncoderActivations> {
    check_pad_mask(ids.len(), pad_mask)?;
    if let Some(h) = hooks {
        if let Some(bad) = h.keys().find(|&&i| i == 0 || i > cfg.num_layers) {
            return Err(Error::config(format!(
                "hook at layer {bad}, encoder has layers 1..={}",
                cfg.num_layers
            )));
        }
    }
    let e = embed(g, store, cfg, prefix, ids)?;
    let mut x = dropout.apply(g, e)?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for i in 1..=cfg.num_layers {
        let hook = hooks.and_then(|h| h.get(&i));
        x = layer_forward(g, store, cfg, prefix, i, x, pad_mask, hook, dropout)?;
        layers.push(x);
    }
    Ok(EncoderActivations { embedding: e, layers })
}

/// One post-norm block: attention → add → LN → FFN → add → LN.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    prefix: &str,
    layer: usize,
    h_prev: Var,
    pad_mask: &[bool],
    hook: Option<&LayerHook>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let w = AttnWeights::bind(g, store, &layer_name(prefix, layer, "attn"))?;
    let heads = cfg.num_heads;
    let attn = match hook {
        None => fusion::memory_attention(g, h_prev, None, &w, pad_mask, heads)?,
        Some(LayerHook {
            memory,
            variant: Variant::MemoryAttention,
        }) => fusion::memory_attention(g, h_prev, Some(*memory), &w, pad_mask, heads)?,
        Some(LayerHook {
            memory,
            variant: Variant::CrossAttention,
        }) => {
            let self_out = fusion::memory_attention(g, h_prev, None, &w, pad_mask, heads)?;
            let xw = AttnWeights::bind(g, store, &layer_name(prefix, layer, "xattn"))?;
            fusion::cross_attention_fuse(g, self_out, *memory, &xw, pad_mask, heads)?
        }
        Some(LayerHook {
            memory,
            variant: Variant::GateAttention,
        }) => {
            let gate = g.param(store, &layer_name(prefix, layer, "gattn.gate"))?;
            fusion::gate_attention_fuse(g, h_prev, *memory, &w, gate, pad_mask, heads)?
        }
    };
    let attn = dropout.apply(g, attn)?;
    let res = g.add(h_prev, attn)?;
    let h1 = layer_norm(g, store, &layer_name(prefix, layer, "ln1"), res)?;

    let w1 = g.param(store, &layer_name(prefix, layer, "ffn.w1"))?;
    let b1 = g.param(store, &layer_name(prefix, layer, "ffn.b1"))?;
    let w2 = g.param(store, &layer_name(prefix, layer, "ffn.w2"))?;
    let b2 = g.param(store, &layer_name(prefix, layer, "ffn.b2"))?;
    let f = g.matmul(h1, w1)?;
    let f = g.add_row(f, b1)?;
    let f = g.gelu(f);
    let f = g.matmul(f, w2)?;
    let f = g.add_row(f, b2)?;
    let f = dropout.apply(g, f)?;
    let res = g.add(h1, f)?;
    layer_norm(g, store, &layer_name(prefix, layer, "ln2"), res)
}

fn layer_norm(g: &mut Graph, store: &ParamStore, base: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{base}.gamma"))?;
    let beta = g.param(store, &format!("{base}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Vocabulary logits `hidden · Eᵀ + bias` with `E` the token-embedding table.
pub fn mlm_logits(g: &mut Graph, store: &ParamStore, prefix: &str, hidden: Var) -> Result<Var> {
    let table = g.param(store, &format!("{prefix}.embed.tokens"))?;
    let bias = g.param(store, &format!("{prefix}.mlm.bias"))?;
    let logits = g.matmul_bt(hidden, table)?;
    g.add_row(logits, bias)
}

/// Class logits (1 × C) from the position-0 vector through the head's affine
/// layers, tanh between them.
pub fn classify_logits(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    hidden: Var,
    ids: &[usize],
    head: &HeadConfig,
    dropout: &mut Dropout,
) -> Result<Var> {
    if ids.first() != Some(&special::CLS) {
        return Err(Error::Input("sequence must begin with the CLS token".into()));
    }
    let mut x = g.select_rows(hidden, &[0])?;
    for l in 1..=head.num_layers {
        x = dropout.apply_rate(g, x, head.dropout)?;
        let w = g.param(store, &format!("{prefix}.cls.l{l}.weight"))?;
        let b = g.param(store, &format!("{prefix}.cls.l{l}.bias"))?;
        x = g.matmul(x, w)?;
        x = g.add_row(x, b)?;
        if l < head.num_layers {
            x = g.tanh(x);
        }
    }
    Ok(x)
}

/// FNV-1a of the serialized config combined with the parameter checksum.
pub fn fingerprint(cfg: &EncoderConfig, store: &ParamStore, prefix: &str) -> u64 {
    let text = serde_json::to_string(cfg).expect("config serializes");
    let mut h: u64 = store.checksum(&format!("{prefix}."));
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Runs the encoder under `prefix` on an inference graph and returns its
/// per-layer outputs.
pub fn memory_cache(
    store: &ParamStore,
    cfg: &EncoderConfig,
    prefix: &str,
    ids: &[usize],
    pad_mask: &[bool],
) -> Result<MemoryCache> {
    let mut g = Graph::inference();
    let acts = encoder_forward(&mut g, store, cfg, prefix, ids, pad_mask, None, &mut Dropout::off())?;
    Ok(MemoryCache {
        layers: acts.layers.iter().map(|v| g.tensor(*v)).collect(),
        fingerprint: fingerprint(cfg, store, prefix),
    })
}
