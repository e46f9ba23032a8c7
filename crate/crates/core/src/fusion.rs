//! Memory representations built from a general-encoder cache and the
//! attention blocks that consume them.
//!
//! Memory-attention appends `M_f·W^k` / `M_f·W^v` after the layer's own keys
//! and values, reusing the layer's projections. With no memory the same code
//! path is plain multi-head self-attention.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::RangeInclusive;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{check_pad_mask, layer_name, AttnWeights, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{init, ParamStore};
use crate::tensor::Tensor;

/// Which cache layers feed which domain layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Strategy {
    /// Last general layer into domain layer `dst`.
    SingleLayer { dst: usize },
    /// General layer `i` into domain layer `i` for every `i`.
    MultiLayer,
    /// Per-token gated mixture of all general layers into `dst`.
    Gated { dst: usize },
    /// Layers `1..=split` gated into `dst_low`, the rest into `dst_high`.
    ChunkGated {
        split: usize,
        dst_low: usize,
        dst_high: usize,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    MemoryAttention,
    CrossAttention,
    GateAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSpec {
    pub strategy: Strategy,
    #[serde(default)]
    pub variant: Variant,
}

impl FusionSpec {
    pub fn new(strategy: Strategy) -> Self {
        FusionSpec {
            strategy,
            variant: Variant::MemoryAttention,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self, l_general: usize, l_domain: usize) -> Result<()> {
        let dst_ok = |dst: usize, what: &str| {
            if dst == 0 || dst > l_domain {
                Err(Error::config(format!(
                    "{what} {dst} outside domain layers 1..={l_domain}"
                )))
            } else {
                Ok(())
            }
        };
        if l_general == 0 {
            return Err(Error::config("general encoder has no layers to remember"));
        }
        match self.strategy {
            Strategy::SingleLayer { dst } | Strategy::Gated { dst } => dst_ok(dst, "dst"),
            Strategy::MultiLayer => {
                if l_general != l_domain {
                    return Err(Error::config(format!(
                        "multi-layer fusion needs equal depths, got general {l_general} and domain {l_domain}"
                    )));
                }
                Ok(())
            }
            Strategy::ChunkGated {
                split,
                dst_low,
                dst_high,
            } => {
                if split == 0 || split >= l_general {
                    return Err(Error::config(format!(
                        "split {split} outside 1..={}",
                        l_general.saturating_sub(1)
                    )));
                }
                dst_ok(dst_low, "dst_low")?;
                dst_ok(dst_high, "dst_high")?;
                if dst_low == dst_high {
                    return Err(Error::config("dst_low and dst_high must differ"));
                }
                Ok(())
            }
        }
    }

    /// Gate slots owned by the strategy.
    pub fn gate_slots(&self) -> &'static [GateSlot] {
        match self.strategy {
            Strategy::Gated { .. } => &[GateSlot::Main],
            Strategy::ChunkGated { .. } => &[GateSlot::Low, GateSlot::High],
            _ => &[],
        }
    }
}

impl fmt::Display for FusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.strategy {
            Strategy::SingleLayer { dst } => write!(f, "single-layer(dst={dst})")?,
            Strategy::MultiLayer => write!(f, "multi-layer")?,
            Strategy::Gated { dst } => write!(f, "gated(dst={dst})")?,
            Strategy::ChunkGated {
                split,
                dst_low,
                dst_high,
            } => write!(f, "chunk-gated(split={split},low={dst_low},high={dst_high})")?,
        }
        match self.variant {
            Variant::MemoryAttention => Ok(()),
            Variant::CrossAttention => write!(f, "+cross-attention"),
            Variant::GateAttention => write!(f, "+gate-attention"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateSlot {
    Main,
    Low,
    High,
}

impl GateSlot {
    pub fn name(self) -> &'static str {
        match self {
            GateSlot::Main => "gate",
            GateSlot::Low => "gate_low",
            GateSlot::High => "gate_high",
        }
    }

    /// `{prefix}.fusion.{gate|gate_low|gate_high}`
    pub fn base(self, prefix: &str) -> String {
        format!("{prefix}.fusion.{}", self.name())
    }
}

/// The linear scorer `g(m) = ⟨weight, m⟩ + bias`, bound on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub weight: Var,
    pub bias: Var,
}

impl GateParams {
    pub fn bind(g: &mut Graph, store: &ParamStore, base: &str) -> Result<Self> {
        Ok(GateParams {
            weight: g.param(store, &format!("{base}.weight"))?,
            bias: g.param(store, &format!("{base}.bias"))?,
        })
    }

    /// Zero weight and bias: uniform mixing at the start of training.
    pub fn init(store: &mut ParamStore, base: &str, d_model: usize) -> Result<()> {
        store.insert(format!("{base}.weight"), Tensor::zeros(vec![d_model]), false)?;
        store.insert(format!("{base}.bias"), Tensor::zeros(vec![1]), false)
    }
}

/// Where the memory of one hooked layer comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MemorySource {
    /// Cache layer, 1-based.
    Layer(usize),
    Gated {
        slot: GateSlot,
        layers: RangeInclusive<usize>,
    },
}

/// Maps each hooked domain layer to its memory source.
pub fn plan_fusion(spec: &FusionSpec, l_general: usize, l_domain: usize) -> Result<BTreeMap<usize, MemorySource>> {
    spec.validate(l_general, l_domain)?;
    let mut plan = BTreeMap::new();
    match spec.strategy {
        Strategy::SingleLayer { dst } => {
            plan.insert(dst, MemorySource::Layer(l_general));
        }
        Strategy::MultiLayer => {
            for i in 1..=l_domain {
                plan.insert(i, MemorySource::Layer(i));
            }
        }
        Strategy::Gated { dst } => {
            plan.insert(
                dst,
                MemorySource::Gated {
                    slot: GateSlot::Main,
                    layers: 1..=l_general,
                },
            );
        }
        Strategy::ChunkGated {
            split,
            dst_low,
            dst_high,
        } => {
            plan.insert(
                dst_low,
                MemorySource::Gated {
                    slot: GateSlot::Low,
                    layers: 1..=split,
                },
            );
            plan.insert(
                dst_high,
                MemorySource::Gated {
                    slot: GateSlot::High,
                    layers: split + 1..=l_general,
                },
            );
        }
    }
    Ok(plan)
}

/// Registers the gate scorers and the variant weights at every hooked layer.
pub fn init_fusion_params<R: Rng>(
    store: &mut ParamStore,
    spec: &FusionSpec,
    domain: &EncoderConfig,
    l_general: usize,
    prefix: &str,
    rng: &mut R,
    std: f64,
) -> Result<()> {
    let plan = plan_fusion(spec, l_general, domain.num_layers)?;
    for slot in spec.gate_slots() {
        GateParams::init(store, &slot.base(prefix), domain.d_model)?;
    }
    let d = domain.d_model;
    for &layer in plan.keys() {
        match spec.variant {
            Variant::MemoryAttention => {}
            Variant::CrossAttention => {
                for w in ["wq", "wk", "wv", "wo"] {
                    let name = layer_name(prefix, layer, &format!("xattn.{w}"));
                    store.insert(name, init::normal_tensor(rng, vec![d, d], std), false)?;
                }
            }
            Variant::GateAttention => {
                let name = layer_name(prefix, layer, "gattn.gate");
                store.insert(name, Tensor::zeros(vec![domain.num_heads]), false)?;
            }
        }
    }
    Ok(())
}

/// Mixed memory plus the per-token layer weights α (n × L′).
#[derive(Clone, Copy, Debug)]
pub struct GatedMemory {
    pub memory: Var,
    pub alpha: Var,
}

/// The last cache layer.
pub fn build_memory_single(cache: &[Var]) -> Result<Var> {
    cache
        .last()
        .copied()
        .ok_or_else(|| Error::Input("empty memory cache".into()))
}

/// `m_f^t = Σ_l α_l^t m_l^t` with `α^t = softmax_l(g(m_l^t))`.
pub fn build_memory_gated(g: &mut Graph, cache: &[Var], gate: GateParams) -> Result<GatedMemory> {
    let Some(&first) = cache.first() else {
        return Err(Error::Input("empty memory slice".into()));
    };
    let (n, d) = g.dims(first);
    if let Some(bad) = cache.iter().find(|v| g.dims(**v) != (n, d)) {
        return Err(Error::shape(format!("cache layer {:?} vs {n}x{d}", g.dims(*bad))));
    }
    if g.dims(gate.weight).0 * g.dims(gate.weight).1 != d {
        return Err(Error::shape(format!(
            "gate weight {:?} for width {d}",
            g.dims(gate.weight)
        )));
    }
    let w = g.reshape(gate.weight, d, 1)?;
    let mut scores = Vec::with_capacity(cache.len());
    for &m in cache {
        let s = g.matmul(m, w)?;
        scores.push(g.add_row(s, gate.bias)?);
    }
    let scores = g.concat_cols(&scores)?;
    let alpha = g.softmax_rows(scores, None)?;
    let mut memory = None;
    for (l, &m) in cache.iter().enumerate() {
        let a = g.slice_cols(alpha, l, 1)?;
        let term = g.row_scale(m, a)?;
        memory = Some(match memory {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(GatedMemory {
        memory: memory.expect("non-empty cache"),
        alpha,
    })
}

/// Gated mixtures of `M¹…M^split` and `M^{split+1}…Mᴸ`.
pub fn build_memory_chunked(
    g: &mut Graph,
    cache: &[Var],
    split: usize,
    gate_low: GateParams,
    gate_high: GateParams,
) -> Result<(GatedMemory, GatedMemory)> {
    if split == 0 || split >= cache.len() {
        return Err(Error::config(format!(
            "split {split} outside 1..={}",
            cache.len().saturating_sub(1)
        )));
    }
    let low = build_memory_gated(g, &cache[..split], gate_low)?;
    let high = build_memory_gated(g, &cache[split..], gate_high)?;
    Ok((low, high))
}

/// Memory per hooked layer and α per gate slot.
#[derive(Clone, Debug, Default)]
pub struct BuiltMemory {
    pub by_layer: BTreeMap<usize, Var>,
    pub alphas: BTreeMap<GateSlot, Var>,
}

/// Evaluates a plan against a cache (`cache[0]` is M¹).
pub fn build_planned(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    plan: &BTreeMap<usize, MemorySource>,
    cache: &[Var],
) -> Result<BuiltMemory> {
    let mut built = BuiltMemory::default();
    for (&layer, source) in plan {
        let memory = match source {
            MemorySource::Layer(i) => *cache
                .get(i.wrapping_sub(1))
                .ok_or_else(|| Error::config(format!("cache has no layer {i}")))?,
            MemorySource::Gated { slot, layers } => {
                if *layers.start() == 0 || *layers.end() > cache.len() {
                    return Err(Error::config(format!("cache has no layers {layers:?}")));
                }
                let gate = GateParams::bind(g, store, &slot.base(prefix))?;
                let slice = &cache[layers.start() - 1..*layers.end()];
                let gm = build_memory_gated(g, slice, gate)?;
                built.alphas.insert(*slot, gm.alpha);
                gm.memory
            }
        };
        built.by_layer.insert(layer, memory);
    }
    Ok(built)
}

/// Attention output together with each head's probability matrix.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub output: Var,
    pub probs: Vec<Var>,
}

fn key_mask(n: usize, keys: &[bool]) -> Option<Vec<bool>> {
    if keys.iter().all(|&k| k) {
        return None;
    }
    let mut m = Vec::with_capacity(n * keys.len());
    for _ in 0..n {
        m.extend_from_slice(keys);
    }
    Some(m)
}

/// Per-head `softmax(QKᵀ/√d_k)·V`, heads concatenated (before `W^o`).
fn attend(g: &mut Graph, q: Var, k: Var, v: Var, keys: &[bool], heads: usize) -> Result<(Var, Vec<Var>)> {
    let (n, d) = g.dims(q);
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("width {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let mask = key_mask(n, keys);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for j in 0..heads {
        let qj = g.slice_cols(q, j * dk, dk)?;
        let kj = g.slice_cols(k, j * dk, dk)?;
        let vj = g.slice_cols(v, j * dk, dk)?;
        let s = g.matmul_bt(qj, kj)?;
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s, mask.as_deref())?;
        outs.push(g.matmul(a, vj)?);
        probs.push(a);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((cat, probs))
}

fn check_memory(g: &Graph, h: Var, memory: Var) -> Result<()> {
    let (n, d) = g.dims(h);
    let (mn, md) = g.dims(memory);
    if md != d || (mn != n && mn != 0) {
        return Err(Error::shape(format!("memory {mn}x{md} for hidden {n}x{d}")));
    }
    Ok(())
}

/// Memory-attention over `[K ‖ M_f·W^k]`, `[V ‖ M_f·W^v]`, followed by
/// `W^o`. `memory = None` (or a zero-row memory) is self-attention.
pub fn memory_attention(
    g: &mut Graph,
    h_prev: Var,
    memory: Option<Var>,
    w: &AttnWeights,
    pad_mask: &[bool],
    heads: usize,
) -> Result<Var> {
    Ok(memory_attention_traced(g, h_prev, memory, w, pad_mask, heads)?.output)
}

pub fn memory_attention_traced(
    g: &mut Graph,
    h_prev: Var,
    memory: Option<Var>,
    w: &AttnWeights,
    pad_mask: &[bool],
    heads: usize,
) -> Result<AttentionTrace> {
    let (n, _) = g.dims(h_prev);
    check_pad_mask(n, pad_mask)?;
    let q = g.matmul(h_prev, w.wq)?;
    let mut k = g.matmul(h_prev, w.wk)?;
    let mut v = g.matmul(h_prev, w.wv)?;
    let mut keys = pad_mask.to_vec();
    if let Some(m) = memory {
        check_memory(g, h_prev, m)?;
        if g.dims(m).0 > 0 {
            let mk = g.matmul(m, w.wk)?;
            let mv = g.matmul(m, w.wv)?;
            k = g.concat_rows(&[k, mk])?;
            v = g.concat_rows(&[v, mv])?;
            keys.extend_from_slice(pad_mask);
        }
    }
    let (cat, probs) = attend(g, q, k, v, &keys, heads)?;
    Ok(AttentionTrace {
        output: g.matmul(cat, w.wo)?,
        probs,
    })
}

/// Second attention pass with dedicated weights: queries from the
/// self-attention output, keys and values from `M_f`, residual-added.
pub fn cross_attention_fuse(
    g: &mut Graph,
    self_out: Var,
    memory: Var,
    xw: &AttnWeights,
    pad_mask: &[bool],
    heads: usize,
) -> Result<Var> {
    check_memory(g, self_out, memory)?;
    if g.dims(memory).0 == 0 {
        return Ok(self_out);
    }
    let q = g.matmul(self_out, xw.wq)?;
    let k = g.matmul(memory, xw.wk)?;
    let v = g.matmul(memory, xw.wv)?;
    let (cat, _) = attend(g, q, k, v, pad_mask, heads)?;
    let out = g.matmul(cat, xw.wo)?;
    g.add(self_out, out)
}

/// Per head `b⊙A_mem + (1−b)⊙A_loc` with `b = sigmoid(gate_j)`, then `W^o`.
/// `A_mem` attends only over memory keys projected with the layer's own
/// `W^k`, `W^v`.
pub fn gate_attention_fuse(
    g: &mut Graph,
    h_prev: Var,
    memory: Var,
    w: &AttnWeights,
    gate: Var,
    pad_mask: &[bool],
    heads: usize,
) -> Result<Var> {
    let (n, d) = g.dims(h_prev);
    check_pad_mask(n, pad_mask)?;
    check_memory(g, h_prev, memory)?;
    if g.dims(gate).0 * g.dims(gate).1 != heads {
        return Err(Error::shape(format!("gate {:?} for {heads} heads", g.dims(gate))));
    }
    let q = g.matmul(h_prev, w.wq)?;
    let k = g.matmul(h_prev, w.wk)?;
    let v = g.matmul(h_prev, w.wv)?;
    let (local, _) = attend(g, q, k, v, pad_mask, heads)?;
    if g.dims(memory).0 == 0 {
        return g.matmul(local, w.wo);
    }
    let mk = g.matmul(memory, w.wk)?;
    let mv = g.matmul(memory, w.wv)?;
    let (mem, _) = attend(g, q, mk, mv, pad_mask, heads)?;
    let gate = g.reshape(gate, 1, heads)?;
    let b = g.sigmoid(gate);
    let dk = d / heads;
    let mut mixed = Vec::with_capacity(heads);
    for j in 0..heads {
        let bj = g.slice_cols(b, j, 1)?;
        let keep = g.affine(bj, -1.0, 1.0);
        let a_mem = g.slice_cols(mem, j * dk, dk)?;
        let a_loc = g.slice_cols(local, j * dk, dk)?;
        let x = g.scale_by(a_mem, bj)?;
        let y = g.scale_by(a_loc, keep)?;
        mixed.push(g.add(x, y)?);
    }
    let cat = if heads == 1 { mixed[0] } else { g.concat_cols(&mixed)? };
    g.matmul(cat, w.wo)
}
