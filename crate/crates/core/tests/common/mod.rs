//! Loop-based reference implementations shared by the integration tests.
//! Everything here works on plain nested vectors and never touches the graph.

#![allow(dead_code)]

use std::collections::BTreeMap;

use gmap::fusion::{MemorySource, Variant};
use gmap::{EncoderConfig, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type M = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_m(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> M {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_tensor(m: &M) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

/// Rows of a rank-2 tensor, or a rank-1 tensor as one row.
pub fn rows_of(t: &Tensor) -> M {
    let (r, c) = match t.shape() {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        s => panic!("rank {} tensor", s.len()),
    };
    (0..r).map(|i| t.values()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn vec_of(t: &Tensor) -> Vec<f64> {
    t.values().to_vec()
}

pub fn max_abs(a: &M, b: &M) -> f64 {
    assert_eq!(a.len(), b.len(), "row counts");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column counts");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &M, b: &M) -> M {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols).map(|j| (0..inner).map(|p| row[p] * b[p][j]).sum()).collect()
        })
        .collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn add_row(a: &M, bias: &[f64]) -> M {
    a.iter()
        .map(|x| x.iter().zip(bias).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn softmax(x: &[f64], keep: &[bool]) -> Vec<f64> {
    let max = x
        .iter()
        .zip(keep)
        .filter(|(_, k)| **k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x
        .iter()
        .zip(keep)
        .map(|(v, k)| if *k { (v - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

pub fn layer_norm(x: &M, gamma: &[f64], beta: &[f64]) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / s * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

/// Per-head scaled dot-product attention of `q` over `k`/`v`, heads
/// concatenated. `keys[j]` says whether key row `j` may be attended.
pub fn attend(q: &M, k: &M, v: &M, keys: &[bool], heads: usize) -> M {
    let d = q[0].len();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![vec![0.0; d]; q.len()];
    for j in 0..heads {
        let cols = j * dk..(j + 1) * dk;
        for (t, qt) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kr| cols.clone().map(|c| qt[c] * kr[c]).sum::<f64>() * scale)
                .collect();
            let a = softmax(&scores, keys);
            for c in cols.clone() {
                out[t][c] = a.iter().zip(v).map(|(w, vr)| w * vr[c]).sum();
            }
        }
    }
    out
}

pub struct Attn {
    pub wq: M,
    pub wk: M,
    pub wv: M,
    pub wo: M,
}

impl Attn {
    pub fn random(rng: &mut ChaCha8Rng, d: usize) -> Self {
        Attn {
            wq: random_m(rng, d, d),
            wk: random_m(rng, d, d),
            wv: random_m(rng, d, d),
            wo: random_m(rng, d, d),
        }
    }

    pub fn load(store: &ParamStore, base: &str) -> Self {
        let get = |w: &str| rows_of(store.get(&format!("{base}.{w}")).unwrap());
        Attn {
            wq: get("wq"),
            wk: get("wk"),
            wv: get("wv"),
            wo: get("wo"),
        }
    }
}

/// Memory-attention: keys and values of `memory` appended behind the token's
/// own, all projected with the same weights, memory rows masked like tokens.
pub fn memory_attention(h: &M, memory: Option<&M>, w: &Attn, pad: &[bool], heads: usize) -> M {
    let q = matmul(h, &w.wq);
    let mut k = matmul(h, &w.wk);
    let mut v = matmul(h, &w.wv);
    let mut keys = pad.to_vec();
    if let Some(m) = memory.filter(|m| !m.is_empty()) {
        k.extend(matmul(m, &w.wk));
        v.extend(matmul(m, &w.wv));
        keys.extend_from_slice(pad);
    }
    matmul(&attend(&q, &k, &v, &keys, heads), &w.wo)
}

pub fn cross_attention(self_out: &M, memory: &M, xw: &Attn, pad: &[bool], heads: usize) -> M {
    let q = matmul(self_out, &xw.wq);
    let k = matmul(memory, &xw.wk);
    let v = matmul(memory, &xw.wv);
    add(self_out, &matmul(&attend(&q, &k, &v, pad, heads), &xw.wo))
}

pub fn gate_attention(h: &M, memory: &M, w: &Attn, gate: &[f64], pad: &[bool], heads: usize) -> M {
    let q = matmul(h, &w.wq);
    let local = attend(&q, &matmul(h, &w.wk), &matmul(h, &w.wv), pad, heads);
    let mem = attend(&q, &matmul(memory, &w.wk), &matmul(memory, &w.wv), pad, heads);
    let dk = h[0].len() / heads;
    let mixed: M = local
        .iter()
        .zip(&mem)
        .map(|(l, m)| {
            (0..l.len())
                .map(|c| {
                    let b = 1.0 / (1.0 + (-gate[c / dk]).exp());
                    b * m[c] + (1.0 - b) * l[c]
                })
                .collect()
        })
        .collect();
    matmul(&mixed, &w.wo)
}

/// Per-token softmax over layers of `⟨weight, m⟩ + bias`; returns the mixed
/// memory and α (tokens × layers).
pub fn gated_memory(cache: &[M], weight: &[f64], bias: f64) -> (M, M) {
    let n = cache[0].len();
    let d = cache[0][0].len();
    let mut memory = vec![vec![0.0; d]; n];
    let mut alpha = Vec::with_capacity(n);
    for t in 0..n {
        let scores: Vec<f64> = cache
            .iter()
            .map(|m| m[t].iter().zip(weight).map(|(a, b)| a * b).sum::<f64>() + bias)
            .collect();
        let a = softmax(&scores, &vec![true; scores.len()]);
        for (l, m) in cache.iter().enumerate() {
            for c in 0..d {
                memory[t][c] += a[l] * m[t][c];
            }
        }
        alpha.push(a);
    }
    (memory, alpha)
}

pub enum Hook {
    Memory(M, Variant),
}

/// Full encoder stack under `prefix`, returning every layer output.
pub fn encoder(
    store: &ParamStore,
    cfg: &EncoderConfig,
    prefix: &str,
    ids: &[usize],
    pad: &[bool],
    hooks: &BTreeMap<usize, Hook>,
) -> Vec<M> {
    let p = |leaf: &str| store.get(&format!("{prefix}.{leaf}")).unwrap();
    let tokens = rows_of(p("embed.tokens"));
    let positions = rows_of(p("embed.positions"));
    let mut x: M = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| tokens[id].iter().zip(&positions[i]).map(|(a, b)| a + b).collect())
        .collect();
    let mut out = Vec::new();
    for l in 1..=cfg.num_layers {
        let lp = |leaf: &str| vec_of(p(&format!("layer{l}.{leaf}")));
        let w = Attn::load(store, &format!("{prefix}.layer{l}.attn"));
        let heads = cfg.num_heads;
        let attn = match hooks.get(&l) {
            None => memory_attention(&x, None, &w, pad, heads),
            Some(Hook::Memory(m, Variant::MemoryAttention)) => memory_attention(&x, Some(m), &w, pad, heads),
            Some(Hook::Memory(m, Variant::CrossAttention)) => {
                let xw = Attn::load(store, &format!("{prefix}.layer{l}.xattn"));
                cross_attention(&memory_attention(&x, None, &w, pad, heads), m, &xw, pad, heads)
            }
            Some(Hook::Memory(m, Variant::GateAttention)) => gate_attention(&x, m, &w, &lp("gattn.gate"), pad, heads),
        };
        let h1 = layer_norm(&add(&x, &attn), &lp("ln1.gamma"), &lp("ln1.beta"));
        let w1 = rows_of(p(&format!("layer{l}.ffn.w1")));
        let w2 = rows_of(p(&format!("layer{l}.ffn.w2")));
        let f = add_row(&matmul(&h1, &w1), &lp("ffn.b1"));
        let f: M = f.iter().map(|r| r.iter().map(|v| gelu(*v)).collect()).collect();
        let f = add_row(&matmul(&f, &w2), &lp("ffn.b2"));
        x = layer_norm(&add(&h1, &f), &lp("ln2.gamma"), &lp("ln2.beta"));
        out.push(x.clone());
    }
    out
}

/// Memory for each hooked layer of a plan, built from a general cache, plus
/// α per gated source keyed by the gate's parameter base name.
pub fn planned_memory(
    store: &ParamStore,
    plan: &BTreeMap<usize, MemorySource>,
    cache: &[M],
) -> (BTreeMap<usize, M>, BTreeMap<String, M>) {
    let mut memory = BTreeMap::new();
    let mut alphas = BTreeMap::new();
    for (&layer, source) in plan {
        let m = match source {
            MemorySource::Layer(i) => cache[i - 1].clone(),
            MemorySource::Gated { slot, layers } => {
                let base = slot.base("domain");
                let w = vec_of(store.get(&format!("{base}.weight")).unwrap());
                let b = store.get(&format!("{base}.bias")).unwrap().values()[0];
                let (m, a) = gated_memory(&cache[layers.start() - 1..*layers.end()], &w, b);
                alphas.insert(base, a);
                m
            }
        };
        memory.insert(layer, m);
    }
    (memory, alphas)
}

/// `[CLS]` vector through the head's affine layers with tanh between them.
pub fn class_head(store: &ParamStore, prefix: &str, hidden: &M, layers: usize) -> Vec<f64> {
    let mut x = vec![hidden[0].clone()];
    for l in 1..=layers {
        let w = rows_of(store.get(&format!("{prefix}.cls.l{l}.weight")).unwrap());
        let b = vec_of(store.get(&format!("{prefix}.cls.l{l}.bias")).unwrap());
        x = add_row(&matmul(&x, &w), &b);
        if l < layers {
            x[0].iter_mut().for_each(|v| *v = v.tanh());
        }
    }
    x.remove(0)
}

/// Tied MLM logits `h·Eᵀ + bias` for every row.
pub fn mlm_logits(store: &ParamStore, prefix: &str, hidden: &M) -> M {
    let e = rows_of(store.get(&format!("{prefix}.embed.tokens")).unwrap());
    let bias = vec_of(store.get(&format!("{prefix}.mlm.bias")).unwrap());
    hidden
        .iter()
        .map(|h| {
            e.iter()
                .zip(&bias)
                .map(|(row, b)| row.iter().zip(h).map(|(x, y)| x * y).sum::<f64>() + b)
                .collect()
        })
        .collect()
}

pub fn tiny_config(layers: usize, d: usize, heads: usize, vocab: usize, max_len: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        d_model: d,
        num_heads: heads,
        d_ff: 2 * d,
        vocab_size: vocab,
        max_seq_len: max_len,
        dropout: 0.0,
    }
}

/// Overwrites every tensor in the store with uniform values in ±`scale` so
/// that zero-initialized gates and biases take part in the comparison.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (_, p) in store.iter_mut() {
        for v in p.tensor.values_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}

/// A random `[CLS] … [SEP]` sequence over content ids.
pub fn random_ids(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    let mut ids = vec![2];
    ids.extend((0..len - 2).map(|_| rng.gen_range(5..vocab)));
    ids.push(3);
    ids
}
