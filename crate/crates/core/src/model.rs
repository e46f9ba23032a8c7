//! The assembled model: a frozen general encoder, a trainable domain encoder
//! and the way they are combined.
//!
//! Parameter prefixes are fixed: `general.*` for the general encoder (and
//! its classification head under logits fusion), `domain.*` for everything
//! trained on the domain side, including `domain.fusion.*` gate scorers.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MaskedBatch, Vocab};
use crate::encoder::{
    self, classify_logits, encoder_forward, init_class_head, init_encoder, mlm_logits, Dropout, EncoderConfig,
    HeadConfig, LayerHook, MemoryCache, DEFAULT_INIT_STD,
};
use crate::error::{Error, Result};
use crate::fusion::{self, init_fusion_params, plan_fusion, FusionSpec, GateSlot};
use crate::graph::{Graph, Target, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const GENERAL: &str = "general";
pub const DOMAIN: &str = "domain";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Composition {
    /// Domain encoder alone (fine-tuning, DAPT, TAPT backbones).
    Bare,
    /// Memory from the general encoder fused into the domain encoder.
    Gmap { fusion: FusionSpec },
    /// General and domain class logits added.
    LogitsFusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub domain: EncoderConfig,
    pub general: Option<EncoderConfig>,
    pub composition: Composition,
    pub head: Option<HeadConfig>,
    pub general_frozen: bool,
}

#[derive(Clone, Debug)]
pub struct GmapModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vocab: Option<Vocab>,
    /// One entry per stage that produced these weights.
    pub lineage: Vec<String>,
}

/// How memory reaches the hooked layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MemoryMode {
    #[default]
    Live,
    /// Every hooked layer receives a zero-row memory.
    Empty,
}

/// Graph handles from one forward pass.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub hidden: Var,
    pub general_hidden: Option<Var>,
    pub alphas: BTreeMap<GateSlot, Var>,
}

/// Gate weights α (tokens × layers) per gate slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub alphas: BTreeMap<GateSlot, Tensor>,
}

/// One sequence prepared for the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub ids: Vec<usize>,
    pub pad: Vec<bool>,
}

impl Sequence {
    pub fn new(ids: Vec<usize>) -> Self {
        let pad = vec![true; ids.len()];
        Sequence { ids, pad }
    }
}

fn strip_heads(store: &mut ParamStore, prefix: &str) {
    let heads: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(&format!("{prefix}.cls.")))
        .cloned()
        .collect();
    for n in heads {
        store.remove(&n);
    }
}

impl GmapModel {
    /// A randomly initialized domain encoder with no head.
    pub fn bare(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_encoder(&mut store, &cfg, DOMAIN, &mut rng, DEFAULT_INIT_STD, false)?;
        Ok(GmapModel {
            config: ModelConfig {
                domain: cfg,
                general: None,
                composition: Composition::Bare,
                head: None,
                general_frozen: true,
            },
            store,
            vocab: None,
            lineage: vec![format!("init:seed={seed}")],
        })
    }

    pub fn with_vocab(mut self, vocab: Vocab) -> Result<Self> {
        if vocab.len() != self.config.domain.vocab_size {
            return Err(Error::config(format!(
                "vocabulary of {} for vocab_size {}",
                vocab.len(),
                self.config.domain.vocab_size
            )));
        }
        self.vocab = Some(vocab);
        Ok(self)
    }

    /// Combines the encoder of `general` (frozen) with the encoder of
    /// `backbone`. Classification heads of the sources are dropped.
    pub fn compose(general: &GmapModel, backbone: &GmapModel, composition: Composition, seed: u64) -> Result<Self> {
        let g_cfg = general.config.domain.clone();
        let d_cfg = backbone.config.domain.clone();
        if g_cfg.vocab_size != d_cfg.vocab_size {
            return Err(Error::config(format!(
                "vocab mismatch: general {} vs domain {}",
                g_cfg.vocab_size, d_cfg.vocab_size
            )));
        }
        if g_cfg.max_seq_len != d_cfg.max_seq_len {
            return Err(Error::config(format!(
                "max_seq_len mismatch: general {} vs domain {}",
                g_cfg.max_seq_len, d_cfg.max_seq_len
            )));
        }
        if let (Some(a), Some(b)) = (&general.vocab, &backbone.vocab) {
            if a != b {
                return Err(Error::config("general and domain vocabularies differ"));
            }
        }
        let mut store = ParamStore::new();
        store.copy_prefix(&general.store, &format!("{DOMAIN}."), &format!("{GENERAL}."), true);
        store.copy_prefix(&backbone.store, &format!("{DOMAIN}."), &format!("{DOMAIN}."), false);
        strip_heads(&mut store, GENERAL);
        strip_heads(&mut store, DOMAIN);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match &composition {
            Composition::Gmap { fusion } => init_fusion_params(
                &mut store,
                fusion,
                &d_cfg,
                g_cfg.num_layers,
                DOMAIN,
                &mut rng,
                DEFAULT_INIT_STD,
            )?,
            Composition::LogitsFusion => {}
            Composition::Bare => return Err(Error::config("compose needs a G-MAP or logits-fusion composition")),
        }
        let mut lineage = backbone.lineage.clone();
        lineage.push(format!("compose:{}:seed={seed}", composition_label(&composition)));
        Ok(GmapModel {
            config: ModelConfig {
                domain: d_cfg,
                general: Some(g_cfg),
                composition,
                head: None,
                general_frozen: true,
            },
            store,
            vocab: backbone.vocab.clone().or_else(|| general.vocab.clone()),
            lineage,
        })
    }

    /// Adds a fresh classification head (two under logits fusion). Any
    /// existing head is replaced.
    pub fn with_head(mut self, head: HeadConfig, seed: u64) -> Result<Self> {
        head.validate()?;
        strip_heads(&mut self.store, DOMAIN);
        strip_heads(&mut self.store, GENERAL);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_class_head(
            &mut self.store,
            DOMAIN,
            self.config.domain.d_model,
            &head,
            &mut rng,
            DEFAULT_INIT_STD,
        )?;
        if self.config.composition == Composition::LogitsFusion {
            let d = self.general_config()?.d_model;
            init_class_head(&mut self.store, GENERAL, d, &head, &mut rng, DEFAULT_INIT_STD)?;
        }
        self.config.head = Some(head);
        self.lineage.push(format!("head:seed={seed}"));
        Ok(self)
    }

    /// Freezes (`true`) or unfreezes the general encoder body.
    pub fn set_general_frozen(&mut self, frozen: bool) {
        let general_heads: Vec<String> = self
            .store
            .names()
            .filter(|n| n.starts_with(&format!("{GENERAL}.cls.")))
            .cloned()
            .collect();
        self.store.set_frozen_prefix(&format!("{GENERAL}."), frozen);
        for n in general_heads {
            self.store.set_frozen(&n, false).expect("name from store");
        }
        self.config.general_frozen = frozen;
    }

    pub fn general_config(&self) -> Result<&EncoderConfig> {
        self.config
            .general
            .as_ref()
            .ok_or_else(|| Error::config("model has no general encoder"))
    }

    pub fn head(&self) -> Result<&HeadConfig> {
        self.config
            .head
            .as_ref()
            .ok_or_else(|| Error::config("model has no classification head"))
    }

    pub fn fusion(&self) -> Option<&FusionSpec> {
        match &self.config.composition {
            Composition::Gmap { fusion } => Some(fusion),
            _ => None,
        }
    }

    pub fn max_seq_len(&self) -> usize {
        self.config.domain.max_seq_len
    }

    /// Fingerprint over the configuration and every parameter.
    pub fn fingerprint(&self) -> u64 {
        let text = serde_json::to_string(&self.config).expect("config serializes");
        let mut h = self.store.checksum("");
        for b in text.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    /// Runs the encoders for one sequence. The general encoder always runs
    /// without dropout; its parameters enter the graph as constants while
    /// frozen.
    pub fn encode(&self, g: &mut Graph, seq: &Sequence, dropout: &mut Dropout, memory: MemoryMode) -> Result<Encoded> {
        let d_cfg = &self.config.domain;
        match &self.config.composition {
            Composition::Bare => {
                let acts = encoder_forward(g, &self.store, d_cfg, DOMAIN, &seq.ids, &seq.pad, None, dropout)?;
                Ok(Encoded {
                    hidden: acts.last(),
                    general_hidden: None,
                    alphas: BTreeMap::new(),
                })
            }
            Composition::LogitsFusion => {
                let g_cfg = self.general_config()?;
                let general = encoder_forward(
                    g,
                    &self.store,
                    g_cfg,
                    GENERAL,
                    &seq.ids,
                    &seq.pad,
                    None,
                    &mut Dropout::off(),
                )?;
                let acts = encoder_forward(g, &self.store, d_cfg, DOMAIN, &seq.ids, &seq.pad, None, dropout)?;
                Ok(Encoded {
                    hidden: acts.last(),
                    general_hidden: Some(general.last()),
                    alphas: BTreeMap::new(),
                })
            }
            Composition::Gmap { fusion } => {
                let g_cfg = self.general_config()?;
                let plan = plan_fusion(fusion, g_cfg.num_layers, d_cfg.num_layers)?;
                let (by_layer, alphas, general_hidden) = match memory {
                    MemoryMode::Empty => {
                        let empty = g.constant(&Tensor::zeros(vec![0, d_cfg.d_model]));
                        (plan.keys().map(|&l| (l, empty)).collect(), BTreeMap::new(), None)
                    }
                    MemoryMode::Live => {
                        let general = encoder_forward(
                            g,
                            &self.store,
                            g_cfg,
                            GENERAL,
                            &seq.ids,
                            &seq.pad,
                            None,
                            &mut Dropout::off(),
                        )?;
                        let built = fusion::build_planned(g, &self.store, DOMAIN, &plan, &general.layers)?;
                        (built.by_layer, built.alphas, Some(general.last()))
                    }
                };
                let hooks: BTreeMap<usize, LayerHook> = by_layer
                    .into_iter()
                    .map(|(l, memory)| {
                        (
                            l,
                            LayerHook {
                                memory,
                                variant: fusion.variant,
                            },
                        )
                    })
                    .collect();
                let acts = encoder_forward(g, &self.store, d_cfg, DOMAIN, &seq.ids, &seq.pad, Some(&hooks), dropout)?;
                Ok(Encoded {
                    hidden: acts.last(),
                    general_hidden,
                    alphas,
                })
            }
        }
    }

    /// Class logits (1 × C); under logits fusion the general head's logits
    /// are added.
    pub fn class_logits(
        &self,
        g: &mut Graph,
        seq: &Sequence,
        dropout: &mut Dropout,
        memory: MemoryMode,
    ) -> Result<(Var, Encoded)> {
        let head = self.head()?.clone();
        let enc = self.encode(g, seq, dropout, memory)?;
        let domain = classify_logits(g, &self.store, DOMAIN, enc.hidden, &seq.ids, &head, dropout)?;
        let logits = match (&self.config.composition, enc.general_hidden) {
            (Composition::LogitsFusion, Some(gh)) => {
                let general = classify_logits(g, &self.store, GENERAL, gh, &seq.ids, &head, dropout)?;
                g.add(general, domain)?
            }
            _ => domain,
        };
        Ok((logits, enc))
    }

    /// Mean cross-entropy over a labelled batch.
    pub fn classify_loss(&self, g: &mut Graph, batch: &[(Sequence, usize)], dropout: &mut Dropout) -> Result<Var> {
        let classes = self.head()?.num_classes;
        let mut rows = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for (seq, label) in batch {
            if *label >= classes {
                return Err(Error::Input(format!("label {label} >= {classes} classes")));
            }
            rows.push(self.class_logits(g, seq, dropout, MemoryMode::Live)?.0);
            targets.push(Target::Class(*label));
        }
        if rows.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let logits = g.concat_rows(&rows)?;
        g.cross_entropy(logits, &targets)
    }

    /// Mean MLM cross-entropy over the masked positions of a batch, through
    /// the full composition.
    pub fn mlm_loss(&self, g: &mut Graph, batch: &MaskedBatch, dropout: &mut Dropout) -> Result<Var> {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for i in 0..batch.len() {
            let picked: Vec<usize> = batch.labels[i]
                .iter()
                .enumerate()
                .filter(|(_, t)| matches!(t, Target::Class(_)))
                .map(|(p, _)| p)
                .collect();
            if picked.is_empty() {
                continue;
            }
            let seq = Sequence {
                ids: batch.inputs[i].clone(),
                pad: batch.pad[i].clone(),
            };
            let enc = self.encode(g, &seq, dropout, MemoryMode::Live)?;
            let h = g.select_rows(enc.hidden, &picked)?;
            rows.push(mlm_logits(g, &self.store, DOMAIN, h)?);
            targets.extend(picked.iter().map(|&p| batch.labels[i][p]));
        }
        if rows.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let logits = g.concat_rows(&rows)?;
        g.cross_entropy(logits, &targets)
    }

    /// Mean MLM cross-entropy through the general encoder alone.
    pub fn general_mlm_loss(&self, g: &mut Graph, batch: &MaskedBatch) -> Result<Var> {
        let cfg = self.general_config()?;
        encoder_mlm_loss(g, &self.store, cfg, GENERAL, batch)
    }

    /// Inference-only class logits with gate diagnostics.
    pub fn forward_classify(&self, seq: &Sequence) -> Result<(Tensor, Diagnostics)> {
        self.forward_classify_with(seq, MemoryMode::Live)
    }

    pub fn forward_classify_with(&self, seq: &Sequence, memory: MemoryMode) -> Result<(Tensor, Diagnostics)> {
        let mut g = Graph::inference();
        let (logits, enc) = self.class_logits(&mut g, seq, &mut Dropout::off(), memory)?;
        Ok((g.tensor(logits), diagnostics(&g, &enc)))
    }

    /// Inference-only final hidden states with gate diagnostics.
    pub fn forward_hidden(&self, seq: &Sequence, memory: MemoryMode) -> Result<(Tensor, Diagnostics)> {
        let mut g = Graph::inference();
        let enc = self.encode(&mut g, seq, &mut Dropout::off(), memory)?;
        Ok((g.tensor(enc.hidden), diagnostics(&g, &enc)))
    }

    pub fn predict_proba(&self, seq: &Sequence) -> Result<Vec<f64>> {
        let (logits, _) = self.forward_classify(seq)?;
        Ok(softmax(logits.values()))
    }

    pub fn predict(&self, seq: &Sequence) -> Result<usize> {
        Ok(argmax(&self.forward_classify(seq)?.0.into_values()))
    }

    /// Per-layer outputs of the general encoder for one input.
    pub fn memory_cache(&self, seq: &Sequence) -> Result<MemoryCache> {
        let cfg = self.general_config()?;
        encoder::memory_cache(&self.store, cfg, GENERAL, &seq.ids, &seq.pad)
    }
}

fn diagnostics(g: &Graph, enc: &Encoded) -> Diagnostics {
    Diagnostics {
        alphas: enc.alphas.iter().map(|(k, v)| (*k, g.tensor(*v))).collect(),
    }
}

fn composition_label(c: &Composition) -> String {
    match c {
        Composition::Bare => "bare".into(),
        Composition::Gmap { fusion } => format!("gmap:{fusion}"),
        Composition::LogitsFusion => "logits-fusion".into(),
    }
}

/// MLM loss of the plain encoder under `prefix`, logits computed only at
/// masked rows.
pub fn encoder_mlm_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    prefix: &str,
    batch: &MaskedBatch,
) -> Result<Var> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for i in 0..batch.len() {
        let picked: Vec<usize> = batch.labels[i]
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t, Target::Class(_)))
            .map(|(p, _)| p)
            .collect();
        if picked.is_empty() {
            continue;
        }
        let acts = encoder_forward(
            g,
            store,
            cfg,
            prefix,
            &batch.inputs[i],
            &batch.pad[i],
            None,
            &mut Dropout::off(),
        )?;
        let h = g.select_rows(acts.last(), &picked)?;
        rows.push(mlm_logits(g, store, prefix, h)?);
        targets.extend(picked.iter().map(|&p| batch.labels[i][p]));
    }
    if rows.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let logits = g.concat_rows(&rows)?;
    g.cross_entropy(logits, &targets)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    crate::graph::softmax_row(logits, &mut out, |_| true);
    out
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            },
        )
        .0
}

/// Averaged class probabilities of two independently fine-tuned models.
pub fn ensemble_predict(a: &GmapModel, b: &GmapModel, seq: &Sequence) -> Result<Vec<f64>> {
    let (ca, cb) = (a.head()?.num_classes, b.head()?.num_classes);
    if ca != cb {
        return Err(Error::config(format!("ensemble of {ca}-class and {cb}-class models")));
    }
    let pa = a.predict_proba(seq)?;
    let pb = b.predict_proba(seq)?;
    Ok(pa.iter().zip(&pb).map(|(x, y)| 0.5 * (x + y)).collect())
}

/// Trainable and frozen parameter counts of one component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CensusRow {
    pub component: String,
    pub trainable: usize,
    pub frozen: usize,
}

fn component_of(name: &str) -> &'static str {
    if name.starts_with("general.") {
        if name.starts_with("general.cls.") {
            "general.head"
        } else {
            "general.encoder"
        }
    } else if name.starts_with("domain.fusion.") {
        "fusion.gates"
    } else if name.contains(".xattn.") || name.contains(".gattn.") {
        "fusion.variant"
    } else if name.starts_with("domain.cls.") {
        "domain.head"
    } else {
        "domain.encoder"
    }
}

/// Per-component counts followed by a `total` row.
pub fn param_census(model: &GmapModel) -> Vec<CensusRow> {
    let mut rows: BTreeMap<&'static str, (usize, usize)> = BTreeMap::new();
    for (name, p) in model.store.iter() {
        let e = rows.entry(component_of(name)).or_default();
        if p.frozen {
            e.1 += p.tensor.numel();
        } else {
            e.0 += p.tensor.numel();
        }
    }
    let mut out: Vec<CensusRow> = rows
        .into_iter()
        .map(|(c, (t, f))| CensusRow {
            component: c.to_string(),
            trainable: t,
            frozen: f,
        })
        .collect();
    out.push(CensusRow {
        component: "total".into(),
        trainable: model.store.trainable_count(),
        frozen: model.store.frozen_count(),
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::special;
    use crate::fusion::Strategy;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 8,
            dropout: 0.0,
        }
    }

    #[test]
    fn compose_rejects_vocab_mismatch() {
        let a = GmapModel::bare(cfg(), 1).unwrap();
        let mut c = cfg();
        c.vocab_size = 13;
        let b = GmapModel::bare(c, 2).unwrap();
        let spec = FusionSpec::new(Strategy::SingleLayer { dst: 2 });
        assert!(matches!(
            GmapModel::compose(&a, &b, Composition::Gmap { fusion: spec }, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn compose_freezes_general_side() {
        let a = GmapModel::bare(cfg(), 1).unwrap();
        let spec = FusionSpec::new(Strategy::Gated { dst: 2 });
        let m = GmapModel::compose(&a, &a, Composition::Gmap { fusion: spec }, 0).unwrap();
        assert!(m.store.iter().all(|(n, p)| p.frozen == n.starts_with("general.")));
        assert_eq!(m.store.checksum("general."), {
            let mut s = ParamStore::new();
            s.copy_prefix(&a.store, "domain.", "general.", true);
            s.checksum("general.")
        });
    }

    #[test]
    fn census_rows_sum_to_total() {
        let a = GmapModel::bare(cfg(), 1).unwrap();
        let m = GmapModel::compose(&a, &a, Composition::LogitsFusion, 0)
            .unwrap()
            .with_head(HeadConfig::new(3, 2), 4)
            .unwrap();
        let rows = param_census(&m);
        let total = rows.last().unwrap();
        let t: usize = rows[..rows.len() - 1].iter().map(|r| r.trainable).sum();
        let f: usize = rows[..rows.len() - 1].iter().map(|r| r.frozen).sum();
        assert_eq!((t, f), (total.trainable, total.frozen));
        assert!(rows.iter().any(|r| r.component == "general.head" && r.trainable > 0));
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
        let p = softmax(&[0.0, 0.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn missing_head_is_a_config_error() {
        let m = GmapModel::bare(cfg(), 1).unwrap();
        let seq = Sequence::new(vec![special::CLS, 6, 7]);
        assert!(matches!(m.forward_classify(&seq), Err(Error::Config(_))));
    }
}
