use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::loops::{finetune_classify, EncodedTask};
use super::metrics::mean_std;
use crate::encoder::HeadConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionSpec, Strategy, Variant};
use crate::model::{Composition, GmapModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepFamily {
    Single,
    Gated,
    Chunk,
}

/// Quarter points of the stack: `{3, 6, 9, 12}` for twelve layers.
pub fn quarter_layers(l: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (1..=4).map(|i| (i * l / 4).max(1)).collect();
    v.dedup();
    v
}

/// Pairs with the same interval `l/2` between them:
/// `(1, 7) … (6, 12)` for twelve layers.
pub fn chunk_pairs(l: usize) -> Vec<(usize, usize)> {
    let half = l / 2;
    (1..=half).map(|i| (i, i + half)).collect()
}

/// The candidate assignments of one family.
pub fn sweep_candidates(family: SweepFamily, l_general: usize, l_domain: usize) -> Result<Vec<FusionSpec>> {
    let specs: Vec<FusionSpec> = match family {
        SweepFamily::Single => quarter_layers(l_domain)
            .into_iter()
            .map(|dst| FusionSpec::new(Strategy::SingleLayer { dst }))
            .collect(),
        SweepFamily::Gated => quarter_layers(l_domain)
            .into_iter()
            .map(|dst| FusionSpec::new(Strategy::Gated { dst }))
            .collect(),
        SweepFamily::Chunk => chunk_pairs(l_domain)
            .into_iter()
            .map(|(dst_low, dst_high)| {
                FusionSpec::new(Strategy::ChunkGated {
                    split: l_general / 2,
                    dst_low,
                    dst_high,
                })
            })
            .collect(),
    };
    if specs.is_empty() {
        return Err(Error::config("no sweep candidates for this depth"));
    }
    for s in &specs {
        s.validate(l_general, l_domain)?;
    }
    Ok(specs)
}

pub fn hooked_layers(spec: &FusionSpec, l_domain: usize) -> Vec<usize> {
    match spec.strategy {
        Strategy::SingleLayer { dst } | Strategy::Gated { dst } => vec![dst],
        Strategy::MultiLayer => (1..=l_domain).collect(),
        Strategy::ChunkGated { dst_low, dst_high, .. } => vec![dst_low, dst_high],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub assignment: String,
    pub layers: Vec<usize>,
    pub seeds: Vec<u64>,
    pub macro_f1: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("assignment,layers,seeds,mean_macro_f1,std_macro_f1\n");
        for r in &self.rows {
            let layers: Vec<String> = r.layers.iter().map(ToString::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                r.assignment,
                layers.join("+"),
                r.seeds.len(),
                r.mean,
                r.std
            ));
        }
        out
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let layers: Vec<String> = r.layers.iter().map(ToString::to_string).collect();
            out.push_str(&format!(
                "assignment={} layers={} mean_macro_f1={:.6} std_macro_f1={:.6}\n",
                r.assignment,
                layers.join("+"),
                r.mean,
                r.std
            ));
        }
        out
    }
}

/// Fine-tunes one G-MAP model per (assignment, seed) and tabulates test
/// macro-F1. Each cell composes a private model from `general` and
/// `backbone`.
#[allow(clippy::too_many_arguments)]
pub fn layer_sweep(
    general: &GmapModel,
    backbone: &GmapModel,
    specs: &[FusionSpec],
    variant: Variant,
    head: &HeadConfig,
    task: &EncodedTask,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<SweepTable> {
    let mut table = SweepTable::default();
    let l_domain = backbone.config.domain.num_layers;
    for spec in specs {
        let spec = spec.with_variant(variant);
        let mut scores = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut model = GmapModel::compose(general, backbone, Composition::Gmap { fusion: spec }, seed)?
                .with_head(head.clone(), seed)?;
            let run = TrainConfig { seed, ..cfg.clone() };
            let report = finetune_classify(&mut model, task, &run)?;
            scores.push(report.macro_f1.unwrap_or(f64::NAN));
        }
        let (mean, std) = mean_std(&scores);
        table.rows.push(SweepRow {
            assignment: spec.to_string(),
            layers: hooked_layers(&spec, l_domain),
            seeds: seeds.to_vec(),
            macro_f1: scores,
            mean,
            std,
        });
    }
    Ok(table)
}
