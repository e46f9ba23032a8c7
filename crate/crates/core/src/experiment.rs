//! End-to-end recipes on the synthetic world: forgetting under DAPT, G-MAP
//! in the pretraining stage and the downstream task comparison.

use serde::{Deserialize, Serialize};

use crate::data::{gen_classification_task, gen_domain_corpus, split_70_30, SyntheticWorld, TaskSpec, WorldConfig};
use crate::encoder::{EncoderConfig, HeadConfig};
use crate::error::Result;
use crate::fusion::{FusionSpec, Strategy};
use crate::model::{Composition, GmapModel};
use crate::train::{
    adapt, encode_corpus, eval_mlm_loss, finetune_classify, pretrain_mlm, AdaptMode, EncodedTask, MlmPath, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub encoder: EncoderConfig,
    /// General-corpus documents generated before the 70/30 split.
    pub docs_per_domain: usize,
    /// Domain-corpus documents generated before the 70/30 split.
    pub domain_docs: usize,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub finetune: TrainConfig,
    pub task: TaskSpec,
    pub head: HeadConfig,
    pub chunk: FusionSpec,
    pub mask_prob: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut encoder = EncoderConfig::desk(200);
        encoder.max_seq_len = 16;
        ExperimentConfig {
            world: WorldConfig::default(),
            encoder,
            docs_per_domain: 2000,
            domain_docs: 300,
            pretrain: TrainConfig {
                epochs: 100,
                lr: 3e-3,
                max_steps: Some(2500),
                ..TrainConfig::default()
            },
            adapt: TrainConfig {
                epochs: 100,
                max_steps: Some(1200),
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                epochs: 4,
                ..TrainConfig::default()
            },
            task: TaskSpec::default(),
            head: HeadConfig::new(4, 1),
            chunk: FusionSpec::new(Strategy::ChunkGated {
                split: 3,
                dst_low: 3,
                dst_high: 6,
            }),
            mask_prob: 0.15,
        }
    }
}

/// Encoded 70/30 splits of the general corpus and one domain corpus, plus
/// the planted task on that domain.
#[derive(Clone, Debug)]
pub struct Corpora {
    pub world: SyntheticWorld,
    pub general_train: Vec<Vec<usize>>,
    pub general_test: Vec<Vec<usize>>,
    pub domain_train: Vec<Vec<usize>>,
    pub domain_test: Vec<Vec<usize>>,
    pub task: EncodedTask,
}

impl Corpora {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let world = SyntheticWorld::new(cfg.world.clone())?;
        let n = cfg.encoder.max_seq_len;
        let enc = |docs: &[String]| encode_corpus(&world.vocab, docs, n);
        let (gt, ge) = split_70_30(&gen_domain_corpus(&world.general, cfg.docs_per_domain)?);
        let (dt, de) = split_70_30(&gen_domain_corpus(&world.dom_a, cfg.domain_docs)?);
        let splits = gen_classification_task(&world.general, &world.dom_a, &cfg.task)?;
        let task = EncodedTask::from_splits(&splits, &world.vocab, n);
        Ok(Corpora {
            general_train: enc(&gt),
            general_test: enc(&ge),
            domain_train: enc(&dt),
            domain_test: enc(&de),
            task,
            world,
        })
    }
}

/// Held-out MLM losses of one model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmPair {
    pub general: f64,
    pub domain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub seed: u64,
    pub general_model: MlmPair,
    pub dapt: MlmPair,
    pub gmap: MlmPair,
}

/// Models produced by the pretraining stage of one seed.
#[derive(Clone, Debug)]
pub struct PretrainedModels {
    pub general: GmapModel,
    pub dapt: GmapModel,
    pub gmap: GmapModel,
}

fn seeded(cfg: &TrainConfig, seed: u64, stream: u64) -> TrainConfig {
    TrainConfig {
        seed: seed.wrapping_mul(1000).wrapping_add(stream),
        ..cfg.clone()
    }
}

fn mlm_pair(model: &GmapModel, data: &Corpora, mask_prob: f64) -> Result<MlmPair> {
    Ok(MlmPair {
        general: eval_mlm_loss(model, &data.general_test, mask_prob, MlmPath::Model)?,
        domain: eval_mlm_loss(model, &data.domain_test, mask_prob, MlmPath::Model)?,
    })
}

/// General pretraining, DAPT from the general model, and G-MAP (chunk-gated,
/// backbone initialized from the general model) trained on the same domain
/// stream for the same number of steps.
pub fn run_pretraining(
    cfg: &ExperimentConfig,
    data: &Corpora,
    seed: u64,
) -> Result<(PretrainOutcome, PretrainedModels)> {
    let mut general = GmapModel::bare(cfg.encoder.clone(), seed)?.with_vocab(data.world.vocab.clone())?;
    pretrain_mlm(&mut general, &data.general_train, &seeded(&cfg.pretrain, seed, 1))?;

    let mut dapt = general.clone();
    adapt(
        &mut dapt,
        &data.domain_train,
        &seeded(&cfg.adapt, seed, 2),
        AdaptMode::Dapt,
    )?;

    let mut gmap = GmapModel::compose(&general, &general, Composition::Gmap { fusion: cfg.chunk }, seed)?;
    adapt(
        &mut gmap,
        &data.domain_train,
        &seeded(&cfg.adapt, seed, 2),
        AdaptMode::Dapt,
    )?;

    let outcome = PretrainOutcome {
        seed,
        general_model: mlm_pair(&general, data, cfg.mask_prob)?,
        dapt: mlm_pair(&dapt, data, cfg.mask_prob)?,
        gmap: mlm_pair(&gmap, data, cfg.mask_prob)?,
    };
    Ok((outcome, PretrainedModels { general, dapt, gmap }))
}

/// Test macro-F1 of a fine-tuned composition.
pub fn finetune_composition(
    cfg: &ExperimentConfig,
    data: &Corpora,
    models: &PretrainedModels,
    composition: &Composition,
    seed: u64,
) -> Result<f64> {
    let model = match composition {
        Composition::Bare => models.dapt.clone(),
        c => GmapModel::compose(&models.general, &models.dapt, c.clone(), seed)?,
    };
    let mut model = model.with_head(cfg.head.clone(), seed)?;
    let report = finetune_classify(&mut model, &data.task, &seeded(&cfg.finetune, seed, 3))?;
    Ok(report.macro_f1.unwrap_or(f64::NAN))
}
