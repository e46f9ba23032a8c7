use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::metrics::{accuracy, macro_f1, micro_f1};
use super::report::EvalReport;
use crate::data::{mask_tokens, MaskMode, MaskedBatch, TaskExample, TaskSplits, Vocab};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Composition, GmapModel, Sequence};
use crate::optim::AdamState;
use crate::params::ParamStore;

/// Masking seed shared by every MLM evaluation.
pub const EVAL_SEED: u64 = 0x5eed_0e7a;
const EVAL_BATCH: usize = 16;

/// `[CLS] doc [SEP]` id sequences, truncated to `max_len`.
pub fn encode_corpus(vocab: &Vocab, docs: &[String], max_len: usize) -> Vec<Vec<usize>> {
    docs.iter().map(|d| vocab.encode_sequence(d, max_len)).collect()
}

/// Labelled splits as model-ready sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTask {
    pub num_classes: usize,
    pub train: Vec<(Sequence, usize)>,
    pub dev: Vec<(Sequence, usize)>,
    pub test: Vec<(Sequence, usize)>,
}

impl EncodedTask {
    pub fn from_splits(splits: &TaskSplits, vocab: &Vocab, max_len: usize) -> Self {
        Self::from_examples(
            splits.num_classes,
            &splits.train,
            &splits.dev,
            &splits.test,
            vocab,
            max_len,
        )
    }

    pub fn from_examples(
        num_classes: usize,
        train: &[TaskExample],
        dev: &[TaskExample],
        test: &[TaskExample],
        vocab: &Vocab,
        max_len: usize,
    ) -> Self {
        let enc = |xs: &[TaskExample]| {
            xs.iter()
                .map(|e| (Sequence::new(vocab.encode_sequence(&e.text, max_len)), e.label))
                .collect()
        };
        EncodedTask {
            num_classes,
            train: enc(train),
            dev: enc(dev),
            test: enc(test),
        }
    }

    /// Training inputs without labels, for task-adaptive pretraining.
    pub fn train_texts(&self) -> Vec<Vec<usize>> {
        self.train.iter().map(|(s, _)| s.ids.clone()).collect()
    }
}

/// Continued-pretraining corpus choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptMode {
    Dapt,
    Tapt,
}

/// Which path an MLM loss is measured through.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MlmPath {
    /// The full composition, memory included.
    #[default]
    Model,
    /// The general encoder on its own.
    General,
}

fn mlm_loss_on(
    model: &GmapModel,
    g: &mut Graph,
    batch: &MaskedBatch,
    path: MlmPath,
    dropout: &mut Dropout,
) -> Result<Var> {
    match path {
        MlmPath::Model => model.mlm_loss(g, batch, dropout),
        MlmPath::General => model.general_mlm_loss(g, batch),
    }
}

fn pad_for(seqs: &[Vec<usize>]) -> Vec<Vec<bool>> {
    seqs.iter().map(|s| vec![true; s.len()]).collect()
}

fn step(model: &mut GmapModel, adam: &mut AdamState, g: &Graph, loss: Var, index: usize) -> Result<f64> {
    let v = g.scalar(loss)?;
    if !v.is_finite() {
        return Err(Error::Divergence { step: index, loss: v });
    }
    model.store.zero_grads();
    g.backward(loss, &mut model.store)?;
    adam.step(&mut model.store)?;
    Ok(v)
}

fn adam_for(cfg: &TrainConfig) -> AdamState {
    AdamState::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon)
}

/// Adam-optimized MLM training through the full composition. Returns the
/// per-step training loss.
pub fn pretrain_mlm(model: &mut GmapModel, corpus: &[Vec<usize>], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.epochs == 0 || cfg.max_steps == Some(0) {
        return Ok(Vec::new());
    }
    if corpus.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    let vocab_size = model.config.domain.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = adam_for(cfg);
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| losses.len() >= m) {
                break 'epochs;
            }
            let ids: Vec<Vec<usize>> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let batch = mask_tokens(
                &ids,
                &pad_for(&ids),
                cfg.mask_prob,
                MaskMode::Standard,
                vocab_size,
                &mut rng,
            )?;
            if batch.masked_count() == 0 {
                continue;
            }
            let mut dropout = Dropout::new(model.config.domain.dropout, rng.gen());
            let mut g = Graph::new();
            let loss = model.mlm_loss(&mut g, &batch, &mut dropout)?;
            losses.push(step(model, &mut adam, &g, loss, losses.len())?);
        }
    }
    model
        .lineage
        .push(format!("mlm:seed={},steps={}", cfg.seed, losses.len()));
    Ok(losses)
}

/// Continued MLM training on a domain corpus (DAPT) or on the task's own
/// training text (TAPT). DAPT+TAPT is two calls in sequence.
pub fn adapt(model: &mut GmapModel, corpus: &[Vec<usize>], cfg: &TrainConfig, mode: AdaptMode) -> Result<Vec<f64>> {
    let losses = pretrain_mlm(model, corpus, cfg)?;
    let tag = match mode {
        AdaptMode::Dapt => "dapt",
        AdaptMode::Tapt => "tapt",
    };
    if let Some(last) = model.lineage.last_mut() {
        *last = format!("{tag}:{last}");
    }
    Ok(losses)
}

/// Mean cross-entropy over all masked positions of `corpus`, masking drawn
/// from [`EVAL_SEED`]. Parameters are not touched.
pub fn eval_mlm_loss(model: &GmapModel, corpus: &[Vec<usize>], mask_prob: f64, path: MlmPath) -> Result<f64> {
    let vocab_size = model.config.domain.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in corpus.chunks(EVAL_BATCH) {
        let batch = mask_tokens(
            chunk,
            &pad_for(chunk),
            mask_prob,
            MaskMode::Standard,
            vocab_size,
            &mut rng,
        )?;
        let n = batch.masked_count();
        if n == 0 {
            continue;
        }
        let mut g = Graph::inference();
        let loss = mlm_loss_on(model, &mut g, &batch, path, &mut Dropout::off())?;
        total += g.scalar(loss)? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(total / count as f64)
}

/// MLM loss of one explicit batch.
pub fn batch_mlm_loss(model: &GmapModel, batch: &MaskedBatch, path: MlmPath) -> Result<f64> {
    let mut g = Graph::inference();
    let loss = mlm_loss_on(model, &mut g, batch, path, &mut Dropout::off())?;
    g.scalar(loss)
}

/// Predictions for every example.
pub fn predict_all(model: &GmapModel, examples: &[(Sequence, usize)]) -> Result<Vec<usize>> {
    examples.iter().map(|(s, _)| model.predict(s)).collect()
}

/// (accuracy, macro-F1, micro-F1)
pub fn evaluate_classifier(model: &GmapModel, examples: &[(Sequence, usize)]) -> Result<(f64, f64, f64)> {
    let classes = model.head()?.num_classes;
    let preds = predict_all(model, examples)?;
    let labels: Vec<usize> = examples.iter().map(|(_, l)| *l).collect();
    Ok((
        accuracy(&preds, &labels),
        macro_f1(&preds, &labels, classes),
        micro_f1(&preds, &labels, classes),
    ))
}

/// Trains the classification head (and everything unfrozen) on the train
/// split, keeps the parameters with the best dev macro-F1 and reports test
/// metrics.
pub fn finetune_classify(model: &mut GmapModel, task: &EncodedTask, cfg: &TrainConfig) -> Result<EvalReport> {
    cfg.validate()?;
    for (name, split) in [("train", &task.train), ("dev", &task.dev), ("test", &task.test)] {
        if split.is_empty() {
            return Err(Error::Data(format!("empty {name} split")));
        }
    }
    let classes = model.head()?.num_classes;
    if classes != task.num_classes {
        return Err(Error::config(format!(
            "{classes}-class head for a {}-class task",
            task.num_classes
        )));
    }
    if model.config.composition != Composition::Bare {
        model.set_general_frozen(cfg.frozen);
    }
    if let Some(h) = model.config.head.as_mut() {
        h.dropout = cfg.dropout;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = adam_for(cfg);
    let mut steps = 0usize;
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let consider = |model: &GmapModel, best: &mut Option<(f64, ParamStore)>| -> Result<()> {
        let (_, f1, _) = evaluate_classifier(model, &task.dev)?;
        if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
            *best = Some((f1, model.store.clone()));
        }
        Ok(())
    };
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break 'epochs;
            }
            let batch: Vec<(Sequence, usize)> = chunk.iter().map(|&i| task.train[i].clone()).collect();
            let mut dropout = Dropout::new(model.config.domain.dropout, rng.gen());
            let mut g = Graph::new();
            let loss = model.classify_loss(&mut g, &batch, &mut dropout)?;
            step(model, &mut adam, &g, loss, steps)?;
            steps += 1;
        }
        consider(model, &mut best)?;
    }
    if best.is_none() || cfg.max_steps.is_some() {
        consider(model, &mut best)?;
    }
    let (dev_f1, store) = best.expect("evaluated at least once");
    for (name, p) in model.store.iter_mut() {
        if !p.frozen {
            p.tensor = store.get(name)?.clone();
        }
    }
    model.lineage.push(format!("finetune:seed={},steps={steps}", cfg.seed));
    let (acc, macro_, micro) = evaluate_classifier(model, &task.test)?;
    Ok(EvalReport {
        label: String::new(),
        seed: cfg.seed,
        fingerprint: model.fingerprint(),
        mlm_loss: BTreeMap::new(),
        accuracy: Some(acc),
        macro_f1: Some(macro_),
        micro_f1: Some(micro),
        dev_macro_f1: Some(dev_f1),
        steps,
    })
}
