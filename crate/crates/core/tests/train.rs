//! Training loops, evaluation and metrics.

#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::BTreeMap;

use common::*;
use gmap::data::{gen_domain_corpus, mask_tokens, MaskMode, SyntheticWorld, TaskExample, Vocab, WorldConfig};
use gmap::train::metrics::{accuracy, confusion, macro_f1, micro_f1};
use gmap::train::{
    adapt, encode_corpus, eval_mlm_loss, finetune_classify, layer_sweep, pretrain_mlm, AdaptMode, EncodedTask,
    EvalReport, MlmPath, SeedSummary, TrainConfig, EVAL_SEED,
};
use gmap::{Composition, EncoderConfig, FusionSpec, GmapModel, HeadConfig, Strategy, Target, Variant};
use proptest::prelude::*;
use rand::Rng;

fn world_corpus(docs: usize, general: bool) -> (Vocab, Vec<Vec<usize>>) {
    let world = SyntheticWorld::new(WorldConfig::default()).unwrap();
    let spec = if general { &world.general } else { &world.dom_a };
    let text = gen_domain_corpus(spec, docs).unwrap();
    let ids = encode_corpus(&world.vocab, &text, 16);
    (world.vocab, ids)
}

fn small(vocab: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        d_model: 16,
        num_heads: 2,
        d_ff: 32,
        vocab_size: vocab,
        max_seq_len: 16,
        dropout: 0.0,
    }
}

#[test]
fn zero_epochs_change_nothing() {
    let (vocab, corpus) = world_corpus(20, true);
    let mut m = GmapModel::bare(small(vocab.len()), 0).unwrap();
    let before = m.store.clone();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    assert!(pretrain_mlm(&mut m, &corpus, &cfg).unwrap().is_empty());
    assert!(adapt(&mut m, &corpus, &cfg, AdaptMode::Tapt).unwrap().is_empty());
    assert_eq!(m.store, before);

    let task = separable_task(&tiny_vocab());
    let mut c = GmapModel::bare(small(tiny_vocab().len()), 0)
        .unwrap()
        .with_head(HeadConfig::new(2, 1), 0)
        .unwrap();
    let before = c.store.clone();
    let report = finetune_classify(&mut c, &task, &cfg).unwrap();
    assert_eq!(report.steps, 0);
    assert_eq!(c.store, before);
}

#[test]
fn untrained_loss_is_near_uniform() {
    let (vocab, corpus) = world_corpus(200, true);
    assert_eq!(vocab.len(), 200);
    let m = GmapModel::bare(EncoderConfig::desk(200), 1).unwrap();
    let loss = eval_mlm_loss(&m, &corpus, 0.15, MlmPath::Model).unwrap();
    assert!((loss - 200f64.ln()).abs() < 0.3, "{loss}");
    assert_eq!(loss, eval_mlm_loss(&m, &corpus, 0.15, MlmPath::Model).unwrap());
}

#[test]
fn four_sentences_are_memorized() {
    let words: Vec<String> = (0..24).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::from_tokens(words.iter().cloned()).unwrap();
    let docs: Vec<String> = words.chunks(6).map(|c| c.join(" ")).collect();
    let corpus = encode_corpus(&vocab, &docs, 8);
    let mut m = GmapModel::bare(
        EncoderConfig {
            max_seq_len: 8,
            d_model: 32,
            d_ff: 64,
            ..small(vocab.len())
        },
        2,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: 4,
        lr: 3e-3,
        max_steps: Some(500),
        ..TrainConfig::default()
    };
    let losses = pretrain_mlm(&mut m, &corpus, &cfg).unwrap();
    assert!(losses.len() <= 500);
    let held = eval_mlm_loss(&m, &corpus, 0.15, MlmPath::Model).unwrap();
    assert!(held < 0.1, "{held}");
}

#[test]
fn training_is_a_pure_function_of_the_seed() {
    let (vocab, corpus) = world_corpus(40, true);
    let run = |seed| {
        let mut m = GmapModel::bare(small(vocab.len()), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            seed,
            ..TrainConfig::default()
        };
        let losses = pretrain_mlm(&mut m, &corpus, &cfg).unwrap();
        (losses, m.store)
    };
    let (a, sa) = run(7);
    let (b, sb) = run(7);
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12));
    assert_eq!(sa, sb);
    assert_ne!(run(8).0, a);
}

#[test]
fn continued_training_on_the_same_corpus_does_not_forget_and_domain_training_adapts() {
    let (vocab, general) = world_corpus(400, true);
    let (_, domain) = world_corpus(200, false);
    let (g_train, g_test) = general.split_at(280);
    let (d_train, d_test) = domain.split_at(140);
    let mut m = GmapModel::bare(small(vocab.len()), 4).unwrap();
    let pre = TrainConfig {
        epochs: 100,
        lr: 3e-3,
        max_steps: Some(400),
        ..TrainConfig::default()
    };
    pretrain_mlm(&mut m, g_train, &pre).unwrap();
    let start_general = eval_mlm_loss(&m, g_test, 0.15, MlmPath::Model).unwrap();
    let start_domain = eval_mlm_loss(&m, d_test, 0.15, MlmPath::Model).unwrap();
    let more = TrainConfig {
        max_steps: Some(100),
        seed: 9,
        ..pre.clone()
    };
    let mut same = m.clone();
    adapt(&mut same, g_train, &more, AdaptMode::Dapt).unwrap();
    let after = eval_mlm_loss(&same, g_test, 0.15, MlmPath::Model).unwrap();
    assert!(after <= start_general + 0.05, "{start_general} -> {after}");

    let mut dapt = m.clone();
    adapt(&mut dapt, d_train, &more, AdaptMode::Dapt).unwrap();
    let adapted = eval_mlm_loss(&dapt, d_test, 0.15, MlmPath::Model).unwrap();
    assert!(adapted < start_domain, "{start_domain} -> {adapted}");
    assert!(dapt.lineage.last().unwrap().starts_with("dapt:"));
}

#[test]
fn held_out_loss_matches_enumeration() {
    let vocab = Vocab::from_tokens(["a", "b", "c", "d", "e"]).unwrap();
    let docs = vec!["a b c d e a".to_string(), "e d c b".to_string()];
    let corpus = encode_corpus(&vocab, &docs, 8);
    let cfg = EncoderConfig {
        max_seq_len: 8,
        ..small(vocab.len())
    };
    let mut m = GmapModel::bare(cfg.clone(), 5).unwrap();
    randomize(&mut m.store, 6, 0.5);
    let got = eval_mlm_loss(&m, &corpus, 0.5, MlmPath::Model).unwrap();

    let pad: Vec<Vec<bool>> = corpus.iter().map(|s| vec![true; s.len()]).collect();
    let batch = mask_tokens(&corpus, &pad, 0.5, MaskMode::Standard, vocab.len(), &mut rng(EVAL_SEED)).unwrap();
    let (mut total, mut count) = (0.0, 0);
    for i in 0..corpus.len() {
        let hidden = encoder(&m.store, &cfg, "domain", &batch.inputs[i], &pad[i], &BTreeMap::new());
        let logits = mlm_logits(&m.store, "domain", hidden.last().unwrap());
        for (t, target) in batch.labels[i].iter().enumerate() {
            if let Target::Class(c) = target {
                let row = &logits[t];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                total += z.ln() - row[*c];
                count += 1;
            }
        }
    }
    assert!(count > 0);
    assert!(
        (got - total / count as f64).abs() < 1e-10,
        "{got} vs {}",
        total / count as f64
    );
}

fn tiny_vocab() -> Vocab {
    Vocab::from_tokens((0..12).map(|i| format!("t{i}"))).unwrap()
}

/// Class 0 documents carry `t0`, class 1 documents carry `t1`; the rest is
/// noise over `t2…t11`.
fn separable_task(vocab: &Vocab) -> EncodedTask {
    let mut r = rng(31);
    let mut make = |n: usize, offset: usize| -> Vec<TaskExample> {
        (0..n)
            .map(|i| {
                let label = r.gen_range(0..2);
                let mut words: Vec<String> = (0..6).map(|_| format!("t{}", r.gen_range(2..12))).collect();
                let at = r.gen_range(0..6);
                words[at] = format!("t{label}");
                TaskExample {
                    id: offset + i,
                    label,
                    text: words.join(" "),
                }
            })
            .collect()
    };
    let train = make(200, 0);
    let dev = make(100, 200);
    let test = make(100, 300);
    EncodedTask::from_examples(2, &train, &dev, &test, vocab, 8)
}

fn classify_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        lr: 5e-3,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_task_is_learned_by_every_composition() {
    let vocab = tiny_vocab();
    let task = separable_task(&vocab);
    let cfg = EncoderConfig {
        max_seq_len: 8,
        ..small(vocab.len())
    };
    let general = GmapModel::bare(cfg.clone(), 10).unwrap();
    let domain = GmapModel::bare(cfg.clone(), 11).unwrap();
    let mut compositions = vec![Composition::LogitsFusion];
    for strategy in [
        Strategy::SingleLayer { dst: 2 },
        Strategy::MultiLayer,
        Strategy::Gated { dst: 2 },
        Strategy::ChunkGated {
            split: 1,
            dst_low: 1,
            dst_high: 2,
        },
    ] {
        for variant in [
            Variant::MemoryAttention,
            Variant::CrossAttention,
            Variant::GateAttention,
        ] {
            compositions.push(Composition::Gmap {
                fusion: FusionSpec::new(strategy).with_variant(variant),
            });
        }
    }
    let head = HeadConfig::new(2, 1);
    let mut bare = domain.clone().with_head(head.clone(), 0).unwrap();
    let mut results = vec![(
        "bare".to_string(),
        finetune_classify(&mut bare, &task, &classify_cfg(0)).unwrap(),
    )];
    for c in compositions {
        let mut m = GmapModel::compose(&general, &domain, c.clone(), 0)
            .unwrap()
            .with_head(head.clone(), 0)
            .unwrap();
        results.push((
            format!("{c:?}"),
            finetune_classify(&mut m, &task, &classify_cfg(0)).unwrap(),
        ));
    }
    for (name, r) in &results {
        assert!(r.accuracy.unwrap() > 0.95, "{name}: {:?}", r.accuracy);
    }
}

#[test]
fn fine_tuning_is_deterministic_and_rejects_empty_splits() {
    let vocab = tiny_vocab();
    let task = separable_task(&vocab);
    let cfg = EncoderConfig {
        max_seq_len: 8,
        ..small(vocab.len())
    };
    let base = GmapModel::bare(cfg, 12)
        .unwrap()
        .with_head(HeadConfig::new(2, 1), 1)
        .unwrap();
    let run = || finetune_classify(&mut base.clone(), &task, &classify_cfg(3)).unwrap();
    assert_eq!(run(), run());

    let mut empty = task.clone();
    empty.dev.clear();
    assert!(finetune_classify(&mut base.clone(), &empty, &classify_cfg(3)).is_err());
}

#[test]
fn best_dev_checkpoint_is_the_first_maximum_over_epochs() {
    let vocab = tiny_vocab();
    let task = separable_task(&vocab);
    let cfg = EncoderConfig {
        max_seq_len: 8,
        ..small(vocab.len())
    };
    let base = GmapModel::bare(cfg, 13)
        .unwrap()
        .with_head(HeadConfig::new(2, 1), 2)
        .unwrap();
    let run = |epochs| {
        let t = TrainConfig {
            epochs,
            lr: 2e-3,
            seed: 4,
            ..TrainConfig::default()
        };
        finetune_classify(&mut base.clone(), &task, &t).unwrap()
    };
    let reports: Vec<EvalReport> = (1..=5).map(run).collect();
    let best: Vec<f64> = reports.iter().map(|r| r.dev_macro_f1.unwrap()).collect();
    assert!(best.windows(2).all(|w| w[1] >= w[0]), "{best:?}");
    let last = *best.last().unwrap();
    let first = best.iter().position(|b| *b == last).unwrap();
    let winner = &reports[first];
    let fin = reports.last().unwrap();
    assert_eq!(fin.accuracy, winner.accuracy);
    assert_eq!(fin.macro_f1, winner.macro_f1);
}

#[test]
fn degenerate_sweep_matches_a_direct_run() {
    let vocab = tiny_vocab();
    let task = separable_task(&vocab);
    let cfg = EncoderConfig {
        max_seq_len: 8,
        ..small(vocab.len())
    };
    let general = GmapModel::bare(cfg.clone(), 14).unwrap();
    let domain = GmapModel::bare(cfg, 15).unwrap();
    let spec = FusionSpec::new(Strategy::Gated { dst: 2 });
    let head = HeadConfig::new(2, 1);
    let t = classify_cfg(0);
    let table = layer_sweep(
        &general,
        &domain,
        &[spec],
        Variant::MemoryAttention,
        &head,
        &task,
        &t,
        &[6],
    )
    .unwrap();
    assert_eq!(table.rows.len(), 1);
    let mut direct = GmapModel::compose(&general, &domain, Composition::Gmap { fusion: spec }, 6)
        .unwrap()
        .with_head(head.clone(), 6)
        .unwrap();
    let r = finetune_classify(&mut direct, &task, &TrainConfig { seed: 6, ..t.clone() }).unwrap();
    assert_eq!(table.rows[0].macro_f1, vec![r.macro_f1.unwrap()]);
    assert_eq!(table.rows[0].layers, vec![2]);
    let again = layer_sweep(
        &general,
        &domain,
        &[spec],
        Variant::MemoryAttention,
        &head,
        &task,
        &t,
        &[6],
    )
    .unwrap();
    assert_eq!(again, table);
}

#[test]
fn seed_summary_reports_mean_and_sample_deviation() {
    let reports: Vec<EvalReport> = [0.6, 0.7, 0.8]
        .iter()
        .map(|&f| EvalReport {
            macro_f1: Some(f),
            ..EvalReport::default()
        })
        .collect();
    let s = SeedSummary::from_reports(reports);
    assert!((s.mean_macro_f1 - 0.7).abs() < 1e-12);
    assert!((s.std_macro_f1 - 0.1).abs() < 1e-12);
    assert_eq!(s.display(), "70.0±10.0");
}

proptest! {
    #[test]
    fn metric_identities(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        prop_assert!((micro_f1(&preds, &labels, 4) - accuracy(&preds, &labels)).abs() < 1e-12);

        let m = confusion(&preds, &labels, 4);
        let mut total = 0.0;
        for c in 0..4 {
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for (p, l) in preds.iter().zip(&labels) {
                match (*p == c, *l == c) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    _ => {}
                }
            }
            prop_assert_eq!(m[c][c] as f64, tp);
            let denom: f64 = 2.0 * tp + fp + fn_;
            total += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
        }
        prop_assert!((macro_f1(&preds, &labels, 4) - total / 4.0).abs() < 1e-12);
    }
}
