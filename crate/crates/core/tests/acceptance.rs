//! The acceptance criteria. Each test prints one `criterion N: PASS|FAIL`
//! line to stderr, uncaptured, then asserts.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use common::*;
use gmap::data::{mask_tokens, MaskMode, TaskExample, Vocab};
use gmap::encoder::{layer_forward, AttnWeights, Dropout, LayerHook};
use gmap::experiment::{finetune_composition, run_pretraining, Corpora, ExperimentConfig, PretrainOutcome};
use gmap::fusion::{build_memory_gated, memory_attention, GateParams};
use gmap::model::{ensemble_predict, param_census, softmax, MemoryMode};
use gmap::train::metrics::median;
use gmap::train::{
    eval_mlm_loss, finetune_classify, grad_check_report, layer_sweep, sweep_candidates, CheckBatch, EncodedTask,
    GradCheckConfig, MlmPath, SweepFamily, TrainConfig,
};
use gmap::{Composition, EncoderConfig, FusionSpec, GmapModel, Graph, HeadConfig, Sequence, Strategy, Tensor, Variant};
use rand::Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn bind(g: &mut Graph, w: &Attn) -> AttnWeights {
    AttnWeights {
        wq: g.constant(&to_tensor(&w.wq)),
        wk: g.constant(&to_tensor(&w.wk)),
        wv: g.constant(&to_tensor(&w.wv)),
        wo: g.constant(&to_tensor(&w.wo)),
    }
}

fn random_pad(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut pad: Vec<bool> = (0..n).map(|_| r.gen_bool(0.7)).collect();
    pad[0] = true;
    pad
}

fn strategies(l: usize) -> [Strategy; 4] {
    [
        Strategy::SingleLayer { dst: l },
        Strategy::MultiLayer,
        Strategy::Gated { dst: l },
        Strategy::ChunkGated {
            split: l / 2,
            dst_low: l / 2,
            dst_high: l,
        },
    ]
}

const VARIANTS: [Variant; 3] = [
    Variant::MemoryAttention,
    Variant::CrossAttention,
    Variant::GateAttention,
];

fn composed(cfg: &EncoderConfig, spec: FusionSpec, seed: u64) -> GmapModel {
    let general = GmapModel::bare(cfg.clone(), 2 * seed + 1).unwrap();
    let domain = GmapModel::bare(cfg.clone(), 2 * seed + 2).unwrap();
    GmapModel::compose(&general, &domain, Composition::Gmap { fusion: spec }, seed).unwrap()
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let _guard = serial();
    let start = Instant::now();
    let cfg = tiny_config(6, 32, 4, 20, 8);
    let check = GradCheckConfig::default();
    let mut worst: f64 = 0.0;
    let mut problems = Vec::new();
    let mut combos = 0;
    for (k, strategy) in strategies(6).into_iter().enumerate() {
        for (v, variant) in VARIANTS.into_iter().enumerate() {
            let spec = FusionSpec::new(strategy).with_variant(variant);
            let seed = (3 * k + v) as u64;
            let mut model = composed(&cfg, spec, seed)
                .with_head(HeadConfig::new(3, 1), seed)
                .unwrap();
            let mut r = rng(seed);
            for (name, p) in model.store.iter_mut() {
                if name.contains(".fusion.") || name.contains(".gattn.") {
                    for x in p.tensor.values_mut() {
                        *x = r.gen_range(-0.5..0.5);
                    }
                }
            }
            let seqs: Vec<Vec<usize>> = (0..2).map(|_| random_ids(&mut r, 7, 20)).collect();
            let pad: Vec<Vec<bool>> = seqs.iter().map(|s| vec![true; s.len()]).collect();
            let mlm = mask_tokens(&seqs, &pad, 1.0, MaskMode::ForceMask, 20, &mut r).unwrap();
            let labelled = seqs
                .iter()
                .enumerate()
                .map(|(i, s)| (Sequence::new(s.clone()), i % 3))
                .collect();
            for batch in [CheckBatch::Mlm(mlm), CheckBatch::Classify(labelled)] {
                let report = grad_check_report(&model, &batch, &check).unwrap();
                worst = worst.max(report.max_rel_err());
                if report.groups.iter().any(|g| g.name.starts_with("general.")) {
                    problems.push(format!("{spec}: frozen tensor checked"));
                }
                for slot in spec.gate_slots() {
                    let base = slot.base("domain");
                    if !report.groups.iter().any(|g| g.name.starts_with(&base)) {
                        problems.push(format!("{spec}: {base} not checked"));
                    }
                }
                if let Some(g) = report
                    .worst()
                    .filter(|g| g.max_rel_err.is_nan() || g.max_rel_err >= check.tolerance)
                {
                    problems.push(format!("{spec}: {} rel err {:e}", g.name, g.max_rel_err));
                }
            }
            combos += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = problems.is_empty() && worst < 1e-4 && elapsed < Duration::from_secs(120);
    verdict(
        "1",
        pass,
        &format!(
            "combos={combos} max_rel_err={worst:.3e} runtime={:.1}s {problems:?}",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_02_oracle_equivalence() {
    let _guard = serial();
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut r = rng(seed);
        let (n, d) = (r.gen_range(1..6), 4);
        let h = random_m(&mut r, n, d);
        let m = random_m(&mut r, n, d);
        let w = Attn::random(&mut r, d);
        let pad = random_pad(&mut r, n);
        let mut g = Graph::inference();
        let (hv, mv) = (g.constant(&to_tensor(&h)), g.constant(&to_tensor(&m)));
        let aw = bind(&mut g, &w);
        let out = memory_attention(&mut g, hv, Some(mv), &aw, &pad, 2).unwrap();
        let want = common::memory_attention(&h, Some(&m), &w, &pad, 2);
        worst = worst.max(max_abs(&rows_of(&g.tensor(out)), &want));

        let cache: Vec<M> = (0..3).map(|_| random_m(&mut r, n, d)).collect();
        let weight: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let bias = r.gen_range(-1.0..1.0);
        let vars: Vec<_> = cache.iter().map(|c| g.constant(&to_tensor(c))).collect();
        let gate = GateParams {
            weight: g.constant(&Tensor::vector(weight.clone())),
            bias: g.constant(&Tensor::vector(vec![bias])),
        };
        let gm = build_memory_gated(&mut g, &vars, gate).unwrap();
        let (want_m, want_a) = gated_memory(&cache, &weight, bias);
        worst = worst.max(max_abs(&rows_of(&g.tensor(gm.memory)), &want_m));
        worst = worst.max(max_abs(&rows_of(&g.tensor(gm.alpha)), &want_a));
    }

    let cfg = tiny_config(2, 4, 2, 12, 6);
    let none = BTreeMap::new();
    let general = GmapModel::bare(cfg.clone(), 4).unwrap();
    let domain = GmapModel::bare(cfg.clone(), 5).unwrap();
    let mut fused = GmapModel::compose(&general, &domain, Composition::LogitsFusion, 6)
        .unwrap()
        .with_head(HeadConfig::new(3, 2), 7)
        .unwrap();
    randomize(&mut fused.store, 8, 0.6);
    let headed = |seed: u64| {
        let mut m = GmapModel::bare(cfg.clone(), seed)
            .unwrap()
            .with_head(HeadConfig::new(3, 1), seed)
            .unwrap();
        randomize(&mut m.store, seed + 100, 0.8);
        m
    };
    let (a, b) = (headed(1), headed(2));
    for seed in 0..20 {
        let seq = Sequence::new(random_ids(&mut rng(seed), 6, 12));
        let (logits, _) = fused.forward_classify(&seq).unwrap();
        let gh = encoder(&fused.store, &cfg, "general", &seq.ids, &seq.pad, &none);
        let dh = encoder(&fused.store, &cfg, "domain", &seq.ids, &seq.pad, &none);
        let lg = class_head(&fused.store, "general", gh.last().unwrap(), 2);
        let ld = class_head(&fused.store, "domain", dh.last().unwrap(), 2);
        for (k, v) in logits.values().iter().enumerate() {
            worst = worst.max((v - (lg[k] + ld[k])).abs());
        }

        let proba = |m: &GmapModel| {
            let hidden = encoder(&m.store, &cfg, "domain", &seq.ids, &seq.pad, &none);
            softmax(&class_head(&m.store, "domain", hidden.last().unwrap(), 1))
        };
        let (pa, pb) = (proba(&a), proba(&b));
        for (k, p) in ensemble_predict(&a, &b, &seq).unwrap().iter().enumerate() {
            worst = worst.max((p - 0.5 * (pa[k] + pb[k])).abs());
        }
    }
    verdict("2", worst < 1e-10, &format!("max_abs_err={worst:.3e}"));
}

#[test]
fn criterion_03_structural_identities() {
    let _guard = serial();
    let mut bitwise = 0;
    let mut worst_dup: f64 = 0.0;
    let cfg = tiny_config(1, 4, 2, 12, 6);
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        let n = r.gen_range(1..6);
        let pad = random_pad(&mut r, n);
        let h = random_m(&mut r, n, 4);
        let mut all = true;
        for variant in VARIANTS {
            let mut model = composed(
                &cfg,
                FusionSpec::new(Strategy::Gated { dst: 1 }).with_variant(variant),
                seed,
            );
            randomize(&mut model.store, seed, 0.5);
            let mut g = Graph::inference();
            let hv = g.constant(&to_tensor(&h));
            let empty = g.constant(&Tensor::zeros(vec![0, 4]));
            let hook = LayerHook { memory: empty, variant };
            let store = &model.store;
            let plain = layer_forward(&mut g, store, &cfg, "domain", 1, hv, &pad, None, &mut Dropout::off()).unwrap();
            let hooked = layer_forward(
                &mut g,
                store,
                &cfg,
                "domain",
                1,
                hv,
                &pad,
                Some(&hook),
                &mut Dropout::off(),
            )
            .unwrap();
            all &= g.values(plain) == g.values(hooked);
        }
        bitwise += all as usize;

        let w = Attn::random(&mut r, 4);
        let mut g = Graph::inference();
        let hv = g.constant(&to_tensor(&h));
        let aw = bind(&mut g, &w);
        let plain = memory_attention(&mut g, hv, None, &aw, &pad, 2).unwrap();
        let dup = memory_attention(&mut g, hv, Some(hv), &aw, &pad, 2).unwrap();
        worst_dup = worst_dup.max(max_abs(&rows_of(&g.tensor(plain)), &rows_of(&g.tensor(dup))));
    }
    verdict(
        "3",
        bitwise == 100 && worst_dup < 1e-9,
        &format!("memory_off_bitwise={bitwise}/100 duplication_max_err={worst_dup:.3e}"),
    );
}

fn trainable(model: &GmapModel) -> usize {
    param_census(model)
        .iter()
        .find(|r| r.component == "total")
        .unwrap()
        .trainable
}

#[test]
fn criterion_04_parameter_census() {
    let _guard = serial();
    let mut lines = Vec::new();
    let mut pass = true;
    for cfg in [EncoderConfig::desk(200), tiny_config(4, 32, 4, 50, 8)] {
        let d = cfg.d_model as i64;
        let bare = trainable(&GmapModel::bare(cfg.clone(), 0).unwrap()) as i64;
        let l = cfg.num_layers;
        for (strategy, want) in strategies(l).into_iter().zip([0, 0, d + 1, 2 * (d + 1)]) {
            let added = trainable(&composed(&cfg, FusionSpec::new(strategy), 1)) as i64 - bare;
            pass &= added == want;
            lines.push(format!("d={d} {}:{added:+}", FusionSpec::new(strategy)));
        }
    }
    verdict("4", pass, &lines.join(" "));
}

fn world_task(vocab: &Vocab, max_len: usize) -> EncodedTask {
    let mut r = rng(77);
    let content: Vec<&str> = vocab.tokens()[5..].iter().map(String::as_str).collect();
    let mut make = |n: usize, offset: usize| -> Vec<TaskExample> {
        (0..n)
            .map(|i| {
                let label = r.gen_range(0..2);
                let words: Vec<&str> = (0..8).map(|_| content[r.gen_range(0..content.len())]).collect();
                let mut text = words.join(" ");
                text.push(' ');
                text.push_str(content[label]);
                TaskExample {
                    id: offset + i,
                    label,
                    text,
                }
            })
            .collect()
    };
    let (train, dev, test) = (make(60, 0), make(20, 60), make(20, 80));
    EncodedTask::from_examples(2, &train, &dev, &test, vocab, max_len)
}

#[test]
fn criterion_05_frozen_general_is_untouched() {
    let _guard = serial();
    let cfg = ExperimentConfig {
        docs_per_domain: 300,
        domain_docs: 100,
        ..ExperimentConfig::default()
    };
    let data = Corpora::build(&cfg).unwrap();
    let mut general = GmapModel::bare(cfg.encoder.clone(), 5)
        .unwrap()
        .with_vocab(data.world.vocab.clone())
        .unwrap();
    let pre = TrainConfig {
        max_steps: Some(60),
        ..cfg.pretrain.clone()
    };
    gmap::train::pretrain_mlm(&mut general, &data.general_train, &pre).unwrap();
    let mut model = GmapModel::compose(&general, &general, Composition::Gmap { fusion: cfg.chunk }, 5)
        .unwrap()
        .with_head(HeadConfig::new(4, 1), 5)
        .unwrap();
    let general_bytes = |m: &GmapModel| -> Vec<u8> {
        m.store
            .iter()
            .filter(|(n, _)| n.starts_with("general.") && !n.starts_with("general.cls."))
            .flat_map(|(n, p)| {
                let mut b = n.as_bytes().to_vec();
                b.extend(p.tensor.values().iter().flat_map(|v| v.to_le_bytes()));
                b
            })
            .collect()
    };
    let before = general_bytes(&model);
    let loss_before = eval_mlm_loss(&model, &data.general_test, 0.15, MlmPath::General).unwrap();
    let ft = TrainConfig {
        epochs: 2,
        frozen: true,
        ..cfg.finetune.clone()
    };
    let report = finetune_classify(&mut model, &data.task, &ft).unwrap();
    let after = general_bytes(&model);
    let loss_after = eval_mlm_loss(&model, &data.general_test, 0.15, MlmPath::General).unwrap();
    let gap = (loss_after - loss_before).abs();
    let moved = model.store.iter().any(|(n, p)| n.starts_with("domain.") && !p.frozen) && report.steps > 0;
    verdict(
        "5",
        before == after && gap <= 1e-12 && moved,
        &format!(
            "general_bytes_identical={} mlm_loss_delta={gap:.3e} steps={}",
            before == after,
            report.steps
        ),
    );
}

struct SeedRun {
    outcome: PretrainOutcome,
    dapt_f1: f64,
    chunk_f1: f64,
    multi_f1: f64,
}

struct Pipeline {
    runs: Vec<SeedRun>,
    elapsed: Duration,
}

fn pipeline() -> &'static Pipeline {
    static CELL: OnceLock<Pipeline> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let cfg = ExperimentConfig::default();
        let data = Corpora::build(&cfg).unwrap();
        let multi = Composition::Gmap {
            fusion: FusionSpec::new(Strategy::MultiLayer),
        };
        let runs = (0..5)
            .map(|seed| {
                let (outcome, models) = run_pretraining(&cfg, &data, seed).unwrap();
                let f1 = |c: &Composition| finetune_composition(&cfg, &data, &models, c, seed).unwrap();
                SeedRun {
                    dapt_f1: f1(&Composition::Bare),
                    chunk_f1: f1(&Composition::Gmap { fusion: cfg.chunk }),
                    multi_f1: f1(&multi),
                    outcome,
                }
            })
            .collect();
        Pipeline {
            runs,
            elapsed: start.elapsed(),
        }
    })
}

fn medians(f: impl Fn(&SeedRun) -> f64) -> f64 {
    median(&pipeline().runs.iter().map(f).collect::<Vec<_>>())
}

#[test]
fn criterion_06_domain_adaptation_forgets_general_text() {
    let _guard = serial();
    let p = pipeline();
    let holds = p
        .runs
        .iter()
        .filter(|r| {
            let (g, d) = (&r.outcome.general_model, &r.outcome.dapt);
            d.domain < g.domain && d.general > g.general
        })
        .count();
    let pass = holds >= 4 && p.elapsed < Duration::from_secs(600);
    verdict(
        "6",
        pass,
        &format!(
            "seeds_holding={holds}/5 median_general_loss general_model={:.4} dapt={:.4} runtime={:.1}s",
            medians(|r| r.outcome.general_model.general),
            medians(|r| r.outcome.dapt.general),
            p.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_07_chunk_gated_gmap_beats_dapt() {
    let _guard = serial();
    let p = pipeline();
    let (gmap_loss, dapt_loss) = (medians(|r| r.outcome.gmap.general), medians(|r| r.outcome.dapt.general));
    let wins = p
        .runs
        .iter()
        .filter(|r| r.outcome.gmap.general < r.outcome.dapt.general)
        .count();
    let (chunk, dapt) = (medians(|r| r.chunk_f1), medians(|r| r.dapt_f1));
    let (a, b) = (gmap_loss < dapt_loss, chunk >= dapt);
    verdict(
        "7",
        a && b,
        &format!(
            "(a) {} median_general_loss gmap={gmap_loss:.4} dapt={dapt_loss:.4} seeds_lower={wins}/5; \
             (b) {} median_macro_f1 chunk={chunk:.4} dapt={dapt:.4}",
            if a { "pass" } else { "fail" },
            if b { "pass" } else { "fail" },
        ),
    );
}

#[test]
fn criterion_08_chunk_gated_at_least_multi_layer() {
    let _guard = serial();
    let (chunk, multi) = (medians(|r| r.chunk_f1), medians(|r| r.multi_f1));
    verdict(
        "8",
        chunk >= multi,
        &format!("median_macro_f1 chunk={chunk:.4} multi={multi:.4}"),
    );
}

#[test]
fn criterion_09_sweep_tables_follow_the_protocol() {
    let _guard = serial();
    let chunk = sweep_candidates(SweepFamily::Chunk, 12, 12).unwrap();
    let pairs: Vec<(usize, usize)> = chunk
        .iter()
        .map(|s| match s.strategy {
            Strategy::ChunkGated { dst_low, dst_high, .. } => (dst_low, dst_high),
            _ => (0, 0),
        })
        .collect();
    let equal_interval = pairs == (1..=6).map(|i| (i, i + 6)).collect::<Vec<_>>();
    let single = sweep_candidates(SweepFamily::Single, 12, 12).unwrap();
    let gated = sweep_candidates(SweepFamily::Gated, 12, 12).unwrap();
    let dsts = |specs: &[FusionSpec]| -> Vec<usize> {
        specs
            .iter()
            .filter_map(|s| match s.strategy {
                Strategy::SingleLayer { dst } | Strategy::Gated { dst } => Some(dst),
                _ => None,
            })
            .collect()
    };
    let quarters = dsts(&single) == [3, 6, 9, 12] && dsts(&gated) == [3, 6, 9, 12];

    let cfg = tiny_config(12, 8, 2, 16, 12);
    let vocab = Vocab::from_tokens((0..11).map(|i| format!("t{i}"))).unwrap();
    let task = world_task(&vocab, 12);
    let general = GmapModel::bare(cfg.clone(), 1).unwrap();
    let backbone = GmapModel::bare(cfg, 2).unwrap();
    let head = HeadConfig::new(2, 1);
    let train = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let sweep = |specs: &[FusionSpec], seeds: &[u64]| {
        layer_sweep(
            &general,
            &backbone,
            specs,
            Variant::MemoryAttention,
            &head,
            &task,
            &train,
            seeds,
        )
        .unwrap()
    };
    let table = sweep(&chunk, &[0]);
    let shaped = table.rows.len() == 6
        && table
            .rows
            .iter()
            .zip(&pairs)
            .all(|(row, (lo, hi))| row.layers == vec![*lo, *hi])
        && table.to_csv().lines().count() == 7;
    let repeatable = sweep(&chunk, &[0]) == table;
    let single_table = sweep(&single, &[3]);
    let single_shaped = single_table.rows.iter().map(|r| r.layers[0]).collect::<Vec<_>>() == [3, 6, 9, 12];
    let single_repeatable = sweep(&single, &[3]) == single_table;
    verdict(
        "9",
        equal_interval && quarters && shaped && repeatable && single_shaped && single_repeatable,
        &format!(
            "chunk_pairs={pairs:?} quarters={quarters} table_shapes={} deterministic={}",
            shaped && single_shaped,
            repeatable && single_repeatable
        ),
    );
}

#[test]
fn criterion_10_gate_weights_sum_to_one() {
    let _guard = serial();
    let cfg = tiny_config(6, 16, 4, 30, 12);
    let mut worst: f64 = 0.0;
    let mut tokens = 0;
    for (k, strategy) in strategies(6).into_iter().enumerate().skip(2) {
        for variant in VARIANTS {
            for seed in 0..10 {
                let spec = FusionSpec::new(strategy).with_variant(variant);
                let mut model = composed(&cfg, spec, seed + 10 * k as u64);
                randomize(&mut model.store, seed, 0.3);
                for (name, p) in model.store.iter_mut() {
                    if name.contains(".fusion.") {
                        for x in p.tensor.values_mut() {
                            *x *= 20.0;
                        }
                    }
                }
                let mut r = rng(seed);
                let n = r.gen_range(3..12);
                let seq = Sequence {
                    pad: random_pad(&mut r, n),
                    ids: random_ids(&mut r, n, 30),
                };
                let (_, diag) = model.forward_hidden(&seq, MemoryMode::Live).unwrap();
                assert_eq!(diag.alphas.len(), spec.gate_slots().len());
                for alpha in diag.alphas.values() {
                    for row in rows_of(alpha) {
                        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                        tokens += 1;
                    }
                }
            }
        }
    }
    verdict(
        "10",
        worst <= 1e-9 && tokens > 0,
        &format!("rows={tokens} max_deviation={worst:.3e}"),
    );
}
