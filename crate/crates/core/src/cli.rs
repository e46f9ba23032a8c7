//! The `gmap` command line: argument parsing, TOML run configs, command
//! dispatch and exit codes.
//!
//! Precedence is flag > config file > built-in default. Reports go to stdout
//! as `key=value` lines; failures print one `error code=… kind=… message=…`
//! line to stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{fusion_conflict, load_checkpoint, save_checkpoint};
use crate::data::{
    build_vocab, gen_classification_task, gen_domain_corpus, mask_tokens, read_corpus, read_task_file, split_70_30,
    write_corpus, write_task_file, MaskMode, SyntheticWorld, TaskSpec, Vocab, WorldConfig,
};
use crate::encoder::{EncoderConfig, HeadConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionSpec, Strategy, Variant};
use crate::model::{param_census, Composition, GmapModel, Sequence};
use crate::train::{
    adapt, encode_corpus, eval_mlm_loss, evaluate_classifier, finetune_classify, grad_check_report, layer_sweep,
    pretrain_mlm, sweep_candidates, AdaptMode, CheckBatch, EncodedTask, GradCheckConfig, MlmPath, SweepFamily,
    TrainConfig,
};

/// Process exit statuses. Usage errors from argument parsing exit with 2.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const MISSING_FILE: u8 = 4;
    pub const DATA: u8 = 5;
    pub const CHECKPOINT: u8 = 6;
    pub const DIVERGENCE: u8 = 7;
    pub const GRADCHECK: u8 = 8;
    pub const NUMERIC: u8 = 9;
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => exit::CONFIG,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => exit::MISSING_FILE,
        Error::Io(_) => exit::OTHER,
        Error::Data(_) | Error::Input(_) | Error::Length { .. } => exit::DATA,
        Error::Checkpoint(_) | Error::Corrupt(_) => exit::CHECKPOINT,
        Error::Divergence { .. } => exit::DIVERGENCE,
        Error::GradCheck { .. } => exit::GRADCHECK,
        Error::Shape(_)
        | Error::DegenerateRow { .. }
        | Error::EmptyLoss
        | Error::NotScalar(_)
        | Error::Optimizer(_) => exit::NUMERIC,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Config(_) => "config",
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => "missing-file",
        Error::Io(_) => "io",
        Error::Data(_) => "data",
        Error::Input(_) => "input",
        Error::Length { .. } => "length",
        Error::Checkpoint(_) => "checkpoint",
        Error::Corrupt(_) => "corrupt",
        Error::Divergence { .. } => "divergence",
        Error::GradCheck { .. } => "gradcheck",
        Error::Shape(_) => "shape",
        Error::DegenerateRow { .. } => "degenerate-row",
        Error::EmptyLoss => "empty-loss",
        Error::NotScalar(_) => "not-scalar",
        Error::Optimizer(_) => "optimizer",
    }
}

/// The single stderr line printed for a failed command.
pub fn error_line(err: &Error) -> String {
    let message = serde_json::to_string(&err.to_string()).unwrap_or_else(|_| "\"?\"".into());
    format!(
        "error code={} kind={} message={message}",
        exit_code(err),
        error_kind(err)
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyName {
    /// Domain encoder alone.
    #[default]
    None,
    Single,
    Multi,
    Gated,
    ChunkGated,
    LogitsFusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum VariantName {
    MemoryAttention,
    CrossAttention,
    GateAttention,
}

impl From<VariantName> for Variant {
    fn from(v: VariantName) -> Self {
        match v {
            VariantName::MemoryAttention => Variant::MemoryAttention,
            VariantName::CrossAttention => Variant::CrossAttention,
            VariantName::GateAttention => Variant::GateAttention,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyName {
    Single,
    Gated,
    Chunk,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    #[default]
    Dapt,
    Tapt,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PathName {
    /// The full model, memory included.
    #[default]
    Model,
    /// The general encoder alone.
    General,
}

/// Encoder shape for freshly initialized models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Default 6.
    pub layers: usize,
    /// Default 32.
    pub d_model: usize,
    /// Default 2.
    pub heads: usize,
    /// Default 64.
    pub d_ff: usize,
    /// Default 32.
    pub max_seq_len: usize,
    /// Encoder dropout, default 0.
    pub dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let d = EncoderConfig::desk(0);
        ArchConfig {
            layers: d.num_layers,
            d_model: d.d_model,
            heads: d.num_heads,
            d_ff: d.d_ff,
            max_seq_len: d.max_seq_len,
            dropout: d.dropout,
        }
    }
}

impl ArchConfig {
    pub fn encoder(&self, vocab_size: usize) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            num_layers: self.layers,
            d_model: self.d_model,
            num_heads: self.heads,
            d_ff: self.d_ff,
            vocab_size,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Strategy and variant selection. Unset layer indices default to the last
/// domain layer (`dst`, `dst_high`), half the domain depth (`dst_low`) and
/// half the general depth (`split`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub strategy: StrategyName,
    pub dst: Option<usize>,
    pub split: Option<usize>,
    pub dst_low: Option<usize>,
    pub dst_high: Option<usize>,
    pub variant: Option<VariantName>,
}

impl FusionConfig {
    pub fn composition(&self, l_general: usize, l_domain: usize) -> Result<Composition> {
        let strategy = match self.strategy {
            StrategyName::None => return Ok(Composition::Bare),
            StrategyName::LogitsFusion => return Ok(Composition::LogitsFusion),
            StrategyName::Single => Strategy::SingleLayer {
                dst: self.dst.unwrap_or(l_domain),
            },
            StrategyName::Multi => Strategy::MultiLayer,
            StrategyName::Gated => Strategy::Gated {
                dst: self.dst.unwrap_or(l_domain),
            },
            StrategyName::ChunkGated => Strategy::ChunkGated {
                split: self.split.unwrap_or(l_general / 2),
                dst_low: self.dst_low.unwrap_or(l_domain / 2),
                dst_high: self.dst_high.unwrap_or(l_domain),
            },
        };
        let spec = FusionSpec::new(strategy).with_variant(self.variant.map(Variant::from).unwrap_or_default());
        spec.validate(l_general, l_domain)?;
        Ok(Composition::Gmap { fusion: spec })
    }

    /// The fusion spec a flag set asks for, if it names one.
    pub fn requested(&self, l_general: usize, l_domain: usize) -> Result<Option<FusionSpec>> {
        Ok(match self.composition(l_general, l_domain)? {
            Composition::Gmap { fusion } => Some(fusion),
            _ => None,
        })
    }
}

/// Synthetic data generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Documents per domain before the 70/30 split, default 2000.
    pub docs: usize,
    pub world: WorldConfig,
    pub task: TaskSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            docs: 2000,
            world: WorldConfig::default(),
            task: TaskSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Default `chunk`.
    pub family: FamilyName,
    /// Default `[0, 1, 2]`.
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            family: FamilyName::Chunk,
            seeds: vec![0, 1, 2],
        }
    }
}

/// Everything a command reads, loadable from TOML. Every field has a
/// default; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, must name the subcommand being run.
    pub command: Option<String>,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Directory holding `train.tsv`, `dev.tsv` and `test.tsv`.
    pub task: Option<PathBuf>,
    /// Input checkpoint (the backbone for compositions).
    pub model: Option<PathBuf>,
    /// General-encoder checkpoint for compositions.
    pub general: Option<PathBuf>,
    /// Output checkpoint, directory or table, depending on the command.
    pub out: Option<PathBuf>,
    /// Extra copy of the report.
    pub report: Option<PathBuf>,
    /// Number of classes, default: inferred from the task labels.
    pub num_classes: Option<usize>,
    /// Classification head layers, default 1.
    pub cls_layers: Option<usize>,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub data: DataConfig,
    pub sweep: SweepConfig,
    pub gradcheck: GradCheckConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(require(path)?)?)
    }
}

#[derive(Debug, Parser)]
#[command(name = "gmap", version, about = "Memory-augmented encoders on synthetic domains")]
pub struct Cli {
    /// TOML run config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the general/domA/domB corpora, the vocabulary and the task.
    GenData(GenDataArgs),
    /// MLM pretraining of a fresh encoder.
    Pretrain(RunArgs),
    /// Continued MLM training (DAPT, TAPT, or G-MAP with --general).
    Adapt(RunArgs),
    /// Classification fine-tuning with best-dev checkpoint selection.
    Finetune(RunArgs),
    /// MLM loss on a corpus or test metrics on a task.
    Eval(RunArgs),
    /// Layer-assignment sweep tables.
    Sweep(RunArgs),
    /// Finite-difference gradient check.
    Gradcheck(RunArgs),
    /// Parameter counts per component.
    Census(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Pretrain(_) => "pretrain",
            Command::Adapt(_) => "adapt",
            Command::Finetune(_) => "finetune",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Gradcheck(_) => "gradcheck",
            Command::Census(_) => "census",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Documents per domain before the 70/30 split.
    #[arg(long)]
    pub docs: Option<usize>,
    /// World seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub task_examples: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub signal: Option<f64>,
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub general: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,

    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,

    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub mask_prob: Option<f64>,
    /// Classification-head dropout.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Train the general encoder too.
    #[arg(long)]
    pub unfrozen: bool,

    #[arg(long, value_enum)]
    pub strategy: Option<StrategyName>,
    #[arg(long)]
    pub dst: Option<usize>,
    #[arg(long)]
    pub split: Option<usize>,
    #[arg(long)]
    pub dst_low: Option<usize>,
    #[arg(long)]
    pub dst_high: Option<usize>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantName>,

    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub cls_layers: Option<usize>,

    /// MLM loss instead of task metrics (eval).
    #[arg(long)]
    pub mlm: bool,
    /// Which encoder computes the MLM loss (eval).
    #[arg(long, value_enum)]
    pub path: Option<PathName>,
    /// DAPT or TAPT (adapt).
    #[arg(long, value_enum)]
    pub mode: Option<ModeName>,
    /// Sweep family.
    #[arg(long, value_enum)]
    pub family: Option<FamilyName>,
    /// Comma-separated sweep seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Relative-error tolerance (gradcheck).
    #[arg(long)]
    pub tolerance: Option<f64>,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

impl RunArgs {
    /// Folds the flags into `cfg`.
    pub fn apply(self, cfg: &mut RunConfig) -> RunExtras {
        set_opt(&mut cfg.corpus, self.corpus);
        set_opt(&mut cfg.vocab, self.vocab);
        set_opt(&mut cfg.task, self.task);
        set_opt(&mut cfg.model, self.model);
        set_opt(&mut cfg.general, self.general);
        set_opt(&mut cfg.out, self.out);
        set_opt(&mut cfg.report, self.report);
        set(&mut cfg.arch.layers, self.layers);
        set(&mut cfg.arch.d_model, self.d_model);
        set(&mut cfg.arch.heads, self.heads);
        set(&mut cfg.arch.d_ff, self.d_ff);
        set(&mut cfg.arch.max_seq_len, self.max_seq_len);
        set(&mut cfg.train.epochs, self.epochs);
        set(&mut cfg.train.batch_size, self.batch_size);
        set(&mut cfg.train.lr, self.lr);
        set(&mut cfg.train.seed, self.seed);
        set_opt(&mut cfg.train.max_steps, self.max_steps);
        set(&mut cfg.train.mask_prob, self.mask_prob);
        set(&mut cfg.train.dropout, self.dropout);
        if self.unfrozen {
            cfg.train.frozen = false;
        }
        let fusion_flagged = self.strategy.is_some()
            || self.dst.is_some()
            || self.split.is_some()
            || self.dst_low.is_some()
            || self.dst_high.is_some()
            || self.variant.is_some();
        set(&mut cfg.fusion.strategy, self.strategy);
        set_opt(&mut cfg.fusion.dst, self.dst);
        set_opt(&mut cfg.fusion.split, self.split);
        set_opt(&mut cfg.fusion.dst_low, self.dst_low);
        set_opt(&mut cfg.fusion.dst_high, self.dst_high);
        set_opt(&mut cfg.fusion.variant, self.variant);
        set_opt(&mut cfg.num_classes, self.num_classes);
        set_opt(&mut cfg.cls_layers, self.cls_layers);
        set(&mut cfg.sweep.family, self.family);
        set(&mut cfg.sweep.seeds, self.seeds);
        set(&mut cfg.gradcheck.tolerance, self.tolerance);
        RunExtras {
            mlm: self.mlm,
            path: self.path.unwrap_or_default(),
            mode: self.mode.unwrap_or_default(),
            fusion_flagged,
        }
    }
}

/// Per-invocation switches that have no config-file counterpart.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunExtras {
    pub mlm: bool,
    pub path: PathName,
    pub mode: ModeName,
    pub fusion_flagged: bool,
}

/// `Error::Io(NotFound)` unless `path` exists.
fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{}: no such file", path.display()),
        )))
    }
}

fn need<'a>(slot: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    let p = slot
        .as_deref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required")))?;
    require(p)
}

fn need_out(slot: &Option<PathBuf>) -> Result<&Path> {
    slot.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

/// Loads `train.tsv`, `dev.tsv` and `test.tsv` from a task directory.
pub fn load_task(dir: &Path, vocab: &Vocab, max_len: usize, num_classes: Option<usize>) -> Result<EncodedTask> {
    let read = |name: &str| read_task_file(require(&dir.join(name))?);
    let (train, dev, test) = (read("train.tsv")?, read("dev.tsv")?, read("test.tsv")?);
    let seen = train
        .iter()
        .chain(&dev)
        .chain(&test)
        .map(|e| e.label + 1)
        .max()
        .unwrap_or(0);
    let classes = num_classes.unwrap_or(seen);
    if seen > classes {
        return Err(Error::Data(format!("label {} outside {classes} classes", seen - 1)));
    }
    Ok(EncodedTask::from_examples(classes, &train, &dev, &test, vocab, max_len))
}

fn model_vocab(model: &GmapModel) -> Result<&Vocab> {
    model
        .vocab
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no vocabulary".into()))
}

fn emit(out: &mut dyn Write, report: Option<&Path>, lines: &[String]) -> Result<()> {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    out.write_all(text.as_bytes())?;
    if let Some(p) = report {
        fs::write(p, &text)?;
    }
    Ok(())
}

/// Builds a fresh model for the configured arch and strategy: random general
/// and backbone encoders of equal shape, plus a head when `num_classes` or
/// `with_head` asks for one.
fn fresh_model(cfg: &RunConfig, vocab_size: usize, with_head: bool) -> Result<(GmapModel, Option<GmapModel>)> {
    let enc = cfg.arch.encoder(vocab_size)?;
    let seed = cfg.train.seed;
    let general = GmapModel::bare(enc.clone(), seed)?;
    let backbone = GmapModel::bare(enc.clone(), seed.wrapping_add(1))?;
    let comp = cfg.fusion.composition(enc.num_layers, enc.num_layers)?;
    let head = HeadConfig::new(cfg.num_classes.unwrap_or(2), cfg.cls_layers.unwrap_or(1));
    let attach = |m: GmapModel| {
        if with_head {
            m.with_head(head.clone(), seed)
        } else {
            Ok(m)
        }
    };
    let model = match comp {
        Composition::Bare => attach(backbone)?,
        comp => attach(GmapModel::compose(&general, &backbone, comp, seed)?)?,
    };
    let bare = attach(GmapModel::bare(enc, seed.wrapping_add(1))?)?;
    Ok((model, Some(bare)))
}

fn cmd_gen_data(args: GenDataArgs, cfg: &mut RunConfig, out: &mut dyn Write) -> Result<()> {
    set_opt(&mut cfg.out, args.out);
    set(&mut cfg.data.docs, args.docs);
    set(&mut cfg.data.world.seed, args.seed);
    set(&mut cfg.data.task.num_examples, args.task_examples);
    set(&mut cfg.data.task.num_classes, args.num_classes);
    set(&mut cfg.data.task.signal, args.signal);
    let dir = need_out(&cfg.out)?;
    fs::create_dir_all(dir.join("task"))?;
    let world = SyntheticWorld::new(cfg.data.world.clone())?;
    world.vocab.save(&dir.join("vocab.txt"))?;
    let mut lines = vec![format!("vocab={}", world.vocab.len())];
    for spec in [&world.general, &world.dom_a, &world.dom_b] {
        let (train, test) = split_70_30(&gen_domain_corpus(spec, cfg.data.docs)?);
        write_corpus(&dir.join(format!("{}.train.txt", spec.name)), &train)?;
        write_corpus(&dir.join(format!("{}.test.txt", spec.name)), &test)?;
        lines.push(format!(
            "corpus={} train={} test={}",
            spec.name,
            train.len(),
            test.len()
        ));
    }
    let task = gen_classification_task(&world.general, &world.dom_a, &cfg.data.task)?;
    for (name, split) in [("train", &task.train), ("dev", &task.dev), ("test", &task.test)] {
        write_task_file(&dir.join("task").join(format!("{name}.tsv")), split)?;
        lines.push(format!("task={name} examples={}", split.len()));
    }
    emit(out, cfg.report.as_deref(), &lines)
}

fn cmd_pretrain(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let docs = read_corpus(need(&cfg.corpus, "corpus")?)?;
    let vocab = match &cfg.vocab {
        Some(p) => Vocab::load(require(p)?)?,
        None => build_vocab(&docs)?,
    };
    let target = need_out(&cfg.out)?;
    let enc = cfg.arch.encoder(vocab.len())?;
    let corpus = encode_corpus(&vocab, &docs, enc.max_seq_len);
    let mut model = GmapModel::bare(enc, cfg.train.seed)?.with_vocab(vocab)?;
    let losses = pretrain_mlm(&mut model, &corpus, &cfg.train)?;
    save_checkpoint(&model, target)?;
    let lines = vec![
        format!("steps={}", losses.len()),
        format!("final_loss={}", losses.last().copied().unwrap_or(f64::NAN)),
        format!("fingerprint={:016x}", model.fingerprint()),
        format!("checkpoint={}", target.display()),
    ];
    emit(out, cfg.report.as_deref(), &lines)
}

fn cmd_adapt(cfg: &RunConfig, extras: RunExtras, out: &mut dyn Write) -> Result<()> {
    let backbone = load_checkpoint(need(&cfg.model, "model")?)?;
    let target = need_out(&cfg.out)?;
    let vocab = model_vocab(&backbone)?.clone();
    let n = backbone.max_seq_len();
    let corpus = match extras.mode {
        ModeName::Dapt => encode_corpus(&vocab, &read_corpus(need(&cfg.corpus, "corpus")?)?, n),
        ModeName::Tapt => load_task(need(&cfg.task, "task")?, &vocab, n, cfg.num_classes)?.train_texts(),
    };
    let mut model = match cfg.fusion.strategy {
        StrategyName::None => backbone,
        _ => {
            let general = load_checkpoint(need(&cfg.general, "general")?)?;
            let l = backbone.config.domain.num_layers;
            let comp = cfg.fusion.composition(general.config.domain.num_layers, l)?;
            GmapModel::compose(&general, &backbone, comp, cfg.train.seed)?
        }
    };
    let mode = match extras.mode {
        ModeName::Dapt => AdaptMode::Dapt,
        ModeName::Tapt => AdaptMode::Tapt,
    };
    let losses = adapt(&mut model, &corpus, &cfg.train, mode)?;
    save_checkpoint(&model, target)?;
    let lines = vec![
        format!("steps={}", losses.len()),
        format!("final_loss={}", losses.last().copied().unwrap_or(f64::NAN)),
        format!("lineage={}", model.lineage.join("|")),
        format!("checkpoint={}", target.display()),
    ];
    emit(out, cfg.report.as_deref(), &lines)
}

fn cmd_finetune(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let backbone = load_checkpoint(need(&cfg.model, "model")?)?;
    let target = need_out(&cfg.out)?;
    let vocab = model_vocab(&backbone)?.clone();
    let task = load_task(
        need(&cfg.task, "task")?,
        &vocab,
        backbone.max_seq_len(),
        cfg.num_classes,
    )?;
    let seed = cfg.train.seed;
    let mut model = match cfg.fusion.strategy {
        StrategyName::None => backbone,
        _ => {
            let general = load_checkpoint(need(&cfg.general, "general")?)?;
            let l = backbone.config.domain.num_layers;
            let comp = cfg.fusion.composition(general.config.domain.num_layers, l)?;
            GmapModel::compose(&general, &backbone, comp, seed)?
        }
    };
    if model.config.head.is_none() {
        let mut head = HeadConfig::new(task.num_classes, cfg.cls_layers.unwrap_or(1));
        head.dropout = cfg.train.dropout;
        model = model.with_head(head, seed)?;
    }
    let report = finetune_classify(&mut model, &task, &cfg.train)?;
    save_checkpoint(&model, target)?;
    let mut lines: Vec<String> = report.to_kv().lines().map(String::from).collect();
    lines.push(format!("composition={}", describe(&model.config.composition)));
    lines.push(format!("checkpoint={}", target.display()));
    emit(out, cfg.report.as_deref(), &lines)
}

fn describe(c: &Composition) -> String {
    match c {
        Composition::Bare => "bare".into(),
        Composition::LogitsFusion => "logits-fusion".into(),
        Composition::Gmap { fusion } => fusion.to_string(),
    }
}

fn cmd_eval(cfg: &RunConfig, extras: RunExtras, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(need(&cfg.model, "model")?)?;
    let mut lines = Vec::new();
    if extras.fusion_flagged {
        let l = model.config.domain.num_layers;
        let lg = model.config.general.as_ref().map_or(l, |g| g.num_layers);
        let flag = cfg.fusion.requested(lg, l)?;
        let conflict = match flag {
            Some(f) => fusion_conflict(&model, Some(&f)),
            None => model.fusion().map(|h| crate::checkpoint::FlagConflict {
                flag: None,
                header: Some(*h),
            }),
        };
        if let Some(c) = conflict {
            writeln!(
                err,
                "warning kind=flag-conflict message={}",
                serde_json::to_string(&c.to_string()).unwrap_or_default()
            )?;
            lines.push("flag_conflict=true".to_string());
        }
    }
    let vocab = model_vocab(&model)?;
    let n = model.max_seq_len();
    if extras.mlm {
        let corpus = encode_corpus(vocab, &read_corpus(need(&cfg.corpus, "corpus")?)?, n);
        let path = match extras.path {
            PathName::Model => MlmPath::Model,
            PathName::General => MlmPath::General,
        };
        let loss = eval_mlm_loss(&model, &corpus, cfg.train.mask_prob, path)?;
        lines.push(format!("mlm_loss={loss}"));
        lines.push(format!("documents={}", corpus.len()));
    } else {
        let task = load_task(need(&cfg.task, "task")?, vocab, n, cfg.num_classes)?;
        let (accuracy, macro_f1, micro_f1) = evaluate_classifier(&model, &task.test)?;
        lines.push(format!("accuracy={accuracy}"));
        lines.push(format!("macro_f1={macro_f1}"));
        lines.push(format!("micro_f1={micro_f1}"));
    }
    lines.push(format!("fingerprint={:016x}", model.fingerprint()));
    emit(out, cfg.report.as_deref(), &lines)
}

fn cmd_sweep(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let general = load_checkpoint(need(&cfg.general, "general")?)?;
    let backbone = load_checkpoint(need(&cfg.model, "model")?)?;
    let vocab = model_vocab(&backbone)?;
    let task = load_task(need(&cfg.task, "task")?, vocab, backbone.max_seq_len(), cfg.num_classes)?;
    let family = match cfg.sweep.family {
        FamilyName::Single => SweepFamily::Single,
        FamilyName::Gated => SweepFamily::Gated,
        FamilyName::Chunk => SweepFamily::Chunk,
    };
    let specs = sweep_candidates(
        family,
        general.config.domain.num_layers,
        backbone.config.domain.num_layers,
    )?;
    let mut head = HeadConfig::new(task.num_classes, cfg.cls_layers.unwrap_or(1));
    head.dropout = cfg.train.dropout;
    let variant = cfg.fusion.variant.map(Variant::from).unwrap_or_default();
    let table = layer_sweep(
        &general,
        &backbone,
        &specs,
        variant,
        &head,
        &task,
        &cfg.train,
        &cfg.sweep.seeds,
    )?;
    if let Some(p) = &cfg.out {
        fs::write(p, table.to_csv())?;
    }
    let lines: Vec<String> = table.to_kv().lines().map(String::from).collect();
    emit(out, cfg.report.as_deref(), &lines)
}

/// A deterministic check batch: a few short sequences over `vocab_size`.
fn check_batches(model: &GmapModel, seed: u64, classes: usize) -> Result<Vec<CheckBatch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = model.config.domain.vocab_size;
    let n = model.max_seq_len().min(7);
    let seqs: Vec<Vec<usize>> = (0..2)
        .map(|i| {
            let mut ids = vec![crate::data::special::CLS];
            ids.extend(
                (0..n - 2).map(|j| crate::data::special::COUNT + (i * 7 + j * 3) % (v - crate::data::special::COUNT)),
            );
            ids.push(crate::data::special::SEP);
            ids
        })
        .collect();
    let pad: Vec<Vec<bool>> = seqs.iter().map(|s| vec![true; s.len()]).collect();
    let mlm = mask_tokens(&seqs, &pad, 1.0, MaskMode::ForceMask, v, &mut rng)?;
    let mut out = vec![CheckBatch::Mlm(mlm)];
    if model.config.head.is_some() {
        let labelled = seqs
            .into_iter()
            .enumerate()
            .map(|(i, s)| (Sequence::new(s), i % classes))
            .collect();
        out.push(CheckBatch::Classify(labelled));
    }
    Ok(out)
}

fn cmd_gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let model = match &cfg.model {
        Some(p) => load_checkpoint(require(p)?)?,
        None => fresh_model(cfg, 16, true)?.0,
    };
    let classes = model.config.head.as_ref().map_or(2, |h| h.num_classes);
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for batch in check_batches(&model, cfg.gradcheck.seed, classes)? {
        let kind = match batch {
            CheckBatch::Mlm(_) => "mlm",
            CheckBatch::Classify(_) => "classify",
        };
        let report = grad_check_report(&model, &batch, &cfg.gradcheck)?;
        worst = worst.max(report.max_rel_err());
        let groups = report.groups.len();
        lines.push(format!(
            "loss={kind} tensors={groups} max_rel_err={:e}",
            report.max_rel_err()
        ));
        if let Err(e) = report.ensure(cfg.gradcheck.tolerance) {
            emit(out, cfg.report.as_deref(), &lines)?;
            return Err(e);
        }
    }
    lines.push(format!("max_rel_err={worst:e}"));
    lines.push(format!("tolerance={:e}", cfg.gradcheck.tolerance));
    lines.push("status=pass".into());
    emit(out, cfg.report.as_deref(), &lines)
}

fn cmd_census(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (model, bare) = match &cfg.model {
        Some(p) => (load_checkpoint(require(p)?)?, None),
        None => fresh_model(cfg, 16, cfg.num_classes.is_some())?,
    };
    let mut lines: Vec<String> = param_census(&model)
        .into_iter()
        .map(|r| {
            format!(
                "component={} trainable={} frozen={}",
                r.component, r.trainable, r.frozen
            )
        })
        .collect();
    let fusion_rows: usize = model
        .store
        .iter()
        .filter(|(n, p)| !p.frozen && (n.contains(".fusion.") || n.contains(".xattn.") || n.contains(".gattn.")))
        .map(|(_, p)| p.tensor.numel())
        .sum();
    let added = match bare {
        Some(b) => model.store.trainable_count() as i64 - b.store.trainable_count() as i64,
        None => fusion_rows as i64,
    };
    lines.push(format!("composition={}", describe(&model.config.composition)));
    lines.push(format!("{added:+} trainable"));
    emit(out, cfg.report.as_deref(), &lines)
}

/// Runs one parsed invocation. Reports go to `out`, warnings to `err`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(c) = &cfg.command {
        if c != cli.command.name() {
            return Err(Error::Config(format!(
                "config is for `{c}`, invoked `{}`",
                cli.command.name()
            )));
        }
    }
    let name = cli.command.name();
    let args = match cli.command {
        Command::GenData(a) => return cmd_gen_data(a, &mut cfg, out),
        Command::Pretrain(a)
        | Command::Adapt(a)
        | Command::Finetune(a)
        | Command::Eval(a)
        | Command::Sweep(a)
        | Command::Gradcheck(a)
        | Command::Census(a) => a,
    };
    let extras = args.apply(&mut cfg);
    cfg.train.validate()?;
    match name {
        "pretrain" => cmd_pretrain(&cfg, out),
        "adapt" => cmd_adapt(&cfg, extras, out),
        "finetune" => cmd_finetune(&cfg, out),
        "eval" => cmd_eval(&cfg, extras, out, err),
        "sweep" => cmd_sweep(&cfg, out),
        "gradcheck" => cmd_gradcheck(&cfg, out),
        _ => cmd_census(&cfg, out),
    }
}

/// Parses `args`, runs, and maps the outcome to an exit status.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr().lock());
    match run(cli, &mut out, &mut err) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
