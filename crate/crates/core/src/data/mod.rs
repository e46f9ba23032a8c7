//! Vocabulary, synthetic Markov-chain corpora, MLM corruption and the planted
//! classification task.

mod corpus;
mod mask;
mod task;
mod vocab;

pub use corpus::{gen_domain_corpus, split_70_30, DomainSpec, SyntheticWorld, WorldConfig};
pub use mask::{mask_tokens, MaskMode, MaskedBatch};
pub use task::{gen_classification_task, read_task_file, write_task_file, Marker, TaskExample, TaskSpec, TaskSplits};
pub use vocab::{build_vocab, Vocab};

/// Reserved token ids.
pub mod special {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const CLS: usize = 2;
    pub const SEP: usize = 3;
    pub const MASK: usize = 4;
    pub const COUNT: usize = 5;
    pub const NAMES: [&str; COUNT] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

    pub fn is_special(id: usize) -> bool {
        id < COUNT
    }
}

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Reads a corpus file: one document per line, blank lines skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_corpus(path: &Path, docs: &[String]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for d in docs {
        writeln!(f, "{d}")?;
    }
    Ok(())
}
