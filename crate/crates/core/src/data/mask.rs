use rand::Rng;

use super::special;
use crate::error::{Error, Result};
use crate::graph::Target;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskMode {
    /// 80% MASK, 10% random content token, 10% unchanged.
    #[default]
    Standard,
    /// Every selected position becomes MASK.
    ForceMask,
}

/// Corrupted inputs with labels at the selected positions only.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub inputs: Vec<Vec<usize>>,
    pub labels: Vec<Vec<Target>>,
    pub pad: Vec<Vec<bool>>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.labels
            .iter()
            .flatten()
            .filter(|t| matches!(t, Target::Class(_)))
            .count()
    }
}

/// Selects each non-special, non-pad position with probability `mask_prob`.
pub fn mask_tokens<R: Rng>(
    ids: &[Vec<usize>],
    pad: &[Vec<bool>],
    mask_prob: f64,
    mode: MaskMode,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedBatch> {
    if ids.len() != pad.len() {
        return Err(Error::shape(format!(
            "{} sequences with {} pad masks",
            ids.len(),
            pad.len()
        )));
    }
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::config(format!("mask_prob {mask_prob} outside [0, 1]")));
    }
    if vocab_size <= special::COUNT {
        return Err(Error::config("vocabulary has no content tokens"));
    }
    let mut batch = MaskedBatch {
        inputs: Vec::with_capacity(ids.len()),
        labels: Vec::with_capacity(ids.len()),
        pad: pad.to_vec(),
    };
    for (seq, keep) in ids.iter().zip(pad) {
        if seq.len() != keep.len() {
            return Err(Error::shape(format!(
                "sequence of {} with pad mask of {}",
                seq.len(),
                keep.len()
            )));
        }
        let mut input = seq.clone();
        let mut labels = vec![Target::Ignore; seq.len()];
        for (t, (&id, &real)) in seq.iter().zip(keep).enumerate() {
            if !real || special::is_special(id) || rng.gen::<f64>() >= mask_prob {
                continue;
            }
            labels[t] = Target::Class(id);
            input[t] = match mode {
                MaskMode::ForceMask => special::MASK,
                MaskMode::Standard => {
                    let r: f64 = rng.gen();
                    if r < 0.8 {
                        special::MASK
                    } else if r < 0.9 {
                        rng.gen_range(special::COUNT..vocab_size)
                    } else {
                        id
                    }
                }
            };
        }
        batch.inputs.push(input);
        batch.labels.push(labels);
    }
    Ok(batch)
}
