//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"GMAPCKPT"
//! version  u32
//! header   u64 length + UTF-8 JSON (model config, vocab, lineage)
//! count    u64
//! tensor*  u32 name length, name, u8 frozen, u32 rank, u64 dims…, f64 values…
//! trailer  SHA-256 of every preceding byte
//! ```
//!
//! Tensors are written in lexicographic name order, so equal models give
//! equal files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::fusion::FusionSpec;
use crate::model::{GmapModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GMAPCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    /// Full token list in id order, specials included.
    vocab: Option<Vec<String>>,
    lineage: Vec<String>,
}

pub fn to_bytes(model: &GmapModel) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        vocab: model.vocab.as_ref().map(|v| v.tokens().to_vec()),
        lineage: model.lineage.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for (name, param) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(param.frozen as u8);
        let shape = param.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in param.tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Corrupt(format!("length {v} out of range")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<GmapModel> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let header_len = r.len()?;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    let count = r.len()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Corrupt(format!("frozen flag {b} for {name}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= body.len()))
            .ok_or_else(|| Error::Corrupt(format!("shape {shape:?} of {name}")))?;
        let raw = r.take(numel * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store
            .insert(name, Tensor::new(shape, values)?, frozen)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    header.config.domain.validate()?;
    let vocab = header
        .vocab
        .map(|t| Vocab::from_lines(t.iter().map(String::as_str)))
        .transpose()?;
    Ok(GmapModel {
        config: header.config,
        store,
        vocab,
        lineage: header.lineage,
    })
}

pub fn save_checkpoint(model: &GmapModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<GmapModel> {
    from_bytes(&fs::read(path)?)
}

/// A command-line fusion flag that disagrees with a checkpoint header. The
/// header wins.
#[derive(Clone, Debug, PartialEq)]
pub struct FlagConflict {
    pub flag: Option<FusionSpec>,
    pub header: Option<FusionSpec>,
}

impl std::fmt::Display for FlagConflict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |s: &Option<FusionSpec>| s.map_or("none".to_string(), |s| s.to_string());
        write!(
            f,
            "fusion flag {} ignored, checkpoint header says {}",
            show(&self.flag),
            show(&self.header)
        )
    }
}

pub fn fusion_conflict(model: &GmapModel, flag: Option<&FusionSpec>) -> Option<FlagConflict> {
    let flag = flag.copied()?;
    let header = model.fusion().copied();
    (header != Some(flag)).then_some(FlagConflict {
        flag: Some(flag),
        header,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, HeadConfig};
    use crate::fusion::Strategy;
    use crate::model::Composition;

    fn tiny() -> GmapModel {
        let cfg = EncoderConfig {
            num_layers: 2,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 8,
            dropout: 0.1,
        };
        let g = GmapModel::bare(cfg, 3).unwrap();
        let spec = FusionSpec::new(Strategy::Gated { dst: 2 });
        GmapModel::compose(&g, &g, Composition::Gmap { fusion: spec }, 4)
            .unwrap()
            .with_head(HeadConfig::new(3, 2), 5)
            .unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let m = tiny();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.store, m.store);
        assert_eq!(back.lineage, m.lineage);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn payload_flip_is_detected() {
        let mut bytes = to_bytes(&tiny()).unwrap();
        let i = bytes.len() - DIGEST_LEN - 3;
        bytes[i] ^= 0x10;
        assert!(matches!(from_bytes(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn other_version_is_rejected() {
        let mut bytes = to_bytes(&tiny()).unwrap();
        bytes[8] = 9;
        let err = from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = to_bytes(&tiny()).unwrap();
        assert!(from_bytes(&bytes[..20]).is_err());
        assert!(from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn conflicting_flag_is_reported() {
        let m = tiny();
        let same = FusionSpec::new(Strategy::Gated { dst: 2 });
        let other = FusionSpec::new(Strategy::MultiLayer);
        assert_eq!(fusion_conflict(&m, Some(&same)), None);
        assert_eq!(fusion_conflict(&m, None), None);
        let c = fusion_conflict(&m, Some(&other)).unwrap();
        assert_eq!(c.header, Some(same));
        assert!(c.to_string().contains("multi-layer"));
    }
}
