// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary container: magic, format version, JSON manifest, then named
//! little-endian `f32` tensor sections.
//!
//! Layout: `MAGIC` (8 bytes) | version `u32` LE | manifest length `u64` LE |
//! manifest JSON | blob. Section offsets are relative to the blob start.

use std::path::Path;

use desksteer::debias::{DebiasBlocks, DebiasLoraBlock, DebiasMode, DomainProbe, EpochLog};
use desksteer::model::{ModelConfig, TinyLm, TrainLog};
use desksteer::steering::{ExtractionMethod, SteeringRepresentation};
use desksteer::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::bytes_hash;
use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"DSKSTEER";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub meta: serde_json::Value,
    pub sections: Vec<SectionEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn corrupt(section: &str, what: impl std::fmt::Display) -> HarnessError {
    HarnessError::data(format!("corrupt checkpoint section `{section}`: {what}"))
}

impl Checkpoint {
    pub fn new(kind: &str, meta: impl Serialize) -> Result<Self> {
        Ok(Self {
            kind: kind.to_string(),
            meta: serde_json::to_value(meta)?,
            tensors: Vec::new(),
        })
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| corrupt(name, "missing"))
    }

    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone()).map_err(|e| corrupt("manifest", e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        let mut sections = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let start = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            sections.push(SectionEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: start as u64,
                len: (blob.len() - start) as u64,
                sha256: bytes_hash(&blob[start..]),
            });
        }
        let manifest = Manifest {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            sections,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("header", "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt("header", format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let mend = usize::try_from(mlen)
            .ok()
            .and_then(|m| m.checked_add(20))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header", "manifest length past end of file"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..mend]).map_err(|e| corrupt("manifest", e))?;
        let blob = &bytes[mend..];
        let mut cursor = 0u64;
        for s in &manifest.sections {
            if s.offset != cursor {
                return Err(corrupt(&s.name, format!("offset {} but expected {cursor}", s.offset)));
            }
            cursor = cursor
                .checked_add(s.len)
                .ok_or_else(|| corrupt(&s.name, "length overflow"))?;
        }
        if cursor != blob.len() as u64 {
            return Err(corrupt(
                "content table",
                format!("sections cover {cursor} bytes but the blob has {}", blob.len()),
            ));
        }
        let mut tensors = Vec::with_capacity(manifest.sections.len());
        for s in &manifest.sections {
            let raw = &blob[s.offset as usize..(s.offset + s.len) as usize];
            let numel: usize = s.shape.iter().product();
            if raw.len() != 4 * numel {
                return Err(corrupt(&s.name, format!("{} bytes for shape {:?}", raw.len(), s.shape)));
            }
            if bytes_hash(raw) != s.sha256 {
                return Err(corrupt(&s.name, "checksum mismatch"));
            }
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(s.shape.clone(), data).map_err(|e| corrupt(&s.name, e))?;
            tensors.push((s.name.clone(), t));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(corrupt(
                "manifest",
                format!("kind `{}` where `{kind}` was expected", self.kind),
            ));
        }
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| HarnessError::data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes through a sibling temporary file so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub train_log: Option<TrainLog>,
}

pub fn model_to_checkpoint(model: &TinyLm, train_log: Option<&TrainLog>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(
        "model",
        ModelMeta {
            config: model.config().clone(),
            train_log: train_log.cloned(),
        },
    )?;
    for (name, p) in model.param_names().iter().zip(model.params()) {
        ck.push(name.clone(), (**p).clone());
    }
    Ok(ck)
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(TinyLm, ModelMeta)> {
    let meta: ModelMeta = ck.meta_as()?;
    let model = TinyLm::from_params(meta.config.clone(), ck.tensors.clone())?;
    Ok((model, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasMeta {
    pub layers: Vec<usize>,
    pub mode: DebiasMode,
    pub log: Vec<EpochLog>,
}

pub fn debias_to_checkpoint(blocks: &DebiasBlocks, probe: &DomainProbe, log: &[EpochLog]) -> Result<Checkpoint> {
    let mode = blocks
        .blocks
        .first()
        .map(|b| b.mode)
        .ok_or_else(|| HarnessError::data("no debias blocks to save"))?;
    let mut ck = Checkpoint::new(
        "debias",
        DebiasMeta {
            layers: blocks.layers(),
            mode,
            log: log.to_vec(),
        },
    )?;
    for b in &blocks.blocks {
        ck.push(format!("block.{}.a", b.layer), b.a.clone());
        ck.push(format!("block.{}.b", b.layer), b.b.clone());
    }
    ck.push("probe.w1", probe.w1.clone());
    ck.push("probe.b1", probe.b1.clone());
    ck.push("probe.w2", probe.w2.clone());
    ck.push("probe.b2", probe.b2.clone());
    ck.push("probe.shift", probe.shift.clone());
    ck.push("probe.scale", probe.scale.clone());
    Ok(ck)
}

pub fn debias_from_checkpoint(ck: &Checkpoint) -> Result<(DebiasBlocks, DomainProbe, DebiasMeta)> {
    let meta: DebiasMeta = ck.meta_as()?;
    let blocks = meta
        .layers
        .iter()
        .map(|&l| {
            let a = ck.tensor(&format!("block.{l}.a"))?.clone();
            let b = ck.tensor(&format!("block.{l}.b"))?.clone();
            DebiasLoraBlock::from_parts(l, meta.mode, a, b).map_err(HarnessError::from)
        })
        .collect::<Result<Vec<_>>>()?;
    let probe = DomainProbe {
        w1: ck.tensor("probe.w1")?.clone(),
        b1: ck.tensor("probe.b1")?.clone(),
        w2: ck.tensor("probe.w2")?.clone(),
        b2: ck.tensor("probe.b2")?.clone(),
        shift: ck.tensor("probe.shift")?.clone(),
        scale: ck.tensor("probe.scale")?.clone(),
    };
    Ok((DebiasBlocks { blocks }, probe, meta))
}

/// Header of a standalone steering file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringMeta {
    pub layers: Vec<usize>,
    pub k: usize,
    pub d: usize,
    pub n_samples: usize,
    pub method: ExtractionMethod,
    pub model_hash: String,
}

pub fn steering_to_checkpoint(rep: &SteeringRepresentation, model_hash: &str) -> Result<Checkpoint> {
    rep.validate()?;
    let mut ck = Checkpoint::new(
        "steering",
        SteeringMeta {
            layers: rep.layers.clone(),
            k: rep.k(),
            d: rep.dim(),
            n_samples: rep.n_samples,
            method: rep.method,
            model_hash: model_hash.to_string(),
        },
    )?;
    let data: Vec<f32> = rep.vectors.iter().flatten().copied().collect();
    ck.push("delta", Tensor::new(vec![rep.k(), rep.dim()], data)?);
    Ok(ck)
}

pub fn steering_from_checkpoint(ck: &Checkpoint) -> Result<(SteeringRepresentation, SteeringMeta)> {
    let meta: SteeringMeta = ck.meta_as()?;
    let t = ck.tensor("delta")?;
    if t.shape() != [meta.k, meta.d] || meta.layers.len() != meta.k {
        return Err(corrupt(
            "delta",
            format!("shape {:?} disagrees with the header", t.shape()),
        ));
    }
    let rep = SteeringRepresentation {
        layers: meta.layers.clone(),
        vectors: (0..meta.k).map(|i| t.row(i).to_vec()).collect(),
        n_samples: meta.n_samples,
        method: meta.method,
    };
    rep.validate()?;
    Ok((rep, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("test", serde_json::json!({"lr": 0.1f32, "name": "x"})).unwrap();
        ck.push("a", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-7]).unwrap());
        ck.push("b", Tensor::new(vec![3], vec![0.0, 7.0, -0.0]).unwrap());
        ck
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.tensor("a").unwrap(), sample().tensor("a").unwrap());
    }

    #[test]
    fn corruption_names_the_section() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        let e = Checkpoint::from_bytes(&flipped).unwrap_err();
        assert!(e.message.contains("`b`"), "{e}");
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).unwrap_err().message.contains("`header`"));
        let truncated = &bytes[..bytes.len() - 4];
        assert!(Checkpoint::from_bytes(truncated)
            .unwrap_err()
            .message
            .contains("`content table`"));
    }
}
