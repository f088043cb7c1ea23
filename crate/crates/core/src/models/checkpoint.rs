//! Binary checkpoint container.
//!
//! ```text
//! magic      8 bytes   "OCRRSTR\0"
//! version    u32 LE
//! header     u64 LE length, then canonical (key-sorted) JSON
//! blocks     u32 LE count, then per block:
//!              u32 LE name length, name (UTF-8),
//!              u32 LE rank, rank x u64 LE dims,
//!              f32 LE values
//! digest     u64 LE FNV-1a of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use ocrrestore_neural::{ParamStore, Tensor};
use serde_json::{json, Value};

use super::{Manifest, ModelKind, Network, Seq2SeqModel};
use crate::embedding::EmbeddingModel;
use crate::encoding::CharVocab;
use crate::error::{Error, Result};
use crate::rng;

pub const MAGIC: &[u8; 8] = b"OCRRSTR\0";
pub const VERSION: u32 = 1;
const EMBEDDING_KIND: &str = "sgns_embedding";

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Value,
    pub blocks: Vec<Block>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("json values serialize");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
            for &d in &b.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = rng::digest(&out);
        out.extend_from_slice(&digest.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        if bytes.len() < MAGIC.len() + 4 + 8 {
            return Err(corrupt("truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if rng::digest(body) != stored {
            return Err(corrupt("digest mismatch"));
        }
        let mut r = Reader {
            bytes: body,
            pos: r.pos,
        };
        let header_len = r.u64()? as usize;
        let header: Value = serde_json::from_slice(r.take(header_len)?).map_err(|e| corrupt(&e.to_string()))?;
        let count = r.u32()? as usize;
        let mut blocks = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("block name"))?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(corrupt("block rank"));
            }
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| corrupt("block size"))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            blocks.push(Block { name, dims, data });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { header, blocks })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn header_kind(header: &Value) -> Result<&str> {
    header
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::CorruptCheckpoint("header lacks a kind".into()))
}

pub fn model_to_bytes(model: &Seq2SeqModel) -> Vec<u8> {
    let header = json!({
        "kind": model.kind().name(),
        "config": model.network().config_json(),
        "vocab": model.vocab().symbols(),
        "manifest": serde_json::to_value(model.manifest()).expect("manifest serializes"),
    });
    let blocks = model
        .store()
        .iter()
        .map(|(_, p)| Block {
            name: p.name.clone(),
            dims: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
        .collect();
    Container { header, blocks }.to_bytes()
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Seq2SeqModel> {
    let c = Container::from_bytes(bytes)?;
    let corrupt = |m: String| Error::CorruptCheckpoint(m);
    let kind = match header_kind(&c.header)? {
        "gru_generator" => ModelKind::GruGenerator,
        "transformer_corrector" => ModelKind::TransformerCorrector,
        other => {
            return Err(Error::KindMismatch {
                expected: "a sequence model".into(),
                found: other.into(),
            })
        }
    };
    let vocab = CharVocab::standard();
    let symbols: Vec<String> = serde_json::from_value(c.header["vocab"].clone()).map_err(|e| corrupt(e.to_string()))?;
    if symbols != vocab.symbols() {
        return Err(corrupt("character vocabulary differs from the built-in one".into()));
    }
    let manifest: Manifest =
        serde_json::from_value(c.header["manifest"].clone()).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let mut store = ParamStore::<f32>::new();
    let network = Network::build(kind, &c.header["config"], vocab.len(), &mut store)?;
    if store.len() != c.blocks.len() {
        return Err(corrupt(format!(
            "{} blocks for {} parameters",
            c.blocks.len(),
            store.len()
        )));
    }
    for b in c.blocks {
        let id = store
            .id(&b.name)
            .ok_or_else(|| corrupt(format!("unknown block {}", b.name)))?;
        if store.value(id).shape() != b.dims.as_slice() {
            return Err(corrupt(format!("block {} has shape {:?}", b.name, b.dims)));
        }
        store.set_value(id, Tensor::new(&b.dims, b.data)?)?;
    }
    Ok(Seq2SeqModel::from_parts(network, store, vocab, manifest))
}

pub fn save_checkpoint(model: &Seq2SeqModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Seq2SeqModel> {
    model_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint and insists on its kind.
pub fn load_checkpoint_of(path: &Path, kind: ModelKind) -> Result<Seq2SeqModel> {
    let m = load_checkpoint(path)?;
    m.expect_kind(kind)?;
    Ok(m)
}

pub fn embedding_to_bytes(model: &EmbeddingModel) -> Vec<u8> {
    let header = json!({
        "kind": EMBEDDING_KIND,
        "config": { "dim": model.dim() },
        "words": model.words(),
        "counts": model.counts(),
        "loss_history": model.loss_history,
    });
    let blocks = vec![Block {
        name: "vectors".into(),
        dims: vec![model.words().len(), model.dim()],
        data: model.vectors().to_vec(),
    }];
    Container { header, blocks }.to_bytes()
}

pub fn embedding_from_bytes(bytes: &[u8]) -> Result<EmbeddingModel> {
    let c = Container::from_bytes(bytes)?;
    let kind = header_kind(&c.header)?;
    if kind != EMBEDDING_KIND {
        return Err(Error::KindMismatch {
            expected: EMBEDDING_KIND.into(),
            found: kind.into(),
        });
    }
    let corrupt = |e: serde_json::Error| Error::CorruptCheckpoint(e.to_string());
    let words: Vec<String> = serde_json::from_value(c.header["words"].clone()).map_err(corrupt)?;
    let counts: Vec<u64> = serde_json::from_value(c.header["counts"].clone()).map_err(corrupt)?;
    let loss_history: Vec<f64> = serde_json::from_value(c.header["loss_history"].clone()).map_err(corrupt)?;
    let dim = c.header["config"]["dim"]
        .as_u64()
        .ok_or_else(|| Error::CorruptCheckpoint("embedding dim".into()))? as usize;
    let [block] =
        <[Block; 1]>::try_from(c.blocks).map_err(|_| Error::CorruptCheckpoint("expected one block".into()))?;
    if block.dims != [words.len(), dim] {
        return Err(Error::CorruptCheckpoint(format!("vectors have shape {:?}", block.dims)));
    }
    let mut m = EmbeddingModel::from_parts(words, counts, dim, block.data)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    m.loss_history = loss_history;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_gru, build_transformer, GruConfig, TransformerConfig};

    fn tiny() -> Seq2SeqModel {
        let cfg = TransformerConfig {
            d_model: 8,
            d_ff: 16,
            heads: 2,
            layers: 1,
            max_positions: 40,
            ..TransformerConfig::default()
        };
        let mut m = build_transformer(&cfg, CharVocab::standard()).unwrap();
        m.manifest_mut().loss_history = vec![1.5, 0.1 + 0.2];
        m
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = tiny();
        let a = model_to_bytes(&m);
        let back = model_from_bytes(&a).unwrap();
        assert_eq!(back.manifest(), m.manifest());
        assert_eq!(model_to_bytes(&back), a);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let a = model_to_bytes(&tiny());
        assert!(matches!(
            model_from_bytes(&a[..a.len() / 2]),
            Err(Error::CorruptCheckpoint(_))
        ));
        let mut flipped = a.clone();
        flipped[40] ^= 1;
        assert!(matches!(model_from_bytes(&flipped), Err(Error::CorruptCheckpoint(_))));
        let mut magic = a.clone();
        magic[0] = b'X';
        assert!(matches!(model_from_bytes(&magic), Err(Error::CorruptCheckpoint(_))));
        let mut version = a;
        version[8] = 9;
        assert!(matches!(model_from_bytes(&version), Err(Error::VersionUnsupported(9))));
    }

    #[test]
    fn wrong_kind_is_reported() {
        let cfg = GruConfig {
            embed_dim: 4,
            hidden_dim: 4,
            ..GruConfig::default()
        };
        let g = build_gru(&cfg, CharVocab::standard()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.ckpt");
        save_checkpoint(&g, &p).unwrap();
        assert!(matches!(
            load_checkpoint_of(&p, ModelKind::TransformerCorrector),
            Err(Error::KindMismatch { .. })
        ));
        assert!(embedding_from_bytes(&fs::read(&p).unwrap()).is_err());
    }
}
