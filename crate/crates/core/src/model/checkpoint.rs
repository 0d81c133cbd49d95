//! Checkpoint file format: magic bytes, a format version, a length-prefixed
//! UTF-8 metadata block (config, vocabulary, relation order), then the named
//! tensors in declaration order as little-endian f64 with length-prefixed
//! names and shapes. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::{Vocabulary, VocabularyData};
use crate::error::{Error, Result};
use crate::knowledge::Relation;

use super::{ModelConfig, ModelParams, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKS";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    vocab: VocabularyData,
    relation_order: Vec<String>,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Schema("checkpoint truncated".to_string()));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(params: &ModelParams, vocab: &Vocabulary, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        config: params.config.clone(),
        vocab: vocab.to_data(),
        relation_order: Relation::ALL.iter().map(|r| r.name().to_string()).collect(),
    };
    let meta_text = serde_json::to_string(&meta).map_err(|e| Error::Io(e.to_string()))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    push_u32(&mut buf, meta_text.len() as u32);
    buf.extend_from_slice(meta_text.as_bytes());
    push_u32(&mut buf, params.store.len() as u32);
    for id in params.store.ids() {
        let name = params.store.name(id);
        let tensor = params.store.get(id);
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, tensor.shape().len() as u32);
        for &dim in tensor.shape() {
            push_u64(&mut buf, dim as u64);
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)
        .map_err(|e| Error::Io(format!("cannot write checkpoint {}: {e}", path.display())))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Vocabulary)> {
    let data = fs::read(path)
        .map_err(|e| Error::Io(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let mut r = Reader { data: &data, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Schema("bad checkpoint magic".to_string()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta_text = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|_| Error::Schema("metadata is not UTF-8".to_string()))?;
    let meta: CheckpointMeta =
        serde_json::from_str(meta_text).map_err(|e| Error::Schema(format!("metadata: {e}")))?;

    let expected_order: Vec<String> = Relation::ALL.iter().map(|r| r.name().to_string()).collect();
    if meta.relation_order != expected_order {
        return Err(Error::Schema(format!(
            "unexpected relation order {:?}",
            meta.relation_order
        )));
    }

    let vocab = Vocabulary::from_data(meta.vocab)?;
    if vocab.size() != meta.config.vocab_size {
        return Err(Error::Schema(format!(
            "vocabulary of {} tokens vs configured {}",
            vocab.size(),
            meta.config.vocab_size
        )));
    }
    if vocab.num_emotions() != meta.config.num_emotions {
        return Err(Error::Schema(format!(
            "{} emotion labels vs configured {}",
            vocab.num_emotions(),
            meta.config.num_emotions
        )));
    }

    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Schema("tensor name is not UTF-8".to_string()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            let bytes: [u8; 8] = r.take(8)?.try_into().expect("8 bytes");
            values.push(f64::from_le_bytes(bytes));
        }
        let tensor = Tensor::new(shape, values)
            .map_err(|e| Error::Schema(format!("tensor {name}: {e}")))?;
        store.add(name, tensor);
    }
    if r.pos != data.len() {
        return Err(Error::Schema("trailing bytes after tensor section".to_string()));
    }
    let params = ModelParams::from_store(meta.config, store)
        .map_err(|e| Error::Schema(e.to_string()))?;
    Ok((params, vocab))
}
