//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (format version, model config, vocabulary size and hash, tensor shapes),
//! then every tensor's values as little-endian `f64` in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::Mat;
use super::network::Layout;
use super::{InfillModel, ModelConfig};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"QXCKPT\0\x01";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    vocab_size: usize,
    vocab_hash: String,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

impl InfillModel {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            vocab_size: self.vocab.size(),
            vocab_hash: self.vocab.hash(),
            tensors: self
                .layout
                .specs
                .iter()
                .map(|s| TensorHeader {
                    name: s.name.clone(),
                    rows: s.rows,
                    cols: s.cols,
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + self.num_parameters() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            for v in p.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Restores a model; fails if `vocab` is not the vocabulary it was
    /// trained with.
    pub fn from_checkpoint_bytes(bytes: &[u8], vocab: Vocabulary) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_owned());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        if header.vocab_size != vocab.size() || header.vocab_hash != vocab.hash() {
            return Err(bad("vocabulary hash mismatch"));
        }
        header.config.validate()?;
        let layout = Layout::new(&header.config, vocab.size());
        if layout.specs.len() != header.tensors.len()
            || layout
                .specs
                .iter()
                .zip(&header.tensors)
                .any(|(s, t)| s.name != t.name || s.rows != t.rows || s.cols != t.cols)
        {
            return Err(bad("tensor layout does not match the model config"));
        }
        let total: usize = layout.specs.iter().map(|s| s.rows * s.cols).sum();
        let body = &bytes[body_start..];
        if body.len() != total * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                total * 8,
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let params = layout
            .specs
            .iter()
            .map(|s| Mat::from_shape_simple_fn((s.rows, s.cols), || values.next().expect("length checked")))
            .collect();
        Ok(Self {
            config: header.config,
            vocab,
            layout,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path, vocab: Vocabulary) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?, vocab)
    }
}
