//! `PSDT` checkpoint container.
//!
//! Layout: the magic bytes `PSDT`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the UTF-8 JSON header, then the raw
//! little-endian `f32` payload. The header maps each tensor name to its dtype,
//! shape and byte offset into the payload and also carries the run config, the
//! RNG state and free-form metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"PSDT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    /// 32-byte key, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::InvalidArgument("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: BTreeMap<String, TensorEntry>,
    config: Value,
    rng: Option<RngState>,
    meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub config: Value,
    pub rng: Option<RngState>,
    pub meta: Value,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
            config: Value::Null,
            rng: None,
            meta: Value::Null,
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.insert(
                name.clone(),
                TensorEntry {
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset,
                },
            );
            offset += 4 * t.numel() as u64;
        }
        let header = serde_json::to_vec(&Header {
            tensors: entries,
            config: self.config.clone(),
            rng: self.rng.clone(),
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing PSDT magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_bytes = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[16 + hlen..];

        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
        let mut tensors = BTreeMap::new();
        for (name, e) in &header.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("tensor `{name}` has dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let end = e
                .offset
                .checked_add(4 * n as u64)
                .ok_or_else(|| bad("offset overflow".into()))?;
            if n == 0 || end > payload.len() as u64 {
                return Err(bad(format!("tensor `{name}` out of bounds")));
            }
            spans.push((e.offset, end, name));
            let raw = &payload[e.offset as usize..end as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(bad(format!(
                    "tensors `{}` and `{}` overlap",
                    w[0].2, w[1].2
                )));
            }
        }
        Ok(Self {
            tensors,
            config: header.config,
            rng: header.rng,
            meta: header.meta,
        })
    }

    /// Atomic save: a partially written file never appears at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no tensor `{name}`")))
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor<f32>> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }
}
