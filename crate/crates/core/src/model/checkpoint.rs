//! Binary container for model checkpoints and soft prompts.
//!
//! ```text
//! magic        8 bytes   "ABXCKPT1"
//! version      u32 LE    1
//! header_len   u64 LE
//! header       header_len bytes of UTF-8 JSON
//! blob         f32 LE values of every tensor, in header order
//! digest       32 bytes  SHA-256 of everything between magic and digest
//! ```
//!
//! The digest doubles as the identity of a model: two checkpoints with equal
//! digests have identical configuration and parameter bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use abbrex_numerics::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::soft_prompt::SoftPrompt;
use super::{Model, ModelConfig};
use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 8] = b"ABXCKPT1";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<ModelConfig>,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode(header: &Header, tensors: &[&Tensor<f32>]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let floats: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 4 * floats + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out[8..]);
    out.extend_from_slice(&digest);
    out
}

struct Decoded {
    header: Header,
    tensors: Vec<(String, Tensor<f32>)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let corrupt = |m: &str| CoreError::Corrupt(m.to_string());
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    if bytes.len() < PREAMBLE + DIGEST_LEN {
        return Err(corrupt("file too short"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CoreError::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREAMBLE))
        .filter(|&e| e + DIGEST_LEN <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| CoreError::Corrupt(format!("header: {e}")))?;
    let floats = header
        .tensors
        .iter()
        .try_fold(0usize, |acc, t| {
            t.shape
                .iter()
                .try_fold(1usize, |p, &d| p.checked_mul(d))
                .and_then(|n| acc.checked_add(n))
        })
        .ok_or_else(|| corrupt("tensor sizes overflow"))?;
    let blob_end = floats
        .checked_mul(4)
        .and_then(|b| b.checked_add(header_end))
        .ok_or_else(|| corrupt("tensor sizes overflow"))?;
    if blob_end + DIGEST_LEN != bytes.len() {
        return Err(CoreError::Corrupt(format!(
            "expected {} bytes, file has {}",
            blob_end + DIGEST_LEN,
            bytes.len()
        )));
    }
    let stored = hex(&bytes[blob_end..]);
    let actual = hex(&Sha256::digest(&bytes[8..blob_end]));
    if stored != actual {
        return Err(CoreError::DigestMismatch {
            expected: stored,
            found: actual,
        });
    }
    let mut offset = header_end;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let data = bytes[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 4 * n;
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok(Decoded { header, tensors })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn model_header(model: &Model) -> Header {
    Header {
        kind: "model".into(),
        config: Some(model.config().clone()),
        tensors: model
            .named_params()
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: BTreeMap::new(),
    }
}

pub fn model_to_bytes(model: &Model) -> Vec<u8> {
    let tensors: Vec<&Tensor<f32>> = model.params().iter().collect();
    encode(&model_header(model), &tensors)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let d = decode(bytes)?;
    if d.header.kind != "model" {
        return Err(CoreError::Corrupt(format!("expected a model, found {}", d.header.kind)));
    }
    let config = d
        .header
        .config
        .ok_or_else(|| CoreError::Corrupt("model header lacks config".into()))?;
    Model::from_named(config, d.tensors)
}

pub(crate) fn model_digest(model: &Model) -> String {
    let bytes = model_to_bytes(model);
    hex(&bytes[bytes.len() - DIGEST_LEN..])
}

/// Digest stored in a container's trailer (not verified).
pub fn stored_digest(bytes: &[u8]) -> Option<String> {
    (bytes.len() >= PREAMBLE + DIGEST_LEN).then(|| hex(&bytes[bytes.len() - DIGEST_LEN..]))
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<String> {
    let bytes = model_to_bytes(model);
    write_atomic(path.as_ref(), &bytes)?;
    Ok(hex(&bytes[bytes.len() - DIGEST_LEN..]))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    model_from_bytes(&fs::read(path)?)
}

pub fn soft_prompt_to_bytes(prompt: &SoftPrompt) -> Vec<u8> {
    let meta = BTreeMap::from([
        ("user_id".to_string(), prompt.user_id.clone()),
        ("init_strategy".to_string(), prompt.init_strategy.as_str().to_string()),
        ("base_digest".to_string(), prompt.base_digest.clone()),
    ]);
    let header = Header {
        kind: "soft_prompt".into(),
        config: None,
        tensors: vec![TensorEntry {
            name: "prompt".into(),
            shape: prompt.matrix.shape().to_vec(),
        }],
        meta,
    };
    encode(&header, &[&prompt.matrix])
}

pub fn soft_prompt_from_bytes(bytes: &[u8]) -> Result<SoftPrompt> {
    let mut d = decode(bytes)?;
    if d.header.kind != "soft_prompt" {
        return Err(CoreError::Corrupt(format!(
            "expected a soft prompt, found {}",
            d.header.kind
        )));
    }
    let (name, matrix) = match d.tensors.pop() {
        Some(t) if d.tensors.is_empty() => t,
        _ => return Err(CoreError::Corrupt("soft prompt must hold exactly one tensor".into())),
    };
    if name != "prompt" || matrix.rank() != 2 || matrix.shape()[0] == 0 {
        return Err(CoreError::Corrupt(format!("unexpected tensor {name} {:?}", matrix.shape())));
    }
    let meta = |k: &str| {
        d.header
            .meta
            .get(k)
            .cloned()
            .ok_or_else(|| CoreError::Corrupt(format!("soft prompt lacks {k}")))
    };
    Ok(SoftPrompt {
        user_id: meta("user_id")?,
        init_strategy: meta("init_strategy")?.parse()?,
        base_digest: meta("base_digest")?,
        matrix,
    })
}

pub fn save_soft_prompt(prompt: &SoftPrompt, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &soft_prompt_to_bytes(prompt))
}

pub fn load_soft_prompt(path: impl AsRef<Path>) -> Result<SoftPrompt> {
    soft_prompt_from_bytes(&fs::read(path)?)
}
