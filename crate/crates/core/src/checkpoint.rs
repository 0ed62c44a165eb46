//! Single-file checkpoints: magic, JSON header, then little-endian f32 blobs.
//!
//! Layout: `LTGCKPT1` · u64 LE header length · header JSON · blob bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use ltgsr_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"LTGCKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    kind: BlobKind,
    shape: [usize; 4],
    /// Offset into the blob section, in f32 elements.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: TrainConfig,
    epoch: usize,
    step: u64,
    gen_t: u64,
    critic_t: u64,
    tensors: Vec<BlobEntry>,
}

/// Full training state. Every random stream is derived from the configured
/// seeds and the counters here, so this is all a resume needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub gen_t: u64,
    pub critic_t: u64,
    pub params: ParamStore<f32>,
    pub adam_m: ParamStore<f32>,
    pub adam_v: ParamStore<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let mut offset = 0;
        for (kind, store) in [
            (BlobKind::Param, &self.params),
            (BlobKind::AdamM, &self.adam_m),
            (BlobKind::AdamV, &self.adam_v),
        ] {
            for (name, t) in store.iter() {
                tensors.push(BlobEntry {
                    name: name.clone(),
                    kind,
                    shape: t.shape(),
                    offset,
                });
                offset += t.len();
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = serde_json::to_vec(&Header {
            version: VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            gen_t: self.gen_t,
            critic_t: self.critic_t,
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fmt("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| fmt("truncated"))?;
        if hlen > body.len() {
            return Err(fmt("header length exceeds file"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        if header.version != VERSION {
            return Err(fmt(&format!("unsupported version {}", header.version)));
        }
        let blob = &body[hlen..];
        let mut params = ParamStore::default();
        let mut adam_m = ParamStore::default();
        let mut adam_v = ParamStore::default();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset.checked_mul(4).ok_or_else(|| fmt("offset overflow"))?;
            let end = start + n * 4;
            let raw = blob.get(start..end).ok_or_else(|| fmt(&format!("blob `{}` out of range", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(e.shape, data);
            match e.kind {
                BlobKind::Param => params.insert(e.name, t),
                BlobKind::AdamM => adam_m.insert(e.name, t),
                BlobKind::AdamV => adam_v.insert(e.name, t),
            }
        }
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            gen_t: header.gen_t,
            critic_t: header.critic_t,
            params,
            adam_m,
            adam_v,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Parameters under `prefix` from a checkpoint file (e.g. pretrained encoder weights).
pub fn load_prefixed(path: &Path, prefix: &str) -> Result<ParamStore<f32>> {
    let ck = Checkpoint::load(path)?;
    let mut out = ParamStore::default();
    for (k, v) in ck.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
        out.insert(k.clone(), v.clone());
    }
    Ok(out)
}
