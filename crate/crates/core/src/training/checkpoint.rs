//! Versioned checkpoint container.
//!
//! Layout: magic `CDCK`, `u32` version, `u64` header length, a JSON header,
//! then little-endian `f32` blobs in parameter order: raw weights, EMA
//! weights and, for resumable checkpoints, the two AdamW moment buffers.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use super::variant::NamedVariant;
use crate::autodiff::{ParamStore, Tensor};
use crate::backbone::{ModelConfig, UNet};
use crate::error::{Error, Result};
use crate::schedule::DiffusionConfig;

const MAGIC: &[u8; 4] = b"CDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |m: &str| Error::InvalidValue(format!("corrupt rng state: {m}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed"))?
            .try_into()
            .map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word_pos"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: AdamWConfig,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub variant: NamedVariant,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub step: u64,
    pub ema_lambda: f64,
    pub params: Vec<ParamMeta>,
    #[serde(default)]
    pub optimizer: Option<OptimizerMeta>,
    #[serde(default)]
    pub rng: Option<RngState>,
    /// Current epoch permutation and position within it.
    #[serde(default)]
    pub data_order: Vec<usize>,
    #[serde(default)]
    pub cursor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub weights: Vec<Tensor>,
    pub ema: Vec<Tensor>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

fn push_blobs(out: &mut Vec<u8>, tensors: &[Tensor]) {
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        push_blobs(&mut out, &self.weights);
        push_blobs(&mut out, &self.ema);
        if self.header.optimizer.is_some() {
            push_blobs(&mut out, &self.adam_m);
            push_blobs(&mut out, &self.adam_v);
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // Write-then-rename so a crash never leaves a torn checkpoint.
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_bytes = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::format(path, "truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let mut offset = 16 + hlen;
        let mut read_set = |bytes: &[u8]| -> Result<Vec<Tensor>> {
            header
                .params
                .iter()
                .map(|p| {
                    let n: usize = p.shape.iter().product();
                    let chunk = bytes
                        .get(offset..offset + 4 * n)
                        .ok_or_else(|| Error::format(path, format!("truncated blob for {}", p.name)))?;
                    offset += 4 * n;
                    let data = chunk
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Ok(Tensor::new(p.shape.clone(), data))
                })
                .collect()
        };
        let weights = read_set(&bytes)?;
        let ema = read_set(&bytes)?;
        let (adam_m, adam_v) = if header.optimizer.is_some() {
            (read_set(&bytes)?, read_set(&bytes)?)
        } else {
            (Vec::new(), Vec::new())
        };
        if offset != bytes.len() {
            return Err(Error::format(path, "trailing bytes after blobs"));
        }
        Ok(Self {
            header,
            weights,
            ema,
            adam_m,
            adam_v,
        })
    }

    /// Rebuilds the network and a parameter store holding either the EMA
    /// (for sampling) or the raw weights.
    pub fn model(&self, use_ema: bool) -> Result<(UNet, ParamStore)> {
        let (net, mut store) = UNet::new(self.header.model.clone(), 0)?;
        let src = if use_ema { &self.ema } else { &self.weights };
        if store.len() != src.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model layout needs {}",
                src.len(),
                store.len()
            )));
        }
        for (i, (dst, (meta, t))) in store
            .values_mut()
            .iter_mut()
            .zip(self.header.params.iter().zip(src))
            .enumerate()
        {
            if dst.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {i} ({}) has shape {:?}, model expects {:?}",
                    meta.name,
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
        Ok((net, store))
    }
}
