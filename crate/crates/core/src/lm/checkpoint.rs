//! Checkpoint container.
//!
//! ```text
//! magic    8 bytes   "BRLHFCK\0"
//! version  u32 LE
//! hlen     u64 LE    length of the JSON header in bytes
//! header   hlen bytes UTF-8 JSON: config, counters, tokenizer path, metric
//!                     history, optimizer hyperparameters, array directory
//!                     (name, shape, element offset) and the SHA-256 of the payload
//! payload  f64 LE values of every array, back to back in directory order
//! ```
//!
//! Model weights use GPT-2 style names (`wte`, `h.0.attn.c_attn.weight`, ...).
//! Optimizer momentum is stored as `optim.m.<i>` and any extra arrays (reward,
//! value or classifier heads) under their own names.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LionConfig, LionState, ModelConfig, ParameterSet, Transformer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"BRLHFCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const OPTIM_PREFIX: &str = "optim.m.";

/// One row of a training metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: u64,
    pub train_loss: f64,
    pub val_ppl: Option<f64>,
}

/// Persisted training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParameterSet,
    /// Additional named arrays such as task heads.
    pub extra: BTreeMap<String, Tensor>,
    pub optimizer: Option<LionState>,
    pub step: u64,
    pub epoch: u64,
    /// Path of the tokenizer directory the model was trained with.
    pub tokenizer: Option<String>,
    pub metrics: Vec<MetricRecord>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    epoch: u64,
    tokenizer: Option<String>,
    metrics: Vec<MetricRecord>,
    optimizer: Option<LionConfig>,
    arrays: Vec<ArrayEntry>,
    payload_len: usize,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_model(model: &Transformer) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.clone(),
            extra: BTreeMap::new(),
            optimizer: None,
            step: 0,
            epoch: 0,
            tokenizer: None,
            metrics: Vec::new(),
        }
    }

    pub fn model(&self) -> Result<Transformer> {
        Transformer::from_parts(self.config.clone(), self.params.clone())
    }

    pub fn into_model(self) -> Result<Transformer> {
        Transformer::from_parts(self.config, self.params)
    }

    fn arrays(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.params.named();
        if let Some(opt) = &self.optimizer {
            out.extend(opt.momentum.iter().enumerate().map(|(i, m)| (format!("{OPTIM_PREFIX}{i}"), m)));
        }
        out.extend(self.extra.iter().map(|(k, v)| (k.clone(), v)));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, t) in self.arrays() {
            entries.push(ArrayEntry {
                name,
                shape: t.shape.clone(),
                offset,
            });
            offset += t.len();
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            tokenizer: self.tokenizer.clone(),
            metrics: self.metrics.clone(),
            optimizer: self.optimizer.as_ref().map(|o| o.config),
            arrays: entries,
            payload_len: payload.len(),
            sha256: hex(&Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic or too short)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        let payload = &bytes[header_end..];
        if payload.len() != header.payload_len {
            return Err(corrupt(format!(
                "payload is {} bytes, header declares {} (truncated or padded file)",
                payload.len(),
                header.payload_len
            )));
        }
        if hex(&Sha256::digest(payload)) != header.sha256 {
            return Err(corrupt("payload checksum mismatch".into()));
        }
        header.config.validate()?;

        let mut arrays = HashMap::new();
        let mut extra = BTreeMap::new();
        let mut momentum: BTreeMap<usize, Tensor> = BTreeMap::new();
        for entry in header.arrays {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset * 8;
            let end = start + n * 8;
            if end > payload.len() {
                return Err(corrupt(format!("array `{}` extends past the payload", entry.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_vec(&entry.shape, data);
            if let Some(i) = entry.name.strip_prefix(OPTIM_PREFIX).and_then(|s| s.parse().ok()) {
                momentum.insert(i, t);
            } else if entry.name == "wte"
                || entry.name == "wpe"
                || entry.name.starts_with("h.")
                || entry.name.starts_with("ln_f.")
                || entry.name == "lm_head.weight"
            {
                arrays.insert(entry.name, t);
            } else {
                extra.insert(entry.name, t);
            }
        }
        let params = ParameterSet::from_named(&header.config, arrays)?;
        let optimizer = header.optimizer.map(|config| LionState {
            config,
            momentum: momentum.into_values().collect(),
        });
        Ok(Self {
            config: header.config,
            params,
            extra,
            optimizer,
            step: header.step,
            epoch: header.epoch,
            tokenizer: header.tokenizer,
            metrics: header.metrics,
        })
    }

    /// Writes atomically: the file either holds the full checkpoint or is untouched.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Loads and checks that every model array has the shape implied by `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let want = ParameterSet::zeros(expected);
        if want.blocks.len() != ckpt.params.blocks.len() {
            return Err(Error::Checkpoint(format!(
                "file has {} layers, expected {}",
                ckpt.params.blocks.len(),
                want.blocks.len()
            )));
        }
        for ((name, w), got) in want.named().into_iter().zip(ckpt.params.tensors()) {
            if w.shape != got.shape {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: w.shape.clone(),
                    found: got.shape.clone(),
                });
            }
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            context_length: 5,
            vocab_size: 11,
            dropout: 0.0,
            seed: 9,
        }
    }

    fn sample() -> Checkpoint {
        let model = Transformer::new(cfg()).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        ck.optimizer = Some(LionState::new(LionConfig::default(), model.params.tensors()));
        ck.optimizer.as_mut().unwrap().momentum[3].data[0] = -0.125;
        ck.extra.insert("value_head.weight".into(), Tensor::from_vec(&[8, 1], vec![0.1; 8]));
        ck.step = 17;
        ck.epoch = 2;
        ck.tokenizer = Some("tok".into());
        ck.metrics.push(MetricRecord {
            step: 17,
            epoch: 2,
            train_loss: 1.25,
            val_ppl: Some(3.5),
        });
        ck
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.params.tensors().iter().zip(ck.params.tensors()) {
            let bits_a: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).unwrap_err().to_string().contains("checksum"));
        let mut wrong_version = bytes;
        wrong_version[8] = 99;
        assert!(Checkpoint::from_bytes(&wrong_version).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn mismatched_shapes_name_the_array() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        sample().save(&path).unwrap();
        let mut other = cfg();
        other.vocab_size = 12;
        match Checkpoint::load_expecting(&path, &other).unwrap_err() {
            Error::ShapeMismatch { name, .. } => assert_eq!(name, "wte"),
            e => panic!("unexpected {e}"),
        }
    }
}
