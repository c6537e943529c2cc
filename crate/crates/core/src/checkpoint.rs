//! Versioned checkpoint container.
//!
//! ```text
//! b"RFHITCKP" | version u32 LE | header length u64 LE | JSON header
//! | parameter values (f32 LE, header order) | [first moments | second moments]
//! | SHA-256 of everything before it
//! ```
//!
//! The header carries the run configuration, the step counters and every
//! parameter's name, shape and kind.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::model::RfHit;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::trainer::{AdamW, Trainer};

const MAGIC: &[u8; 8] = b"RFHITCKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    kind: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    dtype: String,
    step: usize,
    total_steps: usize,
    /// Optimizer update count; absent when no optimizer state is stored.
    adam_t: Option<u64>,
    params: Vec<ParamHeader>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub total_steps: usize,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, config: &RunConfig) -> Self {
        let mut config = config.clone();
        config.model = trainer.model.config.clone();
        config.train = trainer.config.clone();
        Self {
            config,
            step: trainer.step,
            total_steps: trainer.schedule.total_steps,
            params: trainer.model.store.clone(),
            optimizer: Some(trainer.opt.clone()),
        }
    }

    /// Rebuilds the model with the stored parameters.
    pub fn model(&self) -> Result<RfHit<f32>> {
        let mut model = RfHit::new(&self.config.model, self.config.train.seed)?;
        let fresh = model.store.entries();
        let stored = self.params.entries();
        if fresh.len() != stored.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, configuration builds {}",
                stored.len(),
                fresh.len()
            )));
        }
        for (f, s) in fresh.iter().zip(stored) {
            if f.name != s.name || f.value.shape() != s.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    s.name,
                    s.value.shape(),
                    f.name,
                    f.value.shape()
                )));
            }
        }
        model.store = self.params.clone();
        Ok(model)
    }

    /// Resumes training where the checkpoint left off.
    pub fn trainer(&self) -> Result<Trainer> {
        let model = self.model()?;
        Ok(Trainer::from_parts(model, &self.config.train, self.total_steps, self.optimizer.clone(), self.step))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            dtype: f32::DTYPE.into(),
            step: self.step,
            total_steps: self.total_steps,
            adam_t: self.optimizer.as_ref().map(|o| o.t),
            params: self
                .params
                .entries()
                .iter()
                .map(|e| ParamHeader { name: e.name.clone(), shape: e.value.shape().to_vec(), kind: e.kind.tag().into() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut blob = |t: &Tensor<f32>| t.data().iter().for_each(|v| v.write_le(&mut out));
        self.params.entries().iter().for_each(|e| blob(&e.value));
        if let Some(opt) = &self.optimizer {
            opt.m.iter().for_each(&mut blob);
            opt.v.iter().for_each(&mut blob);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(err("checksum mismatch, file is corrupt"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let json = body.get(20..20 + hlen).ok_or_else(|| err("truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.dtype != f32::DTYPE {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
        }
        let mut data = &body[20 + hlen..];
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            if data.len() < 4 * n {
                return Err(err("truncated parameter data"));
            }
            let vals = data[..4 * n].chunks_exact(4).map(f32::read_le).collect();
            data = &data[4 * n..];
            Tensor::from_vec(shape, vals)
        };
        let mut params = ParamStore::new();
        for p in &header.params {
            let kind = ParamKind::from_tag(&p.kind)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter kind {}", p.kind)))?;
            params.add(p.name.clone(), take(&p.shape)?, kind);
        }
        let optimizer = match header.adam_t {
            Some(t) => {
                let m = header.params.iter().map(|p| take(&p.shape)).collect::<Result<Vec<_>>>()?;
                let v = header.params.iter().map(|p| take(&p.shape)).collect::<Result<Vec<_>>>()?;
                let tc = &header.config.train;
                Some(AdamW { beta1: tc.beta1, beta2: tc.beta2, eps: tc.adam_eps, weight_decay: tc.weight_decay, t, m, v })
            }
            None => None,
        };
        if !data.is_empty() {
            return Err(err("trailing bytes after parameter data"));
        }
        Ok(Self { config: header.config, step: header.step, total_steps: header.total_steps, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads and insists on a particular model configuration.
    pub fn load_expecting(path: &Path, model: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.config.model != model {
            return Err(Error::Checkpoint(format!(
                "{}: model configuration differs from the requested one",
                path.display()
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    fn sample() -> Checkpoint {
        let mut rc = RunConfig::from_preset("unit").unwrap();
        rc.train.steps = Some(4);
        let trainer = Trainer::new(&rc.model, &rc.train, 4).unwrap();
        Checkpoint::from_trainer(&trainer, &rc)
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.step, ck.step);
        assert_eq!(back.optimizer, ck.optimizer);
        for (a, b) in back.params.entries().iter().zip(ck.params.entries()) {
            assert_eq!((&a.name, &a.value, a.kind), (&b.name, &b.value, b.kind));
        }
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        let mut old = bytes[..bytes.len() - 32].to_vec();
        old[8..12].copy_from_slice(&99u32.to_le_bytes());
        let digest = Sha256::digest(&old);
        old.extend_from_slice(&digest);
        assert!(matches!(Checkpoint::from_bytes(&old), Err(Error::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        sample().save(&path).unwrap();
        assert!(Checkpoint::load_expecting(&path, &preset("unit").unwrap()).is_ok());
        let mut other = preset("unit").unwrap();
        other.widths = vec![8, 16, 16];
        assert!(Checkpoint::load_expecting(&path, &other).is_err());
    }
}
