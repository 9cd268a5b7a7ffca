//! Binary checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! "ICMM" u16 version
//! u32 len, config block: u32 d_model n_layers n_heads d_ff n_in patch_len n_u n_y,
//!                        f64 sigma_min dropout
//! u32 count, per parameter: u16 name_len, name, u8 ndim, u32 dims[ndim], f32 values
//! u8 has_optimizer [u64 step, per parameter: f32 m[len], f32 v[len]]
//! u32 len, JSON metadata (lineage and training progress)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MetaModel, ModelConfig};
use crate::backend::{ParamSet, Tensor};
use crate::binio::{Reader, Writer};
use crate::datagen::write_atomic;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ICMM";
const VERSION: u16 = 1;

/// Where a checkpoint came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lineage {
    /// Weights hash of the checkpoint this one was fine-tuned from.
    pub parent_hash: Option<String>,
    /// Human-readable description of what changed relative to the parent.
    pub change: Option<String>,
}

/// AdamW moments in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimSnapshot {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Serialize, Deserialize, Default)]
struct Meta {
    lineage: Lineage,
    progress: serde_json::Value,
}

/// Model weights plus optional optimizer state and metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MetaModel<f32>,
    pub optim: Option<OptimSnapshot>,
    pub lineage: Lineage,
    /// Opaque training progress record.
    pub progress: serde_json::Value,
}

fn config_block(cfg: &ModelConfig) -> Vec<u8> {
    let mut w = Writer::default();
    for v in [
        cfg.d_model,
        cfg.n_layers,
        cfg.n_heads,
        cfg.d_ff,
        cfg.n_in,
        cfg.patch_len,
        cfg.n_u,
        cfg.n_y,
    ] {
        w.u32(v as u32);
    }
    w.f64(cfg.sigma_min);
    w.f64(cfg.dropout);
    w.buf
}

fn params_block(params: &ParamSet<f32>) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(params.len() as u32);
    for p in params.iter() {
        w.u16(p.name.len() as u16);
        w.bytes(p.name.as_bytes());
        w.u8(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            w.u32(d as u32);
        }
        w.f32s(p.value.data());
    }
    w.buf
}

/// SHA-256 over the configuration and parameter blocks.
pub(crate) fn weights_hash(model: &MetaModel<f32>) -> String {
    let mut h = Sha256::new();
    h.update(config_block(model.config()));
    h.update(params_block(model.params()));
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn new(model: MetaModel<f32>) -> Self {
        Checkpoint {
            model,
            optim: None,
            lineage: Lineage::default(),
            progress: serde_json::Value::Null,
        }
    }

    /// Identity of the weights, independent of optimizer state and metadata.
    pub fn weights_hash(&self) -> String {
        weights_hash(&self.model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.blob(&config_block(self.model.config()));
        w.bytes(&params_block(self.model.params()));
        match &self.optim {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                w.u64(o.step);
                for (m, v) in o.m.iter().zip(&o.v) {
                    w.f32s(m.data());
                    w.f32s(v.data());
                }
            }
        }
        let meta = Meta {
            lineage: self.lineage.clone(),
            progress: self.progress.clone(),
        };
        w.blob(&serde_json::to_vec(&meta).expect("metadata serializes"));
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not a checkpoint file (bad magic)".into(),
            });
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(r.err(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let block = r.blob("config block")?;
        let mut c = Reader::new(block);
        let mut ints = [0usize; 8];
        for v in &mut ints {
            *v = c.u32("config block")? as usize;
        }
        let cfg = ModelConfig {
            d_model: ints[0],
            n_layers: ints[1],
            n_heads: ints[2],
            d_ff: ints[3],
            n_in: ints[4],
            patch_len: ints[5],
            n_u: ints[6],
            n_y: ints[7],
            sigma_min: c.f64("config block")?,
            dropout: c.f64("config block")?,
        };
        cfg.validate().map_err(|e| r.err(e.to_string()))?;

        let count = r.u32("parameter count")? as usize;
        let mut params = ParamSet::new();
        for i in 0..count {
            let what = format!("parameter {i}");
            let len = r.u16(&what)? as usize;
            let name = std::str::from_utf8(r.take(len, &what)?)
                .map_err(|_| r.err(format!("{what}: name is not UTF-8")))?
                .to_string();
            let ndim = r.u8(&name)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32(&name)? as usize);
            }
            let n = shape.iter().product();
            let values = r.f32s(n, &format!("values of `{name}`"))?;
            params
                .insert(name, Tensor::new(shape, values)?)
                .map_err(|e| r.err(e.to_string()))?;
        }
        let model = MetaModel::from_params(&cfg, params).map_err(|e| r.err(e.to_string()))?;

        let optim = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for p in model.params().iter() {
                    let shape = p.value.shape().to_vec();
                    let n = p.value.len();
                    let what = format!("optimizer state of `{}`", p.name);
                    m.push(Tensor::new(shape.clone(), r.f32s(n, &what)?)?);
                    v.push(Tensor::new(shape, r.f32s(n, &what)?)?);
                }
                Some(OptimSnapshot { step, m, v })
            }
            f => return Err(r.err(format!("bad optimizer flag {f}"))),
        };
        let meta: Meta = serde_json::from_slice(r.blob("metadata")?)
            .map_err(|e| r.err(format!("bad metadata: {e}")))?;
        if r.remaining() != 0 {
            return Err(r.err(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint {
            model,
            optim,
            lineage: meta.lineage,
            progress: meta.progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ckpt() -> Checkpoint {
        let m = MetaModel::init(&ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let optim = OptimSnapshot {
            step: 7,
            m: m.params().iter().map(|p| Tensor::full(p.value.shape().to_vec(), 0.5)).collect(),
            v: m.params().iter().map(|p| Tensor::full(p.value.shape().to_vec(), 0.25)).collect(),
        };
        Checkpoint {
            model: m,
            optim: Some(optim),
            lineage: Lineage {
                parent_hash: Some("abc".into()),
                change: None,
            },
            progress: serde_json::json!({"iteration": 7}),
        }
    }

    #[test]
    fn round_trip() {
        let c = ckpt();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.model.params(), c.model.params());
        assert_eq!(back.model.config(), c.model.config());
        assert_eq!(back.optim, c.optim);
        assert_eq!(back.lineage, c.lineage);
        assert_eq!(back.progress, c.progress);
        assert_eq!(back.weights_hash(), c.weights_hash());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = ckpt().to_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn hash_tracks_weights() {
        let mut c = ckpt();
        let h = c.weights_hash();
        c.optim = None;
        c.progress = serde_json::Value::Null;
        assert_eq!(c.weights_hash(), h);
        c.model.params_mut().iter_mut().next().unwrap().value.data_mut()[0] += 1.0;
        assert_ne!(c.weights_hash(), h);
    }
}
