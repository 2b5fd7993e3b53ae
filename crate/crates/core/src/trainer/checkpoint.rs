//! Versioned binary checkpoint: header, JSON config block, parameter
//! tensors, optional optimizer moments. Little-endian throughout.

use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Adam, TrainConfig};
use crate::codec::{DecodeError, Reader, Writer};
use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NSCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

/// SHA-256 of the canonical JSON form of the model configuration.
pub fn config_hash(cfg: &ModelConfig) -> String {
    hex_digest(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub dataset_hash: String,
    pub epoch: usize,
    pub embedding: EmbeddingConfig,
    pub item_features: Vec<Vec<u32>>,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<Adam<f32>>,
}

fn corrupt(e: DecodeError) -> Error {
    Error::Checkpoint(e.0)
}

impl Checkpoint {
    pub fn from_model(
        model: &Model<f32>,
        config: &TrainConfig,
        dataset_hash: &str,
        epoch: usize,
        optimizer: Option<&Adam<f32>>,
    ) -> Self {
        Self {
            config: config.clone(),
            config_hash: config_hash(&model.config),
            dataset_hash: dataset_hash.to_string(),
            epoch,
            embedding: model.embedding.config().clone(),
            item_features: model.embedding.item_features().to_vec(),
            params: model.params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model and copies every stored tensor into it by name.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut model = Model::with_embedding(
            self.config.model.clone(),
            self.embedding.clone(),
            self.item_features.clone(),
            0,
        )?;
        if model.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model layout has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            let slot = &mut model.params.get_mut(id).value;
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: stored {:?}, layout {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(model)
    }

    /// Refuses a checkpoint whose model configuration differs from `expected`
    /// unless `force` is set; the error names the first differing field.
    pub fn check_config(&self, expected: &ModelConfig, force: bool) -> Result<()> {
        if force || self.config_hash == config_hash(expected) {
            return Ok(());
        }
        let want = serde_json::to_value(expected)?;
        let have = serde_json::to_value(&self.config.model)?;
        let (field, e, f) = first_difference(&want, &have, "model").unwrap_or_else(|| {
            ("config_hash".into(), config_hash(expected), self.config_hash.clone())
        });
        Err(Error::ConfigMismatch {
            field,
            expected: e,
            found: f,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(&serde_json::to_string(&self.config)?);
        w.str(&self.config_hash);
        w.str(&self.dataset_hash);
        w.u64(self.epoch as u64);
        w.str(&serde_json::to_string(&self.embedding)?);
        w.str(&serde_json::to_string(&self.item_features)?);
        w.u64(self.params.len() as u64);
        for (name, t) in &self.params {
            w.str(name);
            write_tensor(&mut w, t);
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(adam) => {
                w.u8(1);
                w.u64(adam.learning_rate.to_bits());
                w.u64(adam.step);
                for (m, v) in adam.m.iter().zip(&adam.v) {
                    write_tensor(&mut w, m);
                    write_tensor(&mut w, v);
                }
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8, "magic").map_err(corrupt)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("format version").map_err(corrupt)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let json = |r: &mut Reader<'_>, what: &str| -> Result<String> { r.str(what).map_err(corrupt) };
        let config: TrainConfig = serde_json::from_str(&json(&mut r, "config")?)
            .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        let config_hash = json(&mut r, "config hash")?;
        let dataset_hash = json(&mut r, "dataset hash")?;
        let epoch = r.u64("epoch").map_err(corrupt)? as usize;
        let embedding: EmbeddingConfig = serde_json::from_str(&json(&mut r, "embedding config")?)
            .map_err(|e| Error::Checkpoint(format!("embedding block: {e}")))?;
        let item_features: Vec<Vec<u32>> = serde_json::from_str(&json(&mut r, "item features")?)
            .map_err(|e| Error::Checkpoint(format!("item feature block: {e}")))?;
        let count = r.u64("tensor count").map_err(corrupt)? as usize;
        let mut params = Vec::new();
        for i in 0..count {
            let name = r.str(&format!("tensor {i} name")).map_err(corrupt)?;
            let t = read_tensor(&mut r, &name)?;
            params.push((name, t));
        }
        let optimizer = match r.u8("optimizer flag").map_err(corrupt)? {
            0 => None,
            1 => {
                let learning_rate = f64::from_bits(r.u64("learning rate").map_err(corrupt)?);
                let step = r.u64("optimizer step").map_err(corrupt)?;
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for (name, _) in &params {
                    m.push(read_tensor(&mut r, &format!("{name} first moment"))?);
                    v.push(read_tensor(&mut r, &format!("{name} second moment"))?);
                }
                Some(Adam {
                    learning_rate,
                    step,
                    m,
                    v,
                })
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            config,
            config_hash,
            dataset_hash,
            epoch,
            embedding,
            item_features,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn write_tensor(w: &mut Writer, t: &Tensor<f32>) {
    w.u64(t.rows() as u64);
    w.u64(t.cols() as u64);
    for &v in t.data() {
        w.f32(v);
    }
}

fn read_tensor(r: &mut Reader<'_>, what: &str) -> Result<Tensor<f32>> {
    let rows = r.u64(&format!("{what} rows")).map_err(corrupt)? as usize;
    let cols = r.u64(&format!("{what} cols")).map_err(corrupt)? as usize;
    let len = rows
        .checked_mul(cols)
        .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
        .ok_or_else(|| Error::Checkpoint(format!("{what}: {rows}x{cols} exceeds the file")))?;
    let data = (0..len).map(|_| r.f32(what)).collect::<Result<Vec<_>, _>>().map_err(corrupt)?;
    Ok(Tensor::from_rows(rows, cols, data))
}

fn first_difference(want: &Value, have: &Value, path: &str) -> Option<(String, String, String)> {
    match (want, have) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, va) in a {
                let sub = format!("{path}.{k}");
                match b.get(k) {
                    Some(vb) => {
                        if let Some(d) = first_difference(va, vb, &sub) {
                            return Some(d);
                        }
                    }
                    None => return Some((sub, va.to_string(), "missing".into())),
                }
            }
            b.keys()
                .find(|k| !a.contains_key(*k))
                .map(|k| (format!("{path}.{k}"), "missing".into(), b[k].to_string()))
        }
        _ if want != have => Some((path.to_string(), want.to_string(), have.to_string())),
        _ => None,
    }
}
