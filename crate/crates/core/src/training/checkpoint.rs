//! `SAMCD1` checkpoint container.
//!
//! Layout: the six magic bytes, a `u32` format version, a `u64` header
//! length, a JSON header, then the raw little-endian blobs in header order.
//! Values are held as `f64` in memory; blobs are written in the dtype of
//! the model that produced them, so an `f32` model round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::Sgd;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SamCd};
use crate::nn::ParamKind;
use crate::scalar::{DType, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"SAMCD1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    #[serde(skip)]
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: DType,
    model: ModelConfig,
    train: TrainConfig,
    iteration: usize,
    train_size: usize,
    rng_seed: u64,
    encoder_checksum: Option<String>,
    params: Vec<Blob>,
    velocity: Vec<Blob>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dtype: DType,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Optimizer steps already taken.
    pub iteration: usize,
    /// Size of the (subsampled) training set, which fixes steps per epoch.
    pub train_size: usize,
    /// Root of every data-order and augmentation stream; together with
    /// `iteration` it determines all future draws.
    pub rng_seed: u64,
    pub encoder_checksum: Option<String>,
    pub params: Vec<Blob>,
    /// Momentum buffers keyed by parameter name.
    pub velocity: Vec<Blob>,
}

fn to_blob<S: Scalar>(name: &str, value: &ArrayD<S>, trainable: bool) -> Blob {
    Blob {
        name: name.to_string(),
        shape: value.shape().to_vec(),
        trainable,
        data: value.iter().map(|v| v.as_f64()).collect(),
    }
}

fn from_blob<S: Scalar>(blob: &Blob) -> Result<ArrayD<S>> {
    ArrayD::from_shape_vec(IxDyn(&blob.shape), blob.data.iter().map(|&v| S::lit(v)).collect())
        .map_err(|e| Error::Format(format!("blob `{}`: {e}", blob.name)))
}

impl Checkpoint {
    pub fn capture<S: Scalar>(
        model: &SamCd<S>,
        train: &TrainConfig,
        optimizer: &Sgd<S>,
        iteration: usize,
        train_size: usize,
    ) -> Self {
        let store = model.store();
        let params = store
            .iter()
            .map(|(_, p)| to_blob(&p.name, &p.value, p.kind == ParamKind::Trainable))
            .collect();
        let velocity = optimizer
            .velocity()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = v.as_ref()?;
                let (_, p) = store.iter().nth(i)?;
                Some(to_blob(&p.name, v, true))
            })
            .collect();
        Self {
            dtype: S::DTYPE,
            model: model.config().clone(),
            train: train.clone(),
            iteration,
            train_size,
            rng_seed: train.seed,
            encoder_checksum: model.encoder_checksum(),
            params,
            velocity,
        }
    }

    /// Compare structural model fields; the error names the first field
    /// that differs (`k` for the semantic channel count).
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let ours = &self.model;
        let diff = |field: &str, a: String, b: String| {
            Err(Error::Incompatible {
                field: field.to_string(),
                detail: format!("checkpoint has {a}, configuration has {b}"),
            })
        };
        if ours.semantic_channels != config.semantic_channels {
            return diff("k", ours.semantic_channels.to_string(), config.semantic_channels.to_string());
        }
        if ours.levels != config.levels {
            return diff("levels", ours.levels.to_string(), config.levels.to_string());
        }
        if ours.adaptor_width != config.adaptor_width {
            return diff("adaptor_width", ours.adaptor_width.to_string(), config.adaptor_width.to_string());
        }
        if ours.change_width != config.change_width {
            return diff("change_width", ours.change_width.to_string(), config.change_width.to_string());
        }
        if ours.residual_blocks != config.residual_blocks {
            return diff("residual_blocks", ours.residual_blocks.to_string(), config.residual_blocks.to_string());
        }
        if ours.encoder.kind != config.encoder.kind {
            return diff("encoder.kind", format!("{:?}", ours.encoder.kind), format!("{:?}", config.encoder.kind));
        }
        if ours.encoder.channels != config.encoder.channels {
            return diff(
                "encoder.channels",
                format!("{:?}", ours.encoder.channels),
                format!("{:?}", config.encoder.channels),
            );
        }
        if ours.encoder.seed != config.encoder.seed {
            return diff("encoder.seed", ours.encoder.seed.to_string(), config.encoder.seed.to_string());
        }
        Ok(())
    }

    /// Rebuild the model and load every stored parameter into it.
    pub fn restore_model<S: Scalar>(&self) -> Result<SamCd<S>> {
        let mut model = SamCd::<S>::new(self.model.clone())?;
        if let (Some(expected), Some(actual)) = (&self.encoder_checksum, model.encoder_checksum()) {
            if *expected != actual {
                return Err(Error::Incompatible {
                    field: "encoder".into(),
                    detail: "rebuilt frozen encoder weights differ from the checkpoint".into(),
                });
            }
        }
        if model.store().len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.params.len(),
                model.store().len()
            )));
        }
        for blob in &self.params {
            let store = model.store_mut();
            let id = store
                .find(&blob.name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{}` in checkpoint", blob.name)))?;
            if store.value(id).shape() != blob.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, model expects {:?}",
                    blob.name,
                    blob.shape,
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = from_blob(blob)?;
        }
        Ok(model)
    }

    pub fn restore_optimizer<S: Scalar>(&self, model: &SamCd<S>) -> Result<Sgd<S>> {
        let store = model.store();
        let mut velocity = vec![None; store.len()];
        for blob in &self.velocity {
            let id = store
                .find(&blob.name)
                .ok_or_else(|| Error::Format(format!("unknown velocity `{}` in checkpoint", blob.name)))?;
            velocity[id.index()] = Some(from_blob(blob)?);
        }
        let mut sgd = Sgd::new(self.train.momentum, self.train.weight_decay);
        sgd.set_velocity(velocity);
        Ok(sgd)
    }

    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            dtype: self.dtype,
            model: self.model.clone(),
            train: self.train.clone(),
            iteration: self.iteration,
            train_size: self.train_size,
            rng_seed: self.rng_seed,
            encoder_checksum: self.encoder_checksum.clone(),
            params: self.params.clone(),
            velocity: self.velocity.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for blob in self.params.iter().chain(&self.velocity) {
            for &v in &blob.data {
                match self.dtype {
                    DType::F32 => out.write_all(&(v as f32).to_le_bytes())?,
                    DType::F64 => out.write_all(&v.to_le_bytes())?,
                }
            }
        }
        Ok(())
    }

    pub fn read(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 6];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a SAMCD1 checkpoint".into()));
        }
        let mut u32b = [0u8; 4];
        input.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut u64b = [0u8; 8];
        input.read_exact(&mut u64b)?;
        let len = usize::try_from(u64::from_le_bytes(u64b))
            .map_err(|_| Error::Format("checkpoint header too large".into()))?;
        let mut json = vec![0u8; len];
        input.read_exact(&mut json)?;
        let mut header: Header = serde_json::from_slice(&json)?;
        let width = header.dtype.size();
        for blob in header.params.iter_mut().chain(header.velocity.iter_mut()) {
            let n: usize = blob.shape.iter().product();
            let mut raw = vec![0u8; n * width];
            input.read_exact(&mut raw)?;
            blob.data = match header.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
        }
        Ok(Self {
            dtype: header.dtype,
            model: header.model,
            train: header.train,
            iteration: header.iteration,
            train_size: header.train_size,
            rng_seed: header.rng_seed,
            encoder_checksum: header.encoder_checksum,
            params: header.params,
            velocity: header.velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderSpec;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderSpec { channels: [4, 4, 4, 4], ..EncoderSpec::default() },
            adaptor_width: 4,
            change_width: 4,
            residual_blocks: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let model = SamCd::<f32>::new(tiny()).unwrap();
        let sgd = Sgd::new(0.9, 5e-4);
        let ck = Checkpoint::capture(&model, &TrainConfig::default(), &sgd, 7, 3);
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let restored: SamCd<f32> = back.restore_model().unwrap();
        assert_eq!(restored.store().checksum(), model.store().checksum());
    }

    #[test]
    fn bad_magic() {
        let err = Checkpoint::read(&mut &b"NOTACHECKPOINT"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn differing_k_is_named() {
        let model = SamCd::<f64>::new(tiny()).unwrap();
        let ck = Checkpoint::capture(&model, &TrainConfig::default(), &Sgd::new(0.9, 0.0), 0, 1);
        let other = ModelConfig { semantic_channels: 4, ..tiny() };
        match ck.check_compatible(&other) {
            Err(Error::Incompatible { field, .. }) => assert_eq!(field, "k"),
            other => panic!("expected incompatibility, got {other:?}"),
        }
        ck.check_compatible(&tiny()).unwrap();
    }
}
