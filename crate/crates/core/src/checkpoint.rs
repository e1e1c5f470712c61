//! Self-describing binary checkpoints.
//!
//! Layout: the 8-byte magic `CIGTCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every tensor as
//! little-endian `f64` values in header order. `f32` parameters widen to `f64`
//! exactly, so a round trip is lossless for both precisions.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::SgdMomentum;
use crate::tensor::{Element, Tensor};
use crate::train::{EpochRecord, TrainConfig, Trainer};
use crate::trellis::{Trellis, TrellisConfig};

pub const MAGIC: &[u8; 8] = b"CIGTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key as hex.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut key = [0u8; 32];
        for (i, b) in key.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Velocity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Offset into the blob, in `f64` values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: String,
    pub trellis: TrellisConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub tau: f64,
    pub data_rng: RngState,
    pub route_rng: RngState,
    pub tensors: Vec<TensorEntry>,
    pub history: Vec<EpochRecord>,
}

/// Serialise a trainer's full state.
pub fn to_bytes<T: Element>(trainer: &Trainer<T>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob: Vec<f64> = Vec::new();
    for p in trainer.model.params().iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            kind: TensorKind::Param,
            shape: p.value.shape().to_vec(),
            offset: blob.len(),
        });
        blob.extend(p.value.data().iter().map(|v| v.as_f64()));
    }
    for (p, v) in trainer.model.params().iter().zip(trainer.optimizer.velocity()) {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            kind: TensorKind::Velocity,
            shape: p.value.shape().to_vec(),
            offset: blob.len(),
        });
        blob.extend(v.iter().map(|x| x.as_f64()));
    }
    let header = Header {
        dtype: T::NAME.to_string(),
        trellis: trainer.model.config().clone(),
        train: trainer.config.clone(),
        epoch: trainer.epoch,
        step: trainer.step,
        tau: trainer.tau,
        data_rng: RngState::capture(&trainer.data_rng),
        route_rng: RngState::capture(&trainer.route_rng),
        tensors,
        history: trainer.history.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + blob.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parse the header and return it with the raw tensor blob.
pub fn parse(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20 + len)
        .ok_or_else(|| Error::Checkpoint("file ends inside the header".into()))?;
    let header: Header = serde_json::from_slice(json)?;
    Ok((header, &bytes[20 + len..]))
}

pub fn read_header(path: &Path) -> Result<Header> {
    Ok(parse(&fs::read(path)?)?.0)
}

fn tensor_values(blob: &[u8], entry: &TensorEntry) -> Result<Vec<f64>> {
    let n: usize = entry.shape.iter().product();
    let bytes = blob
        .get(entry.offset * 8..(entry.offset + n) * 8)
        .ok_or_else(|| Error::Checkpoint(format!("tensor {} lies outside the data section", entry.name)))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// Rebuild a trainer from serialised state.
pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<Trainer<T>> {
    let (header, blob) = parse(bytes)?;
    if header.dtype != T::NAME {
        return Err(Error::Checkpoint(format!("checkpoint holds {} tensors, requested {}", header.dtype, T::NAME)));
    }
    let mut model = Trellis::<T>::new(header.trellis.clone(), header.train.seed)?;
    let mut velocity = vec![Vec::new(); model.params().len()];
    let mut seen = vec![[false; 2]; model.params().len()];
    for entry in &header.tensors {
        let id = model
            .params()
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        let param = model.params().get(id);
        if param.value.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                param.value.shape()
            )));
        }
        let values: Vec<T> = tensor_values(blob, entry)?.into_iter().map(T::from_f64_lossy).collect();
        match entry.kind {
            TensorKind::Param => {
                model.params_mut().get_mut(id).value = Tensor::new(&entry.shape, values)?;
                seen[id.0][0] = true;
            }
            TensorKind::Velocity => {
                velocity[id.0] = values;
                seen[id.0][1] = true;
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !(s[0] && s[1])) {
        return Err(Error::Checkpoint(format!("tensor {} is missing", model.params().get(crate::nn::ParamId(i)).name)));
    }
    model.set_temperature(header.tau)?;
    let mut optimizer = SgdMomentum::new(model.params(), header.train.momentum, header.train.weight_decay);
    optimizer.set_velocity(velocity);
    Ok(Trainer {
        data_rng: header.data_rng.restore()?,
        route_rng: header.route_rng.restore()?,
        config: header.train,
        model,
        optimizer,
        step: header.step,
        epoch: header.epoch,
        tau: header.tau,
        history: header.history,
    })
}

/// Write a checkpoint atomically (temporary file, then rename).
pub fn save<T: Element>(trainer: &Trainer<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(trainer)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<Trainer<T>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn rng_state_round_trips_mid_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        rng.set_stream(3);
        for _ in 0..13 {
            rng.next_u32();
        }
        let mut restored = RngState::capture(&rng).restore().unwrap();
        for _ in 0..100 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(matches!(parse(b"NOTACKPTxxxxxxxxxxxxxxxx"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wrong_version_is_explicit() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend(99u32.to_le_bytes());
        bytes.extend(0u64.to_le_bytes());
        match parse(&bytes) {
            Err(Error::CheckpointVersion { found, expected }) => assert_eq!((found, expected), (99, VERSION)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
