//! Binary checkpoint of the tuned encoder.
//!
//! Layout: `SGE1`, u32 header length, JSON header, u32 tensor count, then per
//! tensor (u32 name length, name, u32 rank, u64 extents, f64 values), and a
//! trailing CRC32 of everything before it. All integers are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{Array, ParamSet};
use crate::text::Vocab;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGE1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub encoder: EncoderConfig,
    pub vocab: Vocab,
    pub train: Option<TrainConfig>,
    pub best_metric: Option<f64>,
    pub tensors: ParamSet,
}

impl Checkpoint {
    pub fn new(params: &EncoderParams, vocab: &Vocab, train: Option<TrainConfig>, best_metric: Option<f64>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            encoder: params.config.clone(),
            vocab: vocab.clone(),
            train,
            best_metric,
            tensors: params.tensors.clone(),
        }
    }

    pub fn params(&self) -> EncoderParams {
        EncoderParams {
            config: self.encoder.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    encoder: EncoderConfig,
    vocab: Vocab,
    train: Option<TrainConfig>,
    best_metric: Option<f64>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit the checkpoint format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(checkpoint: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        version: checkpoint.version,
        encoder: checkpoint.encoder.clone(),
        vocab: checkpoint.vocab.clone(),
        train: checkpoint.train.clone(),
        best_metric: checkpoint.best_metric.filter(|m| m.is_finite()),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + 8 * checkpoint.tensors.numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(&header);
    put_u32(&mut out, checkpoint.tensors.len())?;
    for (name, array) in checkpoint.tensors.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, array.shape().len())?;
        for &extent in array.shape() {
            out.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        for v in array.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("{what} at byte {} needs {n} bytes", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Truncated(format!("{what} {v} is implausible")))
    }
}

/// Raw tensor records located during the structural pass.
struct RawTensor<'a> {
    name: &'a [u8],
    shape: Vec<usize>,
    values: &'a [u8],
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Version {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    // Structure first, so a damaged payload is reported as a checksum failure
    // rather than as whatever the damaged bytes happen to decode to.
    let header_len = r.u32("header length")?;
    let header = r.take(header_len, "header")?;
    let count = r.u32("tensor count")?;
    let mut raw = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let name = r.take(name_len, "tensor name")?;
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u64("extent")).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Truncated("tensor size overflows".into()))?;
        let values = r.take(numel, "tensor values")?;
        raw.push(RawTensor { name, shape, values });
    }
    let body_end = r.pos;
    let stored = u32::from_le_bytes(r.take(4, "checksum")?.try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed || r.pos != bytes.len() {
        return Err(Error::Checksum { stored, computed });
    }

    let header: Header = serde_json::from_slice(header)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION.to_string(),
            found: header.version.to_string(),
        });
    }
    let mut tensors = ParamSet::new();
    for t in raw {
        let name = String::from_utf8(t.name.to_vec()).map_err(|_| Error::Truncated("tensor name is not UTF-8".into()))?;
        let data = t
            .values
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Array::new(t.shape, data)?);
    }
    Ok(Checkpoint {
        version: header.version,
        encoder: header.encoder,
        vocab: header.vocab,
        train: header.train,
        best_metric: header.best_metric,
        tensors,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(checkpoint)?).map_err(|e| Error::io(path, e))
}

/// Loads and checks that the tensors match the layout implied by the stored
/// encoder config.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let checkpoint = decode(&bytes)?;
    checkpoint.encoder.validate()?;
    if checkpoint.vocab.len() != checkpoint.encoder.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but the encoder expects {}",
            checkpoint.vocab.len(),
            checkpoint.encoder.vocab_size
        )));
    }
    expected_layout(&checkpoint.encoder)?.check_layout(&checkpoint.tensors)?;
    Ok(checkpoint)
}

/// Loads and checks the tensors against a caller-supplied config.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &EncoderConfig) -> Result<Checkpoint> {
    let checkpoint = load_checkpoint(path)?;
    expected_layout(expected)?.check_layout(&checkpoint.tensors)?;
    Ok(checkpoint)
}

fn expected_layout(config: &EncoderConfig) -> Result<ParamSet> {
    Ok(EncoderParams::init(config)?.tensors)
}
