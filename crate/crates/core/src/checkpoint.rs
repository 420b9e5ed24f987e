//! Binary checkpoint format shared by classifiers, decoders and detectors.
//!
//! All integers are little-endian `u32`, all values little-endian `f64`.
//!
//! ```text
//! magic          8 bytes  "ADVLABCK"
//! version        u32      currently 1
//! record kind    u32      0 classifier, 1 decoder, 2 lid detector
//! input rank     u32      followed by that many u32 dimensions
//! layer count    u32      followed by one entry per layer:
//!                           u8 tag, then u32 fields
//!                           0 flatten
//!                           1 dense   inputs outputs
//!                           2 conv    in_channels out_channels kernel same(0|1)
//!                           3 relu    4 sigmoid    5 max_pool2
//! metadata len   u32      followed by a UTF-8 JSON object
//! tensor count   u32      followed by one entry per tensor:
//!                           u32 rank, u32 dims, then f64 values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use advlab_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::model::{Classifier, Layer, Network};

pub const MAGIC: &[u8; 8] = b"ADVLABCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (this build reads version {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown layer tag {0}")]
    UnknownLayer(u8),
    #[error("unknown record kind {0}")]
    UnknownKind(u32),
    #[error("expected a {expected:?} record, found {found:?}")]
    WrongKind { expected: RecordKind, found: RecordKind },
    #[error("metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("missing checkpoint {0}")]
    Missing(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordKind {
    Classifier,
    Decoder,
    LidDetector,
}

impl RecordKind {
    fn code(self) -> u32 {
        match self {
            RecordKind::Classifier => 0,
            RecordKind::Decoder => 1,
            RecordKind::LidDetector => 2,
        }
    }

    fn from_code(c: u32) -> std::result::Result<Self, CheckpointError> {
        match c {
            0 => Ok(RecordKind::Classifier),
            1 => Ok(RecordKind::Decoder),
            2 => Ok(RecordKind::LidDetector),
            other => Err(CheckpointError::UnknownKind(other)),
        }
    }
}

/// Training provenance stored alongside parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub epochs: usize,
    pub seed: u64,
    pub adversarial: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: RecordKind,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub metadata: Metadata,
    pub tensors: Vec<Tensor>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend((v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.at + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(self.bytes.len()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn usize(&mut self) -> std::result::Result<usize, CheckpointError> {
        self.u32().map(|v| v as usize)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, VERSION as usize);
        put_u32(&mut out, self.kind.code() as usize);
        put_u32(&mut out, self.input_shape.len());
        for &d in &self.input_shape {
            put_u32(&mut out, d);
        }
        put_u32(&mut out, self.layers.len());
        for l in &self.layers {
            match *l {
                Layer::Flatten => out.push(0),
                Layer::Dense { inputs, outputs } => {
                    out.push(1);
                    put_u32(&mut out, inputs);
                    put_u32(&mut out, outputs);
                }
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    same,
                } => {
                    out.push(2);
                    for v in [in_channels, out_channels, kernel, same as usize] {
                        put_u32(&mut out, v);
                    }
                }
                Layer::Relu => out.push(3),
                Layer::Sigmoid => out.push(4),
                Layer::MaxPool2 => out.push(5),
            }
        }
        let meta = serde_json::to_vec(&self.metadata).map_err(CheckpointError::from)?;
        put_u32(&mut out, meta.len());
        out.extend(meta);
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        let kind = RecordKind::from_code(r.u32()?)?;
        let rank = r.usize()?;
        let input_shape = (0..rank).map(|_| r.usize()).collect::<std::result::Result<Vec<_>, _>>()?;
        let nlayers = r.usize()?;
        let mut layers = Vec::with_capacity(nlayers.min(1024));
        for _ in 0..nlayers {
            let tag = r.take(1)?[0];
            layers.push(match tag {
                0 => Layer::Flatten,
                1 => Layer::Dense {
                    inputs: r.usize()?,
                    outputs: r.usize()?,
                },
                2 => Layer::Conv {
                    in_channels: r.usize()?,
                    out_channels: r.usize()?,
                    kernel: r.usize()?,
                    same: r.u32()? != 0,
                },
                3 => Layer::Relu,
                4 => Layer::Sigmoid,
                5 => Layer::MaxPool2,
                other => return Err(CheckpointError::UnknownLayer(other).into()),
            });
        }
        let mlen = r.usize()?;
        let metadata = serde_json::from_slice(r.take(mlen)?).map_err(CheckpointError::from)?;
        let ntensors = r.usize()?;
        let mut tensors = Vec::with_capacity(ntensors.min(1024));
        for _ in 0..ntensors {
            let rank = r.usize()?;
            let shape = (0..rank).map(|_| r.usize()).collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(bytes.len()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self {
            kind,
            input_shape,
            layers,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CheckpointError::Missing(path.to_path_buf()).into());
        }
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: RecordKind) -> Result<()> {
        if self.kind != kind {
            return Err(CheckpointError::WrongKind {
                expected: kind,
                found: self.kind,
            }
            .into());
        }
        Ok(())
    }

    pub fn from_network(kind: RecordKind, net: &Network, metadata: Metadata) -> Self {
        Self {
            kind,
            input_shape: net.input_shape.clone(),
            layers: net.layers.clone(),
            metadata,
            tensors: net.params.iter().map(|p| (**p).clone()).collect(),
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        Network::new(self.input_shape.clone(), self.layers.clone(), self.tensors.clone())
    }
}

impl Classifier {
    pub fn to_checkpoint(&self, metadata: Metadata) -> Checkpoint {
        Checkpoint::from_network(RecordKind::Classifier, &self.net, metadata)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(RecordKind::Classifier)?;
        Classifier::new(ck.to_network()?)
    }

    pub fn save(&self, path: &Path, metadata: Metadata) -> Result<()> {
        self.to_checkpoint(metadata).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Classifier::cnn(&[8, 8, 1], 10, 5).unwrap();
        let meta = Metadata {
            epochs: 3,
            seed: 5,
            adversarial: true,
            epsilon: Some(0.3),
            extra: BTreeMap::from([("note".to_string(), serde_json::json!("x"))]),
        };
        let ck = m.to_checkpoint(meta.clone());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let m2 = Classifier::from_checkpoint(&back).unwrap();
        for (a, b) in m.net.params.iter().zip(&m2.net.params) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.metadata, meta);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = Classifier::mlp(&[2, 2, 1], &[3], 2, 0).unwrap();
        let bytes = m.to_checkpoint(Metadata::default()).to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(b"NOTACKPT"),
            Err(Error::Checkpoint(CheckpointError::BadMagic))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(CheckpointError::Truncated(_)))
        ));
        let mut v2 = bytes.clone();
        v2[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(Error::Checkpoint(CheckpointError::UnsupportedVersion(9)))
        ));
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(ck.expect_kind(RecordKind::Decoder).is_err());
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/model.ckpt")),
            Err(Error::Checkpoint(CheckpointError::Missing(_)))
        ));
    }
}
