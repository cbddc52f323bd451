//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "OSCXRCK1"
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (CheckpointMeta)
//! n_tensors    u32
//! per tensor:
//!   name_len   u16, then name bytes (UTF-8)
//!   ndim       u8, then ndim × u32 extents
//!   data       product(extents) × f32
//! checksum     u64 FNV-1a over every preceding byte
//! ```
//!
//! Tensors appear in [`ModelParams::named_tensors`] order. Loading rebuilds
//! the model spec from the header and rejects any name or shape mismatch.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use super::spec::{ModelSpec, Profile};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OSCXRCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub num_classes: usize,
    pub os_k: Option<usize>,
    pub seed: u64,
    pub profile: Profile,
    pub class_names: Vec<String>,
    pub running_stats_updated: bool,
}

impl CheckpointMeta {
    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::darkcovidnet(self.num_classes, self.os_k, self.profile)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams<f32>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let header = serde_json::to_vec(&CheckpointMeta {
            running_stats_updated: self.params.running_stats_updated,
            ..self.meta.clone()
        })
        .expect("checkpoint header serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let tensors = self.params.named_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("missing OSCXRCK1 magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Checkpoint("checksum mismatch (file corrupted)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let hlen = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let spec = meta.model_spec()?;
        let mut params = ModelParams::<f32>::init(&spec, 0)?;
        params.running_stats_updated = meta.running_stats_updated;
        let count = r.u32()? as usize;
        let mut slots = params.named_tensors_mut();
        if count != slots.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {count}",
                slots.len()
            )));
        }
        for (name, slot) in slots.iter_mut() {
            let nlen = r.u16()? as usize;
            let got = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if got != name {
                return Err(Error::Checkpoint(format!("expected tensor {name}, found {got}")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {shape:?}, model expects {:?}",
                    slot.shape()
                )));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            **slot = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        }
        drop(slots);
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let meta = CheckpointMeta {
            num_classes: 3,
            os_k: Some(3),
            seed: 9,
            profile: Profile::DESK,
            class_names: vec!["COVID-19".into(), "Pneumonia".into(), "No-Findings".into()],
            running_stats_updated: false,
        };
        let spec = meta.model_spec().unwrap();
        let params = ModelParams::init(&spec, 9).unwrap();
        Checkpoint { meta, params }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn flipped_byte_is_detected() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
    }
}
