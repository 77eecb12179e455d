//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "GRAN"  u32 version  u32 blob_len  blob (canonical key-value text)
//! u32 tensor_count
//!   per tensor: u32 name_len, name bytes, 4 × u32 dims, dims-product × f32
//! optional optimizer section:
//!   "ADAM"  u64 step  u32 count  tensors (first moments)  u32 count  tensors (second moments)
//! ```

use std::path::Path;

use super::{Model, NetConfig};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{numel, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GRAN";
const OPT_MAGIC: &[u8; 4] = b"ADAM";

/// Adam moments in parameter order plus the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor<f32>>,
    pub second: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, optimizer: Option<OptimizerState>) -> Self {
        Self {
            config: model.config.clone(),
            tensors: model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer,
        }
    }

    pub fn into_model(self) -> Result<Model<f32>> {
        let mut store = ParamStore::new();
        for (name, t) in self.tensors {
            store.add(name, t)?;
        }
        Model::from_params(&self.config, store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let blob = self.config.to_kv().render();
        put_u32(&mut out, blob.len() as u32);
        out.extend_from_slice(blob.as_bytes());
        put_tensors(&mut out, self.tensors.iter().map(|(n, t)| (n.as_str(), t)));
        if let Some(opt) = &self.optimizer {
            out.extend_from_slice(OPT_MAGIC);
            out.extend_from_slice(&opt.step.to_le_bytes());
            for moments in [&opt.first, &opt.second] {
                put_tensors(&mut out, self.tensors.iter().zip(moments.iter()).map(|((n, _), m)| (n.as_str(), m)));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic, not a GRAN checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let blob_len = r.u32("config length")? as usize;
        let blob = std::str::from_utf8(r.take(blob_len, "config")?)
            .map_err(|_| Error::Format("config blob is not UTF-8".into()))?;
        let mut kv = KeyValues::parse(blob)?;
        let config = NetConfig::from_kv(&mut kv)?;
        kv.finish("checkpoint")?;
        let tensors = r.tensors()?;

        let optimizer = if r.remaining() == 0 {
            None
        } else {
            if r.take(4, "optimizer magic")? != OPT_MAGIC {
                return Err(Error::Format("unexpected trailing data after tensors".into()));
            }
            let step = u64::from_le_bytes(r.take(8, "optimizer step")?.try_into().expect("8 bytes"));
            let first = r.tensors()?;
            let second = r.tensors()?;
            for moments in [&first, &second] {
                if moments.len() != tensors.len()
                    || moments.iter().zip(&tensors).any(|((mn, mt), (n, t))| mn != n || mt.shape() != t.shape())
                {
                    return Err(Error::shape("checkpoint", "optimizer moments do not match parameters"));
                }
            }
            if r.remaining() != 0 {
                return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
            }
            Some(OptimizerState {
                step,
                first: first.into_iter().map(|(_, t)| t).collect(),
                second: second.into_iter().map(|(_, t)| t).collect(),
            })
        };
        Ok(Self { config, tensors, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors<'a>(out: &mut Vec<u8>, tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<f32>)>) {
    put_u32(out, tensors.len() as u32);
    for (name, t) in tensors {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        for d in t.shape() {
            put_u32(out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32("tensor count")? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = self.u32("tensor name length")? as usize;
            let name = String::from_utf8(self.take(len, "tensor name")?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = self.u32("tensor dims")? as usize;
            }
            let n = numel(shape);
            let raw = self.take(n.checked_mul(4).ok_or(Error::Truncated("tensor data"))?, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}
