use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, NetConfig};
use crate::autodiff::{ParamSet, Tensor};
use crate::error::{bail, Error, Result};
use crate::features::NormStats;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSDX";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub steps: u64,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Serialized network: config, feature normalization, weights as f32 and
/// training metadata.
///
/// Layout, all integers little-endian: magic, `u32` version, `u32`-length
/// config JSON, `u32` bin count followed by mean and variance of the three
/// spatial features and the epsilon as f64, `u32`-length metadata JSON,
/// `u32` tensor count, then per tensor a `u32`-length UTF-8 name, `u32`
/// rank, `u32` dims and f32 data. Tensors are stored in lexicographic name
/// order, so the encoding of a given checkpoint is unique.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub stats: NormStats,
    pub meta: TrainingMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn incompatible(msg: impl Into<String>) -> Error {
    Error::Compatibility(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| incompatible(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_prefixed(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len());
    out.extend_from_slice(b);
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: TrainingMeta) -> Self {
        let params = model.params();
        let tensors = params
            .names()
            .iter()
            .zip(params.values())
            .map(|(n, t)| (n.clone(), t.map(|v| v as f32 as f64)))
            .collect();
        Self {
            config: model.config().clone(),
            stats: model.stats().clone(),
            meta,
            tensors,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut params = ParamSet::new();
        for (name, t) in &self.tensors {
            params.insert(name.clone(), t.clone())?;
        }
        Model::from_parts(self.config.clone(), self.stats.clone(), params)
    }

    /// Fails unless the checkpoint was built for `n_sectors`.
    pub fn require_sectors(&self, n_sectors: usize) -> Result<()> {
        if self.config.n_sectors != n_sectors {
            bail!(
                Compatibility,
                "checkpoint built for {} sectors, {n_sectors} requested",
                self.config.n_sectors
            );
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_bytes(&mut out, &serde_json::to_vec(&self.config).map_err(|e| Error::Format(e.to_string()))?);
        let bins = self.stats.bins();
        put_u32(&mut out, bins);
        for k in 0..3 {
            for v in self.stats.mean[k].iter().chain(&self.stats.var[k]) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.stats.eps.to_le_bytes());
        put_bytes(&mut out, &serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?);
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(incompatible("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            bail!(Compatibility, "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}");
        }
        let config: NetConfig = serde_json::from_slice(r.len_prefixed()?)
            .map_err(|e| incompatible(format!("config block: {e}")))?;
        let bins = r.u32()? as usize;
        if bins != config.bins() {
            bail!(Compatibility, "stats cover {bins} bins, config implies {}", config.bins());
        }
        let mut mean: [Vec<f64>; 3] = Default::default();
        let mut var: [Vec<f64>; 3] = Default::default();
        for k in 0..3 {
            mean[k] = (0..bins).map(|_| r.f64()).collect::<Result<_>>()?;
            var[k] = (0..bins).map(|_| r.f64()).collect::<Result<_>>()?;
        }
        let eps = r.f64()?;
        let stats = NormStats { mean, var, eps };
        let meta: TrainingMeta = serde_json::from_slice(r.len_prefixed()?)
            .map_err(|e| incompatible(format!("metadata block: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let name = std::str::from_utf8(r.len_prefixed()?)
                .map_err(|_| incompatible("tensor name is not UTF-8"))?
                .to_string();
            if last.as_ref().is_some_and(|l| *l >= name) {
                bail!(Compatibility, "tensor {name} out of canonical order");
            }
            let rank = r.u32()? as usize;
            if rank > 8 {
                bail!(Compatibility, "tensor {name} has rank {rank}");
            }
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| incompatible(format!("tensor {name} size overflows")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| incompatible("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.insert(name.clone(), Tensor::new(&dims, data)?);
            last = Some(name);
        }
        if r.pos != buf.len() {
            bail!(Compatibility, "{} trailing bytes after checkpoint", buf.len() - r.pos);
        }
        let ck = Self {
            config,
            stats,
            meta,
            tensors,
        };
        ck.to_model()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
