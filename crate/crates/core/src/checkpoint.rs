//! Binary checkpoints. All integers and floats are little-endian:
//!
//! ```text
//! magic    8 bytes  "AGCNCKPT"
//! version  u32      1
//! config   u32 length + UTF-8 TOML
//! stats    u32 count, then count × (mean f64, std f64)
//! params   u32 count, then per tensor:
//!            u32 name length + UTF-8 name
//!            u32 ndim, ndim × u64 dims
//!            prod(dims) × f64 values, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::model::AgcNet;

pub const MAGIC: &[u8; 8] = b"AGCNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    pub stats: NormalizationStats,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_net(net: &AgcNet, config: &RunConfig, stats: &NormalizationStats) -> Self {
        let tensors = net
            .registry()
            .entries()
            .iter()
            .map(|e| TensorRecord {
                name: e.name.clone(),
                shape: e.shape.clone(),
                values: net.params()[e.range()].to_vec(),
            })
            .collect();
        Self {
            config_toml: config.to_toml(),
            stats: stats.clone(),
            tensors,
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml_str(&self.config_toml)
    }

    /// Copy the stored tensors into `net`, which must have the same registry.
    pub fn restore_into(&self, net: &mut AgcNet) -> Result<()> {
        let entries = net.registry().entries().to_vec();
        if entries.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                entries.len()
            )));
        }
        for (e, t) in entries.iter().zip(&self.tensors) {
            if e.name != t.name || e.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match model tensor `{}` {:?}",
                    t.name, t.shape, e.name, e.shape
                )));
            }
        }
        let params = net.params_mut();
        for (e, t) in entries.iter().zip(&self.tensors) {
            params[e.range()].copy_from_slice(&t.values);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config_toml);
        put_u32(&mut out, self.stats.mean.len());
        for (m, s) in self.stats.mean.iter().zip(&self.stats.std) {
            out.extend_from_slice(&m.to_le_bytes());
            out.extend_from_slice(&s.to_le_bytes());
        }
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            put_u32(&mut out, t.shape.len());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_toml = r.string()?;
        let n_stats = r.u32()? as usize;
        let mut stats = NormalizationStats {
            mean: Vec::with_capacity(n_stats),
            std: Vec::with_capacity(n_stats),
        };
        for _ in 0..n_stats {
            stats.mean.push(r.f64()?);
            stats.std.push(r.f64()?);
        }
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<usize>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` too large")))?;
            if len > r.remaining() / 8 {
                return Err(Error::Checkpoint(format!("tensor `{name}` truncated")));
            }
            let values = (0..len).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
            tensors.push(TensorRecord { name, shape, values });
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            config_toml,
            stats,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("length fits in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
