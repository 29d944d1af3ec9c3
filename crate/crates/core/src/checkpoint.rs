//! Binary checkpoint format.
//!
//! ```text
//! "SNNDHZ01"  count:u32
//! count × { name_len:u32  name:utf8  rank:u32  dims:u32×rank  data:f32×Π(dims) }
//! ```
//!
//! All integers and floats are little-endian. Besides model parameters the
//! file carries optimiser moments (`optim.m.<param>`, `optim.v.<param>`,
//! `optim.step`) and run metadata (`meta.epoch`, `meta.best_val_loss`).
//! Integer metadata is stored as the raw bits of two f32 words (low, high).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::Adam;

pub const MAGIC: &[u8; 8] = b"SNNDHZ01";

const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";
const OPTIM_STEP: &str = "optim.step";
const META_EPOCH: &str = "meta.epoch";
const META_BEST: &str = "meta.best_val_loss";

fn is_reserved(name: &str) -> bool {
    name.starts_with("optim.") || name.starts_with("meta.")
}

fn u64_tensor(v: u64) -> Tensor {
    Tensor::new(
        vec![2],
        vec![f32::from_bits(v as u32), f32::from_bits((v >> 32) as u32)],
    )
    .expect("two words")
}

fn tensor_u64(t: &Tensor) -> Result<u64> {
    match t.data() {
        [lo, hi] => Ok(lo.to_bits() as u64 | ((hi.to_bits() as u64) << 32)),
        _ => Err(Error::Checkpoint("malformed integer entry".into())),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Snapshot of parameters, buffers, optimiser state and run metadata.
    pub fn capture(params: &ParamStore, optimizer: Option<&Adam>, epoch: u64, best_val_loss: Option<f32>) -> Self {
        let mut entries: BTreeMap<String, Tensor> =
            params.iter().map(|(n, e)| (n.to_string(), e.value.clone())).collect();
        if let Some(opt) = optimizer {
            for (n, t) in &opt.m {
                entries.insert(format!("{OPTIM_M}{n}"), t.clone());
            }
            for (n, t) in &opt.v {
                entries.insert(format!("{OPTIM_V}{n}"), t.clone());
            }
            entries.insert(OPTIM_STEP.into(), u64_tensor(opt.step));
        }
        entries.insert(META_EPOCH.into(), u64_tensor(epoch));
        if let Some(b) = best_val_loss {
            entries.insert(META_BEST.into(), Tensor::new(vec![1], vec![b]).expect("one value"));
        }
        Self { entries }
    }

    /// Copies stored values into `params`; names and shapes must match.
    pub fn restore(&self, params: &mut ParamStore) -> Result<()> {
        let mut stored = ParamStore::new();
        for (n, t) in self.entries.iter().filter(|(n, _)| !is_reserved(n)) {
            stored.insert(n.clone(), t.clone(), crate::params::ParamKind::Buffer);
        }
        params.check_compatible(&stored)?;
        for (n, t) in self.entries.iter().filter(|(n, _)| !is_reserved(n)) {
            params.value_mut(n)?.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Restores optimiser moments into `opt` (hyperparameters untouched).
    pub fn restore_optimizer(&self, opt: &mut Adam) -> Result<bool> {
        let Some(step) = self.entries.get(OPTIM_STEP) else {
            return Ok(false);
        };
        opt.step = tensor_u64(step)?;
        opt.m.clear();
        opt.v.clear();
        for (n, t) in &self.entries {
            if let Some(p) = n.strip_prefix(OPTIM_M) {
                opt.m.insert(p.to_string(), t.clone());
            } else if let Some(p) = n.strip_prefix(OPTIM_V) {
                opt.v.insert(p.to_string(), t.clone());
            }
        }
        Ok(true)
    }

    pub fn epoch(&self) -> Result<u64> {
        self.entries.get(META_EPOCH).map(tensor_u64).unwrap_or(Ok(0))
    }

    pub fn best_val_loss(&self) -> Option<f32> {
        self.entries.get(META_BEST).map(|t| t.data()[0])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::Checkpoint("too many entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("{name}: dimension too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let count = read_u32(&mut r)?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > r.len() {
                return Err(Error::Checkpoint("truncated entry name".into()));
            }
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: truncated payload")))?;
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 4];
                read_exact(&mut r, &mut b)?;
                data.push(f32::from_le_bytes(b));
            }
            if entries.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate entry {name}")));
            }
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
