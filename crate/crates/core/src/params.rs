//! Named parameter tree.
//!
//! Names are dot-separated paths (`k_estimator.dec1.deconv.weight`). The
//! first segment identifies the top-level module and is used for the
//! per-module breakdown.

use std::collections::BTreeMap;

use crate::autodiff::RunningStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimiser.
    Learnable,
    /// Part of the model but held fixed (e.g. fixed-threshold ablation).
    Frozen,
    /// Non-learned state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), ParamEntry { value, kind });
        debug_assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn learnable_names(&self) -> impl Iterator<Item = &str> {
        self.iter()
            .filter(|(_, e)| e.kind == ParamKind::Learnable)
            .map(|(n, _)| n)
    }

    /// Number of learnable scalars.
    pub fn count(&self) -> usize {
        self.iter()
            .filter(|(_, e)| e.kind == ParamKind::Learnable)
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    /// Learnable scalars grouped by top-level module name.
    pub fn breakdown(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, e) in self.iter().filter(|(_, e)| e.kind == ParamKind::Learnable) {
            let module = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(module).or_insert(0) += e.value.numel();
        }
        out
    }

    pub fn running_stats(&self, prefix: &str) -> Result<RunningStats> {
        Ok(RunningStats {
            mean: self.value(&format!("{prefix}.running_mean"))?.data().to_vec(),
            var: self.value(&format!("{prefix}.running_var"))?.data().to_vec(),
        })
    }

    pub fn set_running_stats(&mut self, prefix: &str, stats: &RunningStats) -> Result<()> {
        self.value_mut(&format!("{prefix}.running_mean"))?
            .data_mut()
            .copy_from_slice(&stats.mean);
        self.value_mut(&format!("{prefix}.running_var"))?
            .data_mut()
            .copy_from_slice(&stats.var);
        Ok(())
    }

    /// FNV-1a digest over names and raw bits of every entry.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, e) in self.iter() {
            feed(name.as_bytes());
            for v in e.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Checks that `other` has exactly the same names, kinds and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, e) in self.iter() {
            let o = other
                .entries
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
            if o.value.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    e.value.shape(),
                    o.value.shape()
                )));
            }
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_excludes_buffers_and_frozen() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::zeros(&[3, 4]), ParamKind::Learnable);
        s.insert("a.th", Tensor::zeros(&[1]), ParamKind::Frozen);
        s.insert("b.bn.running_mean", Tensor::zeros(&[4]), ParamKind::Buffer);
        s.insert("b.w", Tensor::zeros(&[5]), ParamKind::Learnable);
        assert_eq!(s.count(), 17);
        let bd = s.breakdown();
        assert_eq!(bd["a"], 12);
        assert_eq!(bd["b"], 5);
        assert_eq!(bd.values().sum::<usize>(), s.count());
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2]), ParamKind::Learnable);
        let h0 = s.fingerprint();
        s.value_mut("w").unwrap().data_mut()[1] = 1.0;
        assert_ne!(h0, s.fingerprint());
    }
}
