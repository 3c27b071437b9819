//! Reduce tables, sorted runs and the Combine merge tree.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kv::{self, FnvBuildHasher};
use crate::rma::Rank;
use crate::usecase::UseCase;

/// In-memory key → value table used by Local Reduce and Reduce.
#[derive(Default)]
pub struct ReduceTable {
    map: HashMap<Box<[u8]>, Vec<u8>, FnvBuildHasher>,
}

impl ReduceTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Folds `(key, value)` into the table with `uc.reduce_local`.
    pub fn insert_local(&mut self, uc: &dyn UseCase, key: &[u8], value: &[u8]) {
        match self.map.get_mut(key) {
            Some(acc) => uc.reduce_local(key, acc, value),
            None => {
                self.map.insert(key.into(), value.to_vec());
            }
        }
    }

    /// Folds `(key, value)` into the table with `uc.reduce`.
    pub fn insert(&mut self, uc: &dyn UseCase, key: &[u8], value: &[u8]) {
        match self.map.get_mut(key) {
            Some(acc) => uc.reduce(key, acc, value),
            None => {
                self.map.insert(key.into(), value.to_vec());
            }
        }
    }

    /// Decodes a record stream and folds every record in.
    pub fn fold_stream(&mut self, uc: &dyn UseCase, bytes: &[u8]) -> Result<usize> {
        let mut n = 0;
        for r in kv::iterate_records(bytes, bytes.len()) {
            let r = r?;
            self.insert(uc, r.key, r.value);
            n += 1;
        }
        Ok(n)
    }

    pub fn drain(&mut self) -> impl Iterator<Item = (Box<[u8]>, Vec<u8>)> + '_ {
        self.map.drain()
    }

    pub fn get(&self, key: &[u8]) -> Option<&[u8]> {
        self.map.get(key).map(|v| v.as_slice())
    }

    /// Sorts the table by key into an encoded run.
    pub fn into_run(self) -> Result<Vec<u8>> {
        let mut entries: Vec<_> = self.map.into_iter().collect();
        entries.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        let total: usize = entries.iter().map(|(k, v)| kv::encoded_len(k, v)).sum();
        let mut out = Vec::with_capacity(total);
        for (k, v) in entries {
            kv::encode_into(&k, &v, &mut out)?;
        }
        Ok(out)
    }
}

/// Checks that a run's keys are strictly ascending; returns its record count.
pub fn scan_run(run: &[u8]) -> Result<usize> {
    let mut prev: Option<&[u8]> = None;
    let mut n = 0;
    let mut at = 0;
    while at < run.len() {
        let (r, next) = kv::decode_record(run, at)?;
        if let Some(p) = prev {
            if p >= r.key {
                return Err(Error::Corruption {
                    offset: at,
                    msg: "run keys are not strictly ascending".into(),
                });
            }
        }
        prev = Some(r.key);
        n += 1;
        at = next;
    }
    Ok(n)
}

/// Merges two sorted, duplicate-free runs; equal keys are combined with
/// `uc.reduce`.
pub fn merge_runs(a: &[u8], b: &[u8], uc: &dyn UseCase) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    let mut acc = Vec::new();
    while i < a.len() && j < b.len() {
        let (ra, na) = kv::decode_record(a, i)?;
        let (rb, nb) = kv::decode_record(b, j)?;
        match ra.key.cmp(rb.key) {
            std::cmp::Ordering::Less => {
                out.extend_from_slice(&a[i..na]);
                i = na;
            }
            std::cmp::Ordering::Greater => {
                out.extend_from_slice(&b[j..nb]);
                j = nb;
            }
            std::cmp::Ordering::Equal => {
                acc.clear();
                acc.extend_from_slice(ra.value);
                uc.reduce(ra.key, &mut acc, rb.value);
                kv::encode_into(ra.key, &acc, &mut out)?;
                i = na;
                j = nb;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    Ok(out)
}

/// Number of Combine levels for `num_workers` ranks: ⌈log₂P⌉ + 1.
pub fn combine_levels(num_workers: usize) -> usize {
    assert!(num_workers >= 1);
    num_workers.next_power_of_two().trailing_zeros() as usize + 1
}

/// What a rank does at one Combine level (≥ 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombineRole {
    /// Fetch `partner`'s run and merge it into ours.
    Merge { partner: Rank },
    /// No partner at this level; our run moves up unchanged.
    PassThrough,
    /// Publish our run for `parent` and leave the tree.
    Exit { parent: Rank },
    /// Already left at an earlier level.
    Gone,
}

pub fn combine_role(rank: Rank, num_workers: usize, level: usize) -> CombineRole {
    assert!(level >= 1 && rank < num_workers);
    let exit_level = if rank == 0 {
        usize::MAX
    } else {
        rank.trailing_zeros() as usize + 1
    };
    if level > exit_level {
        return CombineRole::Gone;
    }
    let half = 1usize << (level - 1);
    if level == exit_level {
        return CombineRole::Exit {
            parent: rank - half,
        };
    }
    let partner = rank + half;
    if partner < num_workers {
        CombineRole::Merge { partner }
    } else {
        CombineRole::PassThrough
    }
}

/// Level at which `rank` publishes its final run (the top level for rank 0).
pub fn exit_level(rank: Rank, num_workers: usize) -> usize {
    if rank == 0 {
        combine_levels(num_workers) - 1
    } else {
        rank.trailing_zeros() as usize + 1
    }
}
