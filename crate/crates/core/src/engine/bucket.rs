//! Bucket-seal protocol.
//!
//! Every bucket starts with a 64-bit control word: committed byte count in
//! bits 0..=61, [`LINK_BIT`] once a successor bucket has been published, and
//! [`SEAL_BIT`] once the reducing worker has frozen it. The owner appends by
//! writing the payload past the committed length and then moving the committed
//! length with a CAS; the reducer seals with a fetch-or. Whichever CAS lands
//! first decides whether the payload is part of the sealed bucket or must stay
//! with its emitter.
//!
//! Both sides are written as explicit step machines so tests can drive every
//! interleaving of their atomic steps.

use crate::error::{Error, Result};
use crate::kv::{COMMITTED_MASK, CONTROL_LEN, LINK_BIT, SEAL_BIT};
use crate::rma::{Endpoint, Rank, WindowId};

/// Location of one bucket inside an owner's Key-Value window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BucketRef {
    pub owner: Rank,
    pub window: WindowId,
    /// Window offset of the control word.
    pub offset: u64,
    /// Total bytes including the control word.
    pub capacity: u64,
}

impl BucketRef {
    pub fn payload_capacity(&self) -> u64 {
        self.capacity - CONTROL_LEN
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AppendOutcome {
    Appended,
    /// The reducer sealed first; nothing was committed.
    Sealed,
    /// Not enough room; the caller must link a new bucket.
    Full,
}

#[derive(Clone, Copy, Debug)]
enum AppendState {
    Fetch,
    Write { cur: u64 },
    Commit { cur: u64 },
    Done(AppendOutcome),
}

/// One seal-aware append in progress. Only the bucket owner appends.
pub struct AppendOp<'a> {
    bucket: BucketRef,
    payload: &'a [u8],
    state: AppendState,
}

impl<'a> AppendOp<'a> {
    pub fn new(bucket: BucketRef, payload: &'a [u8]) -> Self {
        AppendOp {
            bucket,
            payload,
            state: AppendState::Fetch,
        }
    }

    /// Performs one remote operation; returns the outcome once decided.
    pub fn step(&mut self, ep: &Endpoint) -> Result<Option<AppendOutcome>> {
        let b = self.bucket;
        let len = self.payload.len() as u64;
        self.state = match self.state {
            AppendState::Fetch => {
                let cur = ep.atomic_fetch(b.owner, b.window, b.offset)?;
                decide(cur, len, &b).unwrap_or(AppendState::Write { cur })
            }
            AppendState::Write { cur } => {
                let committed = cur & COMMITTED_MASK;
                // Bytes past `committed` are invisible to the reducer until the
                // commit CAS succeeds.
                ep.put(
                    b.owner,
                    b.window,
                    b.offset + CONTROL_LEN + committed,
                    self.payload,
                )?;
                AppendState::Commit { cur }
            }
            AppendState::Commit { cur } => {
                let prior = ep.compare_and_swap(b.owner, b.window, b.offset, cur, cur + len)?;
                if prior == cur {
                    AppendState::Done(AppendOutcome::Appended)
                } else if prior & SEAL_BIT != 0 {
                    AppendState::Done(AppendOutcome::Sealed)
                } else {
                    return Err(Error::Protocol {
                        rank: b.owner,
                        window: b.window,
                        msg: format!(
                            "bucket control word moved from {cur:#x} to {prior:#x} under its owner"
                        ),
                    });
                }
            }
            AppendState::Done(o) => AppendState::Done(o),
        };
        Ok(match self.state {
            AppendState::Done(o) => Some(o),
            _ => None,
        })
    }
}

fn decide(cur: u64, len: u64, b: &BucketRef) -> Option<AppendState> {
    if cur & SEAL_BIT != 0 {
        Some(AppendState::Done(AppendOutcome::Sealed))
    } else if cur & LINK_BIT != 0 || (cur & COMMITTED_MASK) + len > b.payload_capacity() {
        Some(AppendState::Done(AppendOutcome::Full))
    } else {
        None
    }
}

/// Appends `payload` (whole encoded records) to `bucket` unless it is sealed.
/// The caller must hold an epoch on the bucket's window.
pub fn seal_aware_append(
    ep: &Endpoint,
    bucket: BucketRef,
    payload: &[u8],
) -> Result<AppendOutcome> {
    let mut op = AppendOp::new(bucket, payload);
    loop {
        if let Some(o) = op.step(ep)? {
            return Ok(o);
        }
    }
}

/// Snapshot returned by sealing a bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sealed {
    pub committed: u64,
    pub linked: bool,
}

#[derive(Clone, Copy, Debug)]
enum SealState {
    Fetch,
    Cas { cur: u64 },
    Done(u64),
}

/// fetch-or(SEAL) written as its CAS retry loop.
pub struct SealOp {
    bucket: BucketRef,
    state: SealState,
}

impl SealOp {
    pub fn new(bucket: BucketRef) -> Self {
        SealOp {
            bucket,
            state: SealState::Fetch,
        }
    }

    pub fn step(&mut self, ep: &Endpoint) -> Result<Option<Sealed>> {
        let b = self.bucket;
        self.state = match self.state {
            SealState::Fetch => {
                let cur = ep.atomic_fetch(b.owner, b.window, b.offset)?;
                if cur & SEAL_BIT != 0 {
                    SealState::Done(cur)
                } else {
                    SealState::Cas { cur }
                }
            }
            SealState::Cas { cur } => {
                let prior =
                    ep.compare_and_swap(b.owner, b.window, b.offset, cur, cur | SEAL_BIT)?;
                if prior == cur || prior & SEAL_BIT != 0 {
                    SealState::Done(prior)
                } else {
                    SealState::Cas { cur: prior }
                }
            }
            SealState::Done(v) => SealState::Done(v),
        };
        Ok(match self.state {
            SealState::Done(prior) => Some(Sealed {
                committed: prior & COMMITTED_MASK,
                linked: prior & LINK_BIT != 0,
            }),
            _ => None,
        })
    }
}

/// Seals `bucket` and returns the frozen committed length.
pub fn seal_bucket(ep: &Endpoint, bucket: BucketRef) -> Result<Sealed> {
    let prior = ep.fetch_or(bucket.owner, bucket.window, bucket.offset, SEAL_BIT)?;
    Ok(Sealed {
        committed: prior & COMMITTED_MASK,
        linked: prior & LINK_BIT != 0,
    })
}

/// Marks `bucket` as having a published successor. Fails (returns false) if
/// the bucket was sealed first; records for it then stay with the emitter.
pub fn link_bucket(ep: &Endpoint, bucket: BucketRef) -> Result<bool> {
    let mut cur = ep.atomic_fetch(bucket.owner, bucket.window, bucket.offset)?;
    loop {
        if cur & SEAL_BIT != 0 {
            return Ok(false);
        }
        let prior = ep.compare_and_swap(
            bucket.owner,
            bucket.window,
            bucket.offset,
            cur,
            cur | LINK_BIT,
        )?;
        if prior == cur {
            return Ok(true);
        }
        cur = prior;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::{encode_into, iterate_records};
    use crate::rma::{Fabric, LockKind};
    use proptest::prelude::*;

    const KV: WindowId = WindowId(1);

    fn setup(capacity: u64) -> (std::sync::Arc<Fabric>, BucketRef) {
        let f = Fabric::new(2);
        f.endpoint(0).create_window(KV, capacity).unwrap();
        let b = BucketRef {
            owner: 0,
            window: KV,
            offset: 0,
            capacity,
        };
        (f, b)
    }

    fn payload(n: usize) -> Vec<u8> {
        let mut p = Vec::new();
        for i in 0..n {
            encode_into(format!("k{i}").as_bytes(), &[i as u8; 3], &mut p).unwrap();
        }
        p
    }

    #[test]
    fn append_to_fresh_bucket() {
        let (f, b) = setup(256);
        let ep = f.endpoint(0);
        ep.lock(0, KV, LockKind::Shared).unwrap();
        let p = payload(2);
        assert_eq!(
            seal_aware_append(&ep, b, &p).unwrap(),
            AppendOutcome::Appended
        );
        assert_eq!(ep.atomic_fetch(0, KV, 0).unwrap(), p.len() as u64);
        assert_eq!(
            seal_aware_append(&ep, b, &p).unwrap(),
            AppendOutcome::Appended
        );
        assert_eq!(ep.atomic_fetch(0, KV, 0).unwrap(), 2 * p.len() as u64);
        let big = payload(40);
        assert_eq!(
            seal_aware_append(&ep, b, &big).unwrap(),
            AppendOutcome::Full
        );
        ep.unlock(0, KV).unwrap();
    }

    #[test]
    fn sealed_bucket_rejects_and_link_fails() {
        let (f, b) = setup(256);
        let owner = f.endpoint(0);
        let reducer = f.endpoint(1);
        owner.lock(0, KV, LockKind::Shared).unwrap();
        let p = payload(1);
        seal_aware_append(&owner, b, &p).unwrap();
        let s = seal_bucket(&reducer, b).unwrap();
        assert_eq!(s.committed, p.len() as u64);
        assert!(!s.linked);
        assert_eq!(
            seal_aware_append(&owner, b, &p).unwrap(),
            AppendOutcome::Sealed
        );
        assert!(!link_bucket(&owner, b).unwrap());
        // sealing again observes the same frozen length
        assert_eq!(seal_bucket(&reducer, b).unwrap(), s);
        owner.unlock(0, KV).unwrap();
    }

    #[test]
    fn linked_bucket_is_full_and_seal_reports_link() {
        let (f, b) = setup(256);
        let ep = f.endpoint(0);
        ep.lock(0, KV, LockKind::Shared).unwrap();
        assert!(link_bucket(&ep, b).unwrap());
        assert_eq!(
            seal_aware_append(&ep, b, &payload(1)).unwrap(),
            AppendOutcome::Full
        );
        assert!(seal_bucket(&ep, b).unwrap().linked);
        ep.unlock(0, KV).unwrap();
    }

    /// Every interleaving of a sequence of appends (owner) with one seal
    /// (reducer): each append is either fully inside the sealed length or
    /// reported Sealed, and the sealed bytes decode to exactly the appended
    /// payloads.
    fn explore(prefix: &[bool], appends: usize, results: &mut usize) {
        let (f, b) = setup(4096);
        let owner = f.endpoint(0);
        let reducer = f.endpoint(1);
        owner.lock(0, KV, LockKind::Shared).unwrap();
        reducer.lock(0, KV, LockKind::Shared).unwrap();

        let payloads: Vec<Vec<u8>> = (0..appends).map(|i| payload(i + 1)).collect();
        let mut outcomes = Vec::new();
        let mut current: Option<AppendOp> = None;
        let mut next_payload = 0;
        let mut seal = SealOp::new(b);
        let mut sealed = None;
        let mut schedule = prefix.iter().copied();
        let mut taken = Vec::new();
        loop {
            let owner_done = next_payload == appends && current.is_none();
            let seal_done = sealed.is_some();
            if owner_done && seal_done {
                break;
            }
            let pick_owner = if owner_done {
                false
            } else if seal_done {
                true
            } else {
                match schedule.next() {
                    Some(c) => c,
                    None => {
                        // branch: record both continuations
                        let mut a = taken.clone();
                        a.push(true);
                        explore(&a, appends, results);
                        let mut c = taken.clone();
                        c.push(false);
                        explore(&c, appends, results);
                        return;
                    }
                }
            };
            if !owner_done && !seal_done {
                taken.push(pick_owner);
            }
            if pick_owner {
                if current.is_none() {
                    current = Some(AppendOp::new(b, &payloads[next_payload]));
                    next_payload += 1;
                }
                if let Some(o) = current.as_mut().unwrap().step(&owner).unwrap() {
                    outcomes.push(o);
                    current = None;
                }
            } else if let Some(s) = seal.step(&reducer).unwrap() {
                sealed = Some(s);
            }
        }
        let s = sealed.unwrap();
        let appended: Vec<u8> = payloads
            .iter()
            .zip(&outcomes)
            .filter(|(_, o)| **o == AppendOutcome::Appended)
            .flat_map(|(p, _)| p.clone())
            .collect();
        for o in &outcomes {
            assert_ne!(*o, AppendOutcome::Full);
        }
        // appended ones form a prefix: once sealed, nothing more lands
        let first_sealed = outcomes.iter().position(|o| *o == AppendOutcome::Sealed);
        if let Some(i) = first_sealed {
            assert!(outcomes[i..].iter().all(|o| *o == AppendOutcome::Sealed));
        }
        assert_eq!(s.committed, appended.len() as u64);
        let bytes = reducer.get(0, KV, CONTROL_LEN, s.committed).unwrap();
        assert_eq!(bytes, appended);
        let expected_records: usize = (0..appends)
            .filter(|&i| outcomes[i] == AppendOutcome::Appended)
            .map(|i| i + 1)
            .sum();
        assert_eq!(
            iterate_records(&bytes, bytes.len()).count(),
            expected_records
        );
        *results += 1;
    }

    proptest! {
        /// Random schedules with Full outcomes allowed: the control word never
        /// exceeds capacity, the committed bytes always decode, and sealing
        /// freezes the length.
        #[test]
        fn random_schedules_keep_bucket_invariants(
            sizes in prop::collection::vec(1usize..6, 1..12),
            capacity in 24u64..512,
            schedule in prop::collection::vec(any::<bool>(), 0..200),
        ) {
            let capacity = capacity / 8 * 8;
            let (f, b) = setup(capacity);
            let owner = f.endpoint(0);
            let reducer = f.endpoint(1);
            owner.lock(0, KV, LockKind::Shared).unwrap();
            reducer.lock(0, KV, LockKind::Shared).unwrap();
            let payloads: Vec<Vec<u8>> = sizes.iter().map(|&n| payload(n)).collect();
            let mut next = 0;
            let mut current: Option<AppendOp> = None;
            let mut seal = SealOp::new(b);
            let mut sealed: Option<Sealed> = None;
            let mut picks = schedule.into_iter().chain(std::iter::repeat(true));
            while next < payloads.len() || current.is_some() || sealed.is_none() {
                let owner_turn = (next < payloads.len() || current.is_some())
                    && (sealed.is_some() || picks.next().unwrap());
                if owner_turn {
                    if current.is_none() {
                        current = Some(AppendOp::new(b, &payloads[next]));
                        next += 1;
                    }
                    if current.as_mut().unwrap().step(&owner).unwrap().is_some() {
                        current = None;
                    }
                } else if let Some(s) = seal.step(&reducer).unwrap() {
                    sealed = Some(s);
                }
                let w = owner.atomic_fetch(0, KV, 0).unwrap();
                let committed = w & COMMITTED_MASK;
                prop_assert!(committed <= b.payload_capacity());
                let bytes = reducer.get(0, KV, CONTROL_LEN, committed).unwrap();
                prop_assert!(iterate_records(&bytes, bytes.len()).all(|r| r.is_ok()));
                if let Some(s) = sealed {
                    prop_assert!(w & SEAL_BIT != 0);
                    prop_assert_eq!(committed, s.committed);
                }
            }
        }
    }

    #[test]
    fn exhaustive_append_seal_interleavings() {
        for appends in 1..=3 {
            let mut n = 0;
            explore(&[], appends, &mut n);
            assert!(n > 2 * appends, "explored only {n} schedules");
        }
    }
}
