//! The decoupled engine.
//!
//! Window layout per rank:
//!
//! | id | window        | contents                                                  |
//! |----|---------------|-----------------------------------------------------------|
//! | 0  | status        | one [`WorkerStatus`] word                                 |
//! | 1  | key-value     | bucket chains, one per target rank, plus the stray chain  |
//! | 2  | combine       | sorted runs                                               |
//! | 3  | kv-disp       | `(disp, capacity)` per chain link, indexed by target      |
//! | 4  | combine-disp  | `(disp, len, level+1)` for run 0 and the published run    |
//!
//! Buckets live in the emitter's window. A reducer seals them remotely, reads
//! the frozen prefix and follows the chain while the `LINK` bit is set. Records
//! that lose the race against a seal stay with their emitter, in its stray
//! chain, and are folded into the emitter's own run.

use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::bucket::{link_bucket, seal_aware_append, seal_bucket, AppendOutcome, BucketRef};
use super::runs::{combine_levels, combine_role, merge_runs, scan_run, CombineRole, ReduceTable};
use super::tasks::{map_task, run_pipelined, tasks_for, TaskReader};
use super::{
    put_chunked, run_workers, summarize, EngineKind, Jitter, JobConfig, JobSummary, ResumePhase,
    RunTrace, WorkerOutput, WorkerStatus,
};
use crate::checkpoint::{
    self, open_storage_window, window_path, CheckpointWindows, ResumePoint, StorageWindow,
};
use crate::dataset::TaskDescriptor;
use crate::error::{Error, Result};
use crate::kv::{self, CONTROL_LEN, SEAL_BIT};
use crate::rma::{Endpoint, LockKind, Rank, WindowId};
use crate::usecase::{TaskInput, UseCase};

pub const STATUS: WindowId = WindowId(0);
pub const KV: WindowId = WindowId(1);
pub const COMBINE: WindowId = WindowId(2);
pub const KV_DISP: WindowId = WindowId(3);
pub const COMBINE_DISP: WindowId = WindowId(4);

/// Links per chain. Capacities at least double per link.
pub const MAX_CHAIN: u64 = 48;
const ENTRY_LEN: u64 = 16;
const RUN0_SLOT: u64 = 0;
const TOP_SLOT: u64 = 24;
const COMBINE_DISP_LEN: u64 = 48;
const MIN_BUCKET: u64 = 64;

pub const CHECKPOINT_WINDOWS: CheckpointWindows = CheckpointWindows {
    kv: KV,
    kv_disp: KV_DISP,
    combine: COMBINE,
    combine_disp: COMBINE_DISP,
};

/// Runs a job on the decoupled engine.
pub fn run_job(cfg: &JobConfig, uc: Arc<dyn UseCase>) -> Result<JobSummary> {
    cfg.validate()?;
    let reader = TaskReader::open(&cfg.filename, uc)?;
    let resume = checkpoint::recover_job(cfg, &CHECKPOINT_WINDOWS)?;
    if let Some(phase) = resume.phase {
        log::info!("resuming from checkpoint at {phase:?}");
    }
    let (fabric, outputs) = run_workers(cfg.num_workers, "dmr1s", |ep| {
        Worker::init(ep, cfg, &reader, &resume)?.run(&reader)
    })?;
    summarize(EngineKind::OneSided, cfg, reader.len(), &fabric, outputs)
}

/// Publishes `next` in the caller's status word. Status never moves backwards.
pub fn publish_status(
    ep: &Endpoint,
    current: Option<WorkerStatus>,
    next: WorkerStatus,
) -> Result<WorkerStatus> {
    if let Some(cur) = current {
        if cur >= next {
            return Err(Error::Usage(format!(
                "rank {} status may not move from {cur:?} to {next:?}",
                ep.rank()
            )));
        }
    }
    ep.atomic_replace(ep.rank(), STATUS, 0, next as u64)?;
    Ok(next)
}

/// Per-bucket capacity of the initial split of `bucket_size` across targets.
pub fn initial_bucket_capacity(bucket_size: u64, num_workers: usize) -> u64 {
    (bucket_size / num_workers as u64 / 8 * 8).max(MIN_BUCKET)
}

fn entry_offset(target: usize, link: u64) -> u64 {
    (target as u64 * MAX_CHAIN + link) * ENTRY_LEN
}

fn decode_words<const N: usize>(b: &[u8]) -> [u64; N] {
    std::array::from_fn(|i| u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap()))
}

fn encode_words(words: &[u64]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

#[derive(Clone, Copy, Debug)]
struct Chain {
    link: u64,
    tail: BucketRef,
    /// The target sealed this chain; further records stay local.
    sealed: bool,
}

struct Storage {
    /// Absent when resuming past Map.
    kv: Option<(StorageWindow, StorageWindow)>,
    combine: StorageWindow,
    combine_disp: StorageWindow,
}

impl Storage {
    fn set_phase(&self, s: WorkerStatus) {
        if let Some((kv, disp)) = &self.kv {
            kv.set_phase(s as u32);
            disp.set_phase(s as u32);
        }
        self.combine.set_phase(s as u32);
        self.combine_disp.set_phase(s as u32);
    }

    fn sync_combine(&self) -> Result<()> {
        self.combine.win_sync()?;
        self.combine_disp.win_sync()
    }
}

struct Worker<'a> {
    ep: &'a Endpoint,
    cfg: &'a JobConfig,
    uc: &'a dyn UseCase,
    rank: Rank,
    p: usize,
    status: Option<WorkerStatus>,
    /// Indexed by target; slot `p` is the stray chain.
    chains: Vec<Option<Chain>>,
    storage: Option<Storage>,
    resume: Option<ResumePhase>,
    completed: Vec<usize>,
    combine_used: u64,
    combine_initial: u64,
    jitter: Jitter,
    out: WorkerOutput,
}

impl<'a> Worker<'a> {
    fn init(
        ep: &'a Endpoint,
        cfg: &'a JobConfig,
        reader: &'a Arc<TaskReader>,
        resume: &ResumePoint,
    ) -> Result<Self> {
        let rank = ep.rank();
        let p = cfg.num_workers;
        let phase = resume.phase;
        let cap = initial_bucket_capacity(cfg.bucket_size, p);
        let kv_size = if phase.is_none() { cap * p as u64 } else { 0 };
        let disp_size = (p as u64 + 1) * MAX_CHAIN * ENTRY_LEN;

        ep.create_window(STATUS, 8)?;
        let mut storage = None;
        match &cfg.checkpoint {
            Some(ck) if phase != Some(ResumePhase::Done) || rank == 0 => {
                let dir = &ck.dir;
                let map_resume = phase == Some(ResumePhase::Map);
                let combine_resume = phase.is_some() && !map_resume;
                let open = |id, size, recover| {
                    open_storage_window(rank, id, size, &window_path(dir, rank, id), recover, p)
                };
                let s = if combine_resume {
                    // The Key-Value files are left as they are.
                    register_plain(ep, KV, 0)?;
                    register_plain(ep, KV_DISP, disp_size)?;
                    Storage {
                        kv: None,
                        combine: open(COMBINE, cfg.win_size, true)?,
                        combine_disp: open(COMBINE_DISP, COMBINE_DISP_LEN, true)?,
                    }
                } else {
                    let kv = open(KV, kv_size, map_resume)?;
                    let kv_disp = open(KV_DISP, disp_size, map_resume)?;
                    ep.register_window(kv.window().clone())?;
                    ep.register_window(kv_disp.window().clone())?;
                    Storage {
                        kv: Some((kv, kv_disp)),
                        combine: open(COMBINE, cfg.win_size, false)?,
                        combine_disp: open(COMBINE_DISP, COMBINE_DISP_LEN, false)?,
                    }
                };
                ep.register_window(s.combine.window().clone())?;
                ep.register_window(s.combine_disp.window().clone())?;
                storage = Some(s);
            }
            _ => {
                register_plain(ep, KV, kv_size)?;
                register_plain(ep, KV_DISP, disp_size)?;
                register_plain(ep, COMBINE, cfg.win_size)?;
                register_plain(ep, COMBINE_DISP, COMBINE_DISP_LEN)?;
            }
        }

        let mut w = Worker {
            ep,
            cfg,
            uc: reader.use_case().as_ref(),
            rank,
            p,
            status: None,
            chains: vec![None; p + 1],
            storage,
            resume: phase,
            completed: resume.completed.get(rank).cloned().unwrap_or_default(),
            combine_used: 0,
            combine_initial: cfg.win_size,
            jitter: Jitter::new(cfg.jitter, rank),
            out: WorkerOutput {
                resumed: phase,
                ..WorkerOutput::default()
            },
        };

        ep.lock(rank, KV_DISP, LockKind::Shared)?;
        match phase {
            None => {
                let mut table = Vec::with_capacity(p * 2);
                for t in 0..p {
                    let disp = t as u64 * cap;
                    table.extend([disp, cap]);
                    w.chains[t] = Some(Chain {
                        link: 0,
                        tail: BucketRef {
                            owner: rank,
                            window: KV,
                            offset: disp,
                            capacity: cap,
                        },
                        sealed: false,
                    });
                }
                for t in 0..p {
                    ep.put(
                        rank,
                        KV_DISP,
                        entry_offset(t, 0),
                        &encode_words(&table[t * 2..t * 2 + 2]),
                    )?;
                }
            }
            Some(ResumePhase::Map) => w.reopen_chains()?,
            Some(ResumePhase::Combine) => {
                ep.lock(rank, COMBINE_DISP, LockKind::Shared)?;
                ep.put(rank, COMBINE_DISP, TOP_SLOT, &[0u8; 24])?;
                ep.unlock(rank, COMBINE_DISP)?;
            }
            Some(ResumePhase::Done) => {}
        }
        ep.unlock(rank, KV_DISP)?;
        ep.lock(rank, COMBINE, LockKind::Exclusive)?;
        Ok(w)
    }

    /// Restored images may carry seals from the failed run; the whole Reduce
    /// is redone, so every link is reopened and the tails rediscovered.
    fn reopen_chains(&mut self) -> Result<()> {
        let ep = self.ep;
        ep.lock(self.rank, KV, LockKind::Shared)?;
        for t in 0..=self.p {
            let mut link = 0;
            loop {
                let [disp, cap] =
                    decode_words::<2>(&ep.get(self.rank, KV_DISP, entry_offset(t, link), 16)?);
                if cap == 0 {
                    break;
                }
                let b = BucketRef {
                    owner: self.rank,
                    window: KV,
                    offset: disp,
                    capacity: cap,
                };
                let word = ep.atomic_fetch(self.rank, KV, disp)?;
                if word & SEAL_BIT != 0 {
                    ep.atomic_replace(self.rank, KV, disp, word & !SEAL_BIT)?;
                }
                self.chains[t] = Some(Chain {
                    link,
                    tail: b,
                    sealed: false,
                });
                if word & kv::LINK_BIT == 0 {
                    break;
                }
                link += 1;
            }
        }
        ep.unlock(self.rank, KV)?;
        Ok(())
    }

    fn run(mut self, reader: &Arc<TaskReader>) -> Result<WorkerOutput> {
        self.ep.barrier()?;
        let start = Instant::now();
        self.out.start = Some(start);
        let run0 = match self.resume {
            None | Some(ResumePhase::Map) => {
                self.map_phase(reader)?;
                self.reduce_phase()?
            }
            Some(ResumePhase::Combine) => {
                self.status = Some(publish_status(self.ep, None, WorkerStatus::Reduce)?);
                let run0 = self.read_own_run(RUN0_SLOT)?;
                self.out.trace.push(trace(self.rank, 0, &run0));
                run0
            }
            Some(ResumePhase::Done) => {
                let now = Some(Instant::now());
                self.out.marks.combine_start = now;
                if self.rank == 0 {
                    self.out.result = Some(self.read_own_run(TOP_SLOT)?);
                }
                self.status = Some(publish_status(self.ep, None, WorkerStatus::Done)?);
                self.ep.unlock(self.rank, COMBINE)?;
                self.out.marks.combine_end = Some(Instant::now());
                self.ep.barrier()?;
                return Ok(self.out);
            }
        };
        self.combine_phase(run0)?;
        self.ep.barrier()?;
        Ok(self.out)
    }

    fn set_status(&mut self, s: WorkerStatus) -> Result<()> {
        self.status = Some(publish_status(self.ep, self.status, s)?);
        Ok(())
    }

    fn map_phase(&mut self, reader: &Arc<TaskReader>) -> Result<()> {
        self.set_status(WorkerStatus::Map)?;
        self.out.marks.map_start = Some(Instant::now());
        let ep = self.ep;
        ep.lock(self.rank, KV, LockKind::Shared)?;
        ep.lock(self.rank, KV_DISP, LockKind::Shared)?;
        let tasks: Vec<TaskDescriptor> = tasks_for(self.rank, self.cfg, reader.len())
            .into_iter()
            .filter(|t| !self.completed.contains(&t.index))
            .collect();
        let mut done = 0;
        run_pipelined(reader, tasks, |task, input| {
            self.map_and_deliver(&task, &input)?;
            done += 1;
            if self.cfg.redundant_lock_opt {
                self.cycle_locks(&[KV, KV_DISP])?;
            }
            if let Some((kv, kv_disp)) = self.storage.as_ref().and_then(|s| s.kv.as_ref()) {
                kv.mark_completed(task.index);
                kv_disp.win_sync()?;
                kv.win_sync()?;
            }
            match self.cfg.fault {
                Some(f) if f.rank == self.rank && f.after_tasks == done => {
                    Err(Error::InjectedFault {
                        rank: self.rank,
                        tasks: done,
                    })
                }
                _ => Ok(()),
            }
        })?;
        ep.unlock(self.rank, KV)?;
        ep.unlock(self.rank, KV_DISP)?;
        self.out.marks.map_end = Some(Instant::now());
        Ok(())
    }

    fn cycle_locks(&self, ids: &[WindowId]) -> Result<()> {
        for &id in ids {
            self.ep.unlock(self.rank, id)?;
            self.ep.lock(self.rank, id, LockKind::Shared)?;
        }
        Ok(())
    }

    /// Maps one task and pushes its locally reduced pairs to their targets.
    fn map_and_deliver(&mut self, task: &TaskDescriptor, input: &TaskInput) -> Result<()> {
        let (mut table, emitted) = map_task(self.uc, task, input);
        self.out.stats.emitted += emitted;
        self.out.stats.tasks_mapped += 1;

        let mut payloads = vec![Vec::new(); self.p];
        let mut counts = vec![0u64; self.p];
        for (k, v) in table.drain() {
            let t = kv::route(&k, self.p).target;
            kv::encode_into(&k, &v, &mut payloads[t])?;
            counts[t] += 1;
        }
        for i in 0..self.p {
            // Start after our own rank so peers are not all hit in the same order.
            let t = (self.rank + 1 + i) % self.p;
            if !payloads[t].is_empty() {
                self.deliver(t, &payloads[t], counts[t])?;
            }
        }
        Ok(())
    }

    fn deliver(&mut self, target: Rank, payload: &[u8], records: u64) -> Result<()> {
        let chain = self.chains[target]
            .ok_or_else(|| Error::Config(format!("no chain for rank {target}")))?;
        if chain.sealed {
            return self.keep(payload, records);
        }
        self.jitter.pause();
        let status = self.ep.atomic_fetch(target, STATUS, 0)?;
        self.jitter.pause();
        if status >= WorkerStatus::Reduce as u64 {
            self.mark_sealed(target);
            return self.keep(payload, records);
        }
        loop {
            let tail = self.chains[target].unwrap().tail;
            match seal_aware_append(self.ep, tail, payload)? {
                AppendOutcome::Appended => {
                    self.out.stats.bucket_records += records;
                    return Ok(());
                }
                AppendOutcome::Sealed => {
                    self.mark_sealed(target);
                    return self.keep(payload, records);
                }
                AppendOutcome::Full => {
                    self.jitter.pause();
                    if !self.grow(target, payload.len() as u64)? {
                        self.mark_sealed(target);
                        return self.keep(payload, records);
                    }
                }
            }
        }
    }

    fn mark_sealed(&mut self, target: Rank) {
        if let Some(c) = &mut self.chains[target] {
            c.sealed = true;
        }
    }

    /// Attaches a bucket after the chain tail for `slot`, publishes it and
    /// links it. Returns false when the tail was sealed before the link.
    fn grow(&mut self, slot: usize, need: u64) -> Result<bool> {
        let ep = self.ep;
        let prev = self.chains[slot];
        let (link, cap) = match prev {
            Some(c) => (c.link + 1, (c.tail.capacity * 2).max(need + CONTROL_LEN)),
            None => (
                0,
                initial_bucket_capacity(self.cfg.bucket_size, self.p).max(need + CONTROL_LEN),
            ),
        };
        if link >= MAX_CHAIN {
            return Err(Error::Resource(format!(
                "bucket chain for slot {slot} exceeds {MAX_CHAIN} links"
            )));
        }
        let cap = cap.next_multiple_of(8);
        let disp = ep.attach_region(KV, cap)?.0;
        ep.put(
            self.rank,
            KV_DISP,
            entry_offset(slot, link),
            &encode_words(&[disp, cap]),
        )?;
        let bucket = BucketRef {
            owner: self.rank,
            window: KV,
            offset: disp,
            capacity: cap,
        };
        if let Some(c) = prev {
            if !link_bucket(ep, c.tail)? {
                return Ok(false);
            }
        }
        self.out.stats.buckets_attached += 1;
        self.chains[slot] = Some(Chain {
            link,
            tail: bucket,
            sealed: false,
        });
        Ok(true)
    }

    /// Ownership transfer: the records go to our own stray chain and are
    /// folded into our own run.
    fn keep(&mut self, payload: &[u8], records: u64) -> Result<()> {
        let stray = self.p;
        if self.chains[stray].is_none() {
            self.grow(stray, payload.len() as u64)?;
        }
        loop {
            let tail = self.chains[stray].unwrap().tail;
            match seal_aware_append(self.ep, tail, payload)? {
                AppendOutcome::Appended => break,
                AppendOutcome::Full => {
                    self.grow(stray, payload.len() as u64)?;
                }
                AppendOutcome::Sealed => {
                    return Err(Error::Protocol {
                        rank: self.rank,
                        window: KV,
                        msg: "stray chain was sealed".into(),
                    })
                }
            }
        }
        self.out.stats.transferred += records;
        Ok(())
    }

    fn reduce_phase(&mut self) -> Result<Vec<u8>> {
        self.set_status(WorkerStatus::Reduce)?;
        self.out.marks.reduce_start = Some(Instant::now());
        let ep = self.ep;
        let mut table = ReduceTable::new();
        for e in 0..self.p {
            ep.lock(e, KV, LockKind::Shared)?;
            ep.lock(e, KV_DISP, LockKind::Shared)?;
            self.pull_chain(e, self.rank, true, &mut table)?;
            if e == self.rank {
                self.pull_chain(e, self.p, false, &mut table)?;
            }
            ep.unlock(e, KV)?;
            ep.unlock(e, KV_DISP)?;
            if self.cfg.redundant_lock_opt {
                for id in [KV, KV_DISP] {
                    ep.lock(e, id, LockKind::Shared)?;
                    ep.unlock(e, id)?;
                }
            }
        }
        let run0 = table.into_run()?;
        self.out.trace.push(trace(self.rank, 0, &run0));
        let (disp, len) = self.store_run(&run0)?;
        self.publish_run(RUN0_SLOT, disp, len, 0)?;
        if let Some(s) = &self.storage {
            s.set_phase(WorkerStatus::Combine);
            s.sync_combine()?;
        }
        self.out.marks.reduce_end = Some(Instant::now());
        Ok(run0)
    }

    /// Seals (when `seal`) and reads every link of emitter `e`'s chain `slot`.
    fn pull_chain(
        &mut self,
        e: Rank,
        slot: usize,
        seal: bool,
        table: &mut ReduceTable,
    ) -> Result<()> {
        let ep = self.ep;
        let mut link = 0;
        loop {
            let [disp, cap] =
                decode_words::<2>(&ep.get(e, KV_DISP, entry_offset(slot, link), 16)?);
            if cap == 0 {
                return Ok(());
            }
            let b = BucketRef {
                owner: e,
                window: KV,
                offset: disp,
                capacity: cap,
            };
            let (committed, linked) = if seal {
                self.jitter.pause();
                let s = seal_bucket(ep, b)?;
                (s.committed, s.linked)
            } else {
                let w = ep.atomic_fetch(e, KV, disp)?;
                (w & kv::COMMITTED_MASK, w & kv::LINK_BIT != 0)
            };
            if committed > b.payload_capacity() {
                return Err(Error::Protocol {
                    rank: e,
                    window: KV,
                    msg: format!("committed length {committed} exceeds bucket capacity {cap}"),
                });
            }
            if committed > 0 {
                let bytes =
                    ep.get_chunked(e, KV, disp + CONTROL_LEN, committed, self.cfg.chunk_size)?;
                table.fold_stream(self.uc, &bytes)?;
            }
            if !linked {
                return Ok(());
            }
            link += 1;
            if link >= MAX_CHAIN {
                return Err(Error::Protocol {
                    rank: e,
                    window: KV,
                    msg: "bucket chain longer than the displacement table".into(),
                });
            }
        }
    }

    /// Writes a run into our Combine window. The caller holds the exclusive
    /// epoch on it.
    fn store_run(&mut self, run: &[u8]) -> Result<(u64, u64)> {
        let len = run.len() as u64;
        if len == 0 {
            return Ok((0, 0));
        }
        let disp = if self.combine_used + len <= self.combine_initial {
            let d = self.combine_used;
            self.combine_used += len.next_multiple_of(8);
            d
        } else {
            self.ep.attach_region(COMBINE, len)?.0
        };
        put_chunked(self.ep, self.rank, COMBINE, disp, run, self.cfg.chunk_size)?;
        Ok((disp, len))
    }

    fn publish_run(&self, slot: u64, disp: u64, len: u64, level: usize) -> Result<()> {
        self.ep.lock(self.rank, COMBINE_DISP, LockKind::Shared)?;
        self.ep.put(
            self.rank,
            COMBINE_DISP,
            slot,
            &encode_words(&[disp, len, level as u64 + 1]),
        )?;
        self.ep.unlock(self.rank, COMBINE_DISP)
    }

    fn read_own_run(&self, slot: u64) -> Result<Vec<u8>> {
        let ep = self.ep;
        ep.lock(self.rank, COMBINE_DISP, LockKind::Shared)?;
        let [disp, len, level] = decode_words::<3>(&ep.get(self.rank, COMBINE_DISP, slot, 24)?);
        ep.unlock(self.rank, COMBINE_DISP)?;
        if level == 0 {
            return Err(Error::Checkpoint(format!(
                "rank {} has no run in its checkpoint",
                self.rank
            )));
        }
        let run = if len == 0 {
            Vec::new()
        } else {
            ep.get_chunked(self.rank, COMBINE, disp, len, self.cfg.chunk_size)?
        };
        scan_run(&run)?;
        Ok(run)
    }

    /// Waits for `partner` to release its Combine window, then copies the run
    /// it published.
    fn fetch_run(&self, partner: Rank) -> Result<Vec<u8>> {
        let ep = self.ep;
        loop {
            ep.lock(partner, COMBINE, LockKind::Shared)?;
            ep.lock(partner, COMBINE_DISP, LockKind::Shared)?;
            let [disp, len, level] =
                decode_words::<3>(&ep.get(partner, COMBINE_DISP, TOP_SLOT, 24)?);
            let run = if level == 0 || len == 0 {
                Ok(Vec::new())
            } else {
                ep.get_chunked(partner, COMBINE, disp, len, self.cfg.chunk_size)
            };
            ep.unlock(partner, COMBINE_DISP)?;
            ep.unlock(partner, COMBINE)?;
            if level > 0 {
                return run;
            }
            // Lock taken before the partner's first epoch; should not happen
            // with the init ordering, but never read an unpublished run.
            if ep.fabric().is_aborted() {
                return Err(Error::Aborted);
            }
            thread::sleep(Duration::from_millis(1));
        }
    }

    fn combine_phase(&mut self, run0: Vec<u8>) -> Result<()> {
        self.set_status(WorkerStatus::Combine)?;
        self.out.marks.combine_start = Some(Instant::now());
        let levels = combine_levels(self.p);
        let mut run = run0;
        let mut exited = false;
        for level in 1..levels {
            match combine_role(self.rank, self.p, level) {
                CombineRole::Merge { partner } => {
                    let other = self.fetch_run(partner)?;
                    run = merge_runs(&run, &other, self.uc)?;
                    self.out.trace.push(trace(self.rank, level, &run));
                }
                CombineRole::PassThrough => self.out.trace.push(trace(self.rank, level, &run)),
                CombineRole::Exit { .. } => {
                    let (disp, len) = self.store_run(&run)?;
                    self.publish_run(TOP_SLOT, disp, len, level)?;
                    exited = true;
                    break;
                }
                CombineRole::Gone => unreachable!("rank {} left before level {level}", self.rank),
            }
        }
        if !exited {
            let (disp, len) = self.store_run(&run)?;
            self.publish_run(TOP_SLOT, disp, len, levels - 1)?;
        }
        self.set_status(WorkerStatus::Done)?;
        if self.rank == 0 {
            if let Some(s) = &self.storage {
                s.set_phase(WorkerStatus::Done);
                s.sync_combine()?;
            }
            self.out.result = Some(run);
        }
        self.ep.unlock(self.rank, COMBINE)?;
        self.out.marks.combine_end = Some(Instant::now());
        Ok(())
    }
}

fn trace(rank: Rank, level: usize, run: &[u8]) -> RunTrace {
    let scanned = scan_run(run);
    RunTrace {
        rank,
        level,
        records: scanned.as_ref().copied().unwrap_or(0),
        sorted: scanned.is_ok(),
    }
}

fn register_plain(ep: &Endpoint, id: WindowId, size: u64) -> Result<()> {
    ep.create_window(id, size).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rma::Fabric;

    #[test]
    fn status_is_monotone() {
        let f = Fabric::new(2);
        let ep = f.endpoint(0);
        let peer = f.endpoint(1);
        ep.create_window(STATUS, 8).unwrap();
        let mut s = None;
        for next in [
            WorkerStatus::Map,
            WorkerStatus::Reduce,
            WorkerStatus::Combine,
            WorkerStatus::Done,
        ] {
            s = Some(publish_status(&ep, s, next).unwrap());
            assert_eq!(peer.atomic_fetch(0, STATUS, 0).unwrap(), next as u64);
        }
        assert!(publish_status(&ep, Some(WorkerStatus::Reduce), WorkerStatus::Map).is_err());
        assert!(publish_status(&ep, Some(WorkerStatus::Reduce), WorkerStatus::Reduce).is_err());
        assert_eq!(
            peer.atomic_fetch(0, STATUS, 0).unwrap(),
            WorkerStatus::Done as u64
        );
    }

    #[test]
    fn concurrent_status_reads_see_whole_codes() {
        let f = Fabric::new(2);
        let ep = f.endpoint(0);
        ep.create_window(STATUS, 8).unwrap();
        thread::scope(|s| {
            s.spawn(|| {
                let peer = f.endpoint(1);
                let mut last = 0;
                for _ in 0..200_000 {
                    let v = peer.atomic_fetch(0, STATUS, 0).unwrap();
                    assert!(
                        v == 0 || WorkerStatus::from_word(v).is_some(),
                        "torn status {v:#x}"
                    );
                    assert!(v >= last, "status went back from {last} to {v}");
                    last = v;
                }
            });
            let mut st = None;
            for next in [
                WorkerStatus::Map,
                WorkerStatus::Reduce,
                WorkerStatus::Combine,
                WorkerStatus::Done,
            ] {
                st = Some(publish_status(&ep, st, next).unwrap());
                thread::yield_now();
            }
        });
    }

    #[test]
    fn initial_split() {
        assert_eq!(initial_bucket_capacity(64 << 20, 8), 8 << 20);
        assert_eq!(initial_bucket_capacity(9, 16), MIN_BUCKET);
        assert_eq!(initial_bucket_capacity(1000, 3) % 8, 0);
    }
}
