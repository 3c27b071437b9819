//! MapReduce back-ends and the machinery they share.
//!
//! [`onesided::run_job`] is the decoupled engine: workers synchronize only
//! through one-sided operations and overlap Map, Reduce and Combine.
//! [`twosided::run_job_2s`] is the coupled reference with master-driven task
//! scatter, phase barriers and an all-to-all exchange.

pub mod bucket;
pub mod onesided;
pub mod runs;
pub mod tasks;
pub mod twosided;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::SkewProfile;
use crate::error::{Error, Result};
use crate::kv;
use crate::rma::{Endpoint, Fabric, Rank};
use crate::usecase::WordCount;

pub use onesided::run_job;
pub use twosided::run_job_2s;

/// Worker status codes stored in the Status window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u64)]
pub enum WorkerStatus {
    Map = 1,
    Reduce = 2,
    Combine = 3,
    Done = 4,
}

impl WorkerStatus {
    pub fn from_word(w: u64) -> Option<WorkerStatus> {
        match w {
            1 => Some(WorkerStatus::Map),
            2 => Some(WorkerStatus::Reduce),
            3 => Some(WorkerStatus::Combine),
            4 => Some(WorkerStatus::Done),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EngineKind {
    OneSided,
    TwoSided,
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EngineKind::OneSided => "1s",
            EngineKind::TwoSided => "2s",
        })
    }
}

/// Storage-backed windows for the one-sided engine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointConfig {
    pub dir: PathBuf,
    /// Try to resume from existing checkpoint files before starting cold.
    pub resume: bool,
}

/// Abort a worker on purpose after it has completed (and synced) a number of
/// Map tasks. Used by restart tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaultPlan {
    pub rank: Rank,
    pub after_tasks: usize,
}

#[derive(Clone, Debug)]
pub struct JobConfig {
    pub filename: PathBuf,
    /// Initial Combine window bytes.
    pub win_size: u64,
    /// Maximum bytes per one-sided transfer.
    pub chunk_size: u64,
    /// Bytes per Map task.
    pub task_size: u64,
    /// Initial Key-Value window bytes per worker, split across targets.
    pub bucket_size: u64,
    pub num_workers: usize,
    /// Lock/unlock-cycle every window after each Map and Reduce task.
    pub redundant_lock_opt: bool,
    pub checkpoint: Option<CheckpointConfig>,
    pub skew: SkewProfile,
    pub fault: Option<FaultPlan>,
    /// Seed for random yields/spins injected around emit and seal.
    pub jitter: Option<u64>,
}

impl JobConfig {
    pub fn new(filename: impl Into<PathBuf>, num_workers: usize) -> Self {
        JobConfig {
            filename: filename.into(),
            win_size: 0,
            chunk_size: 1 << 20,
            task_size: 64 << 20,
            bucket_size: 64 << 20,
            num_workers,
            redundant_lock_opt: false,
            checkpoint: None,
            skew: SkewProfile::default(),
            fault: None,
            jitter: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_workers == 0 {
            return Err(Error::Config("need at least one worker".into()));
        }
        if self.task_size == 0 {
            return Err(Error::Config("task_size must be positive".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be positive".into()));
        }
        if self.bucket_size <= kv::CONTROL_LEN {
            return Err(Error::Config(format!(
                "bucket_size must exceed {} bytes",
                kv::CONTROL_LEN
            )));
        }
        Ok(())
    }
}

/// Phase timestamps of one worker, in seconds since the job start.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WorkerTimeline {
    pub map_start: f64,
    pub map_end: f64,
    pub reduce_start: f64,
    pub reduce_end: f64,
    pub combine_start: f64,
    pub combine_end: f64,
}

/// One run produced during Combine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunTrace {
    pub rank: Rank,
    pub level: usize,
    pub records: usize,
    /// Result of the run scanner: keys strictly ascending, no duplicates.
    pub sorted: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct JobStats {
    /// Pairs passed to emit by Map (kept repetitions only).
    pub emitted: u64,
    /// Records appended to remote or local buckets after Local Reduce.
    pub bucket_records: u64,
    /// Records retained by their emitter because the target had sealed.
    pub transferred: u64,
    /// Buckets attached after initialization.
    pub buckets_attached: u64,
    pub tasks_mapped: u64,
}

impl std::ops::AddAssign for JobStats {
    fn add_assign(&mut self, o: JobStats) {
        self.emitted += o.emitted;
        self.bucket_records += o.bucket_records;
        self.transferred += o.transferred;
        self.buckets_attached += o.buckets_attached;
        self.tasks_mapped += o.tasks_mapped;
    }
}

/// Where a resumed job picked up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResumePhase {
    Map,
    Combine,
    Done,
}

#[derive(Clone, Debug)]
pub struct JobSummary {
    pub engine: EngineKind,
    pub num_workers: usize,
    pub corpus_bytes: u64,
    pub task_size: u64,
    pub chunk_size: u64,
    pub t_map: f64,
    pub t_reduce: f64,
    pub t_combine: f64,
    pub t_total: f64,
    /// Filled in by the harness when a memory sampler ran.
    pub peak_mem_bytes: Option<u64>,
    pub checkpoint: bool,
    pub skew: String,
    pub skew_digest: String,
    /// Final run in record encoding, sorted by key.
    pub result: Vec<u8>,
    pub result_digest: String,
    /// Barrier episodes executed by the job.
    pub barriers: u64,
    pub timelines: Vec<WorkerTimeline>,
    pub combine_trace: Vec<RunTrace>,
    pub stats: JobStats,
    pub resumed: Option<ResumePhase>,
}

impl JobSummary {
    pub fn records(&self) -> Result<Vec<kv::KvRecord>> {
        kv::iterate_records(&self.result, self.result.len())
            .map(|r| r.map(|r| r.to_owned()))
            .collect()
    }

    /// Decodes a Word-Count result.
    pub fn word_counts(&self) -> Result<BTreeMap<Vec<u8>, u64>> {
        kv::iterate_records(&self.result, self.result.len())
            .map(|r| r.map(|r| (r.key.to_vec(), WordCount::decode_count(r.value))))
            .collect()
    }

    /// Number of Combine levels observed (max level + 1).
    pub fn combine_levels(&self) -> usize {
        self.combine_trace
            .iter()
            .map(|t| t.level + 1)
            .max()
            .unwrap_or(0)
    }
}

/// What a worker thread hands back when it finishes.
#[derive(Debug, Default)]
pub(crate) struct WorkerOutput {
    pub result: Option<Vec<u8>>,
    pub start: Option<Instant>,
    pub marks: PhaseMarks,
    pub trace: Vec<RunTrace>,
    pub stats: JobStats,
    pub resumed: Option<ResumePhase>,
}

#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct PhaseMarks {
    pub map_start: Option<Instant>,
    pub map_end: Option<Instant>,
    pub reduce_start: Option<Instant>,
    pub reduce_end: Option<Instant>,
    pub combine_start: Option<Instant>,
    pub combine_end: Option<Instant>,
}

/// Spawns one thread per rank and gathers their outputs. The first failing
/// worker aborts the fabric so that peers blocked in locks or barriers return.
pub(crate) fn run_workers<F>(
    num_workers: usize,
    name: &str,
    f: F,
) -> Result<(Arc<Fabric>, Vec<WorkerOutput>)>
where
    F: Fn(&Endpoint) -> Result<WorkerOutput> + Send + Sync,
{
    let fabric = Fabric::new(num_workers);
    let results: Vec<Result<WorkerOutput>> = thread::scope(|s| {
        let handles: Vec<_> = (0..num_workers)
            .map(|rank| {
                let fabric = fabric.clone();
                let f = &f;
                thread::Builder::new()
                    .name(format!("{name}-{rank}"))
                    .spawn_scoped(s, move || {
                        let ep = fabric.endpoint(rank);
                        let out = f(&ep);
                        if let Err(e) = &out {
                            if !matches!(e, Error::Aborted) {
                                log::debug!("rank {rank} failed: {e}");
                            }
                            ep.release_all();
                            fabric.abort();
                        }
                        out
                    })
                    .expect("failed to spawn worker thread")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or(Err(Error::Aborted)))
            .collect()
    });

    let mut outputs = Vec::with_capacity(num_workers);
    let mut first_err = None;
    for r in results {
        match r {
            Ok(o) => outputs.push(o),
            Err(Error::Aborted) => {
                first_err.get_or_insert(Error::Aborted);
            }
            Err(e) => {
                if first_err
                    .as_ref()
                    .is_none_or(|f| matches!(f, Error::Aborted))
                {
                    first_err = Some(e);
                }
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok((fabric, outputs)),
    }
}

/// Folds worker outputs into a summary with times relative to the earliest
/// post-initialization instant.
pub(crate) fn summarize(
    engine: EngineKind,
    cfg: &JobConfig,
    corpus_bytes: u64,
    fabric: &Fabric,
    outputs: Vec<WorkerOutput>,
) -> Result<JobSummary> {
    let t0 = outputs
        .iter()
        .filter_map(|o| o.start)
        .min()
        .unwrap_or_else(Instant::now);
    let rel = |i: Option<Instant>| i.map(|i| i.duration_since(t0).as_secs_f64()).unwrap_or(0.0);
    let timelines: Vec<WorkerTimeline> = outputs
        .iter()
        .map(|o| WorkerTimeline {
            map_start: rel(o.marks.map_start),
            map_end: rel(o.marks.map_end),
            reduce_start: rel(o.marks.reduce_start),
            reduce_end: rel(o.marks.reduce_end),
            combine_start: rel(o.marks.combine_start),
            combine_end: rel(o.marks.combine_end),
        })
        .collect();
    let span = |f: fn(&WorkerTimeline) -> f64| timelines.iter().map(f).fold(0.0, f64::max);
    let t_map = span(|t| t.map_end - t.map_start);
    let t_reduce = span(|t| t.reduce_end - t.reduce_start);
    let t_combine = span(|t| t.combine_end - t.combine_start);
    let t_total = span(|t| t.combine_end);

    let mut stats = JobStats::default();
    let mut trace = Vec::new();
    let mut result = None;
    let mut resumed = None;
    for o in outputs {
        stats += o.stats;
        trace.extend(o.trace);
        if o.result.is_some() {
            result = o.result;
        }
        resumed = resumed.or(o.resumed);
    }
    trace.sort_by_key(|t| (t.level, t.rank));
    let result = result.ok_or_else(|| Error::Config("job produced no result".into()))?;
    Ok(JobSummary {
        engine,
        num_workers: cfg.num_workers,
        corpus_bytes,
        task_size: cfg.task_size,
        chunk_size: cfg.chunk_size,
        t_map,
        t_reduce,
        t_combine,
        t_total,
        peak_mem_bytes: None,
        checkpoint: cfg.checkpoint.is_some(),
        skew: cfg.skew.to_string(),
        skew_digest: cfg.skew.digest(),
        result_digest: kv::digest(&result),
        result,
        barriers: fabric.barrier_count(),
        timelines,
        combine_trace: trace,
        stats,
        resumed,
    })
}

/// `put` split into transfers of at most `chunk_limit` bytes.
pub(crate) fn put_chunked(
    ep: &Endpoint,
    target: Rank,
    id: crate::rma::WindowId,
    offset: u64,
    data: &[u8],
    chunk_limit: u64,
) -> Result<()> {
    for (i, chunk) in data.chunks(chunk_limit.max(1) as usize).enumerate() {
        ep.put(target, id, offset + i as u64 * chunk_limit, chunk)?;
    }
    Ok(())
}

/// Random yields and short spins injected at protocol race points.
pub(crate) struct Jitter(Option<ChaCha8Rng>);

impl Jitter {
    pub fn new(seed: Option<u64>, rank: Rank) -> Self {
        Jitter(seed.map(|s| {
            ChaCha8Rng::seed_from_u64(s ^ (rank as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        }))
    }

    pub fn pause(&mut self) {
        let Some(rng) = &mut self.0 else { return };
        match rng.gen_range(0..8) {
            0 | 1 => thread::yield_now(),
            2 => {
                for _ in 0..rng.gen_range(0..2000) {
                    std::hint::spin_loop();
                }
            }
            3 => thread::sleep(Duration::from_micros(rng.gen_range(0..50))),
            _ => {}
        }
    }
}
