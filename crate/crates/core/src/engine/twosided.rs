//! The coupled reference engine: rank 0 scatters one task per worker per
//! round, every phase ends at a barrier, buckets move in one all-to-all
//! exchange and Combine runs over point-to-point messages.

use std::sync::Arc;
use std::time::Instant;

use super::runs::{combine_levels, combine_role, merge_runs, scan_run, CombineRole, ReduceTable};
use super::tasks::{map_task, TaskReader};
use super::{run_workers, summarize, EngineKind, JobConfig, JobSummary, RunTrace, WorkerOutput};
use crate::dataset::TaskDescriptor;
use crate::error::{Error, Result};
use crate::kv;
use crate::rma::{Endpoint, LockKind, Rank, WindowId};
use crate::usecase::UseCase;

pub const EXCHANGE: WindowId = WindowId(5);
pub const COUNTS: WindowId = WindowId(6);

const TAG_TASK: u64 = 1;
const TAG_COMBINE: u64 = 1 << 16;

/// Byte counts of one worker's side of the all-to-all.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExchangePlan {
    /// Bytes this worker sends to each target.
    pub send_counts: Vec<u64>,
    /// Bytes this worker receives from each source.
    pub recv_counts: Vec<u64>,
    /// Displacement of each target's bytes in this worker's send buffer.
    pub offsets: Vec<u64>,
}

impl ExchangePlan {
    /// Send side of the plan for per-target buckets.
    pub fn for_buckets(buckets: &[Vec<u8>]) -> ExchangePlan {
        let send_counts: Vec<u64> = buckets.iter().map(|b| b.len() as u64).collect();
        let offsets = send_counts
            .iter()
            .scan(0u64, |acc, &n| {
                let at = *acc;
                *acc += n;
                Some(at)
            })
            .collect();
        ExchangePlan {
            send_counts,
            recv_counts: Vec::new(),
            offsets,
        }
    }
}

/// Checks that what every source sends to `t` is what `t` expects to receive.
pub fn validate_plans(plans: &[ExchangePlan]) -> Result<()> {
    let p = plans.len();
    for (t, plan) in plans.iter().enumerate() {
        if plan.recv_counts.len() != p || plan.send_counts.len() != p {
            return Err(Error::Protocol {
                rank: t,
                window: COUNTS,
                msg: format!("plan has {} counts for {p} workers", plan.recv_counts.len()),
            });
        }
        let sent: u64 = plans.iter().map(|s| s.send_counts[t]).sum();
        let expected: u64 = plan.recv_counts.iter().sum();
        if sent != expected {
            return Err(Error::Protocol {
                rank: t,
                window: COUNTS,
                msg: format!("{sent} bytes sent to rank {t}, {expected} expected"),
            });
        }
        for (s, src) in plans.iter().enumerate() {
            if src.send_counts[t] != plan.recv_counts[s] {
                return Err(Error::Protocol {
                    rank: t,
                    window: COUNTS,
                    msg: format!(
                        "rank {s} sends {} bytes to rank {t}, which expects {}",
                        src.send_counts[t], plan.recv_counts[s]
                    ),
                });
            }
        }
    }
    Ok(())
}

/// Variable-length all-to-all. Every worker calls this once with one bucket
/// per target; each receives the pieces addressed to it, indexed by source.
///
/// Senders expose their concatenated buckets in the exchange window and put
/// `(offset, len)` into each target's count window; after a barrier every
/// receiver pulls its pieces; a final barrier keeps the buffers alive until
/// all pulls are done.
pub fn exchange_alltoall(
    ep: &Endpoint,
    buckets: Vec<Vec<u8>>,
    chunk_size: u64,
) -> Result<(ExchangePlan, Vec<Vec<u8>>)> {
    let p = ep.size();
    let me = ep.rank();
    if buckets.len() != p {
        return Err(Error::Usage(format!(
            "{} buckets for {p} workers",
            buckets.len()
        )));
    }
    let mut plan = ExchangePlan::for_buckets(&buckets);
    let total: u64 = plan.send_counts.iter().sum();
    ep.create_window(EXCHANGE, total)?;
    ep.create_window(COUNTS, 16 * p as u64)?;
    ep.lock(me, EXCHANGE, LockKind::Exclusive)?;
    for (t, b) in buckets.iter().enumerate() {
        if !b.is_empty() {
            super::put_chunked(ep, me, EXCHANGE, plan.offsets[t], b, chunk_size)?;
        }
    }
    ep.unlock(me, EXCHANGE)?;
    drop(buckets);
    ep.barrier()?;

    for t in 0..p {
        ep.lock(t, COUNTS, LockKind::Shared)?;
        let mut slot = plan.offsets[t].to_le_bytes().to_vec();
        slot.extend_from_slice(&plan.send_counts[t].to_le_bytes());
        ep.put(t, COUNTS, 16 * me as u64, &slot)?;
        ep.unlock(t, COUNTS)?;
    }
    ep.barrier()?;

    ep.lock(me, COUNTS, LockKind::Shared)?;
    let counts = ep.get(me, COUNTS, 0, 16 * p as u64)?;
    ep.unlock(me, COUNTS)?;
    let mut pieces = Vec::with_capacity(p);
    for s in 0..p {
        let at = u64::from_le_bytes(counts[16 * s..16 * s + 8].try_into().unwrap());
        let len = u64::from_le_bytes(counts[16 * s + 8..16 * s + 16].try_into().unwrap());
        plan.recv_counts.push(len);
        if len == 0 {
            pieces.push(Vec::new());
            continue;
        }
        ep.lock(s, EXCHANGE, LockKind::Shared)?;
        let piece = ep.get_chunked(s, EXCHANGE, at, len, chunk_size);
        ep.unlock(s, EXCHANGE)?;
        let piece = piece.map_err(|e| Error::Protocol {
            rank: s,
            window: EXCHANGE,
            msg: format!("count of {len} bytes at {at} does not match the exposed buffer: {e}"),
        })?;
        for r in kv::iterate_records(&piece, piece.len()) {
            r.map_err(|e| Error::Protocol {
                rank: s,
                window: EXCHANGE,
                msg: format!("piece for rank {me} does not end on a record boundary: {e}"),
            })?;
        }
        pieces.push(piece);
    }
    ep.barrier()?;
    Ok((plan, pieces))
}

/// Runs a job on the coupled engine.
pub fn run_job_2s(cfg: &JobConfig, uc: Arc<dyn UseCase>) -> Result<JobSummary> {
    cfg.validate()?;
    let reader = TaskReader::open(&cfg.filename, uc)?;
    let total_tasks = reader.len().div_ceil(cfg.task_size) as usize;
    let rounds = total_tasks.div_ceil(cfg.num_workers);
    let (fabric, outputs) = run_workers(cfg.num_workers, "dmr2s", |ep| {
        worker(ep, cfg, &reader, total_tasks, rounds)
    })?;
    summarize(EngineKind::TwoSided, cfg, reader.len(), &fabric, outputs)
}

fn encode_task(t: &TaskDescriptor) -> Vec<u8> {
    [t.index as u64, t.offset, t.length, t.repeat as u64]
        .iter()
        .flat_map(|w| w.to_le_bytes())
        .collect()
}

fn decode_task(b: &[u8]) -> Result<Option<TaskDescriptor>> {
    match b.len() {
        0 => Ok(None),
        32 => {
            let w = |i: usize| u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
            Ok(Some(TaskDescriptor {
                index: w(0) as usize,
                offset: w(1),
                length: w(2),
                repeat: w(3) as u32,
            }))
        }
        n => Err(Error::Encoding(format!("task message of {n} bytes"))),
    }
}

fn worker(
    ep: &Endpoint,
    cfg: &JobConfig,
    reader: &Arc<TaskReader>,
    total_tasks: usize,
    rounds: usize,
) -> Result<WorkerOutput> {
    let p = cfg.num_workers;
    let me = ep.rank();
    let uc = reader.use_case().as_ref();
    let mut out = WorkerOutput::default();
    ep.barrier()?;
    let start = Instant::now();
    out.start = Some(start);
    out.marks.map_start = Some(start);

    let mut buckets = vec![Vec::new(); p];
    for round in 0..rounds {
        if me == 0 {
            for w in 0..p {
                let index = round * p + w;
                let msg = if index < total_tasks {
                    let offset = index as u64 * cfg.task_size;
                    encode_task(&TaskDescriptor {
                        index,
                        offset,
                        length: cfg.task_size.min(reader.len() - offset),
                        repeat: cfg.skew.repeat(index, w),
                    })
                } else {
                    Vec::new()
                };
                ep.send(w, TAG_TASK, msg)?;
            }
        }
        let task = decode_task(&ep.recv(0, TAG_TASK)?)?;
        // Collective read: everyone reads its round-r task together.
        ep.barrier()?;
        if let Some(task) = task {
            let input = reader.read(&task)?;
            let (mut table, emitted) = map_task(uc, &task, &input);
            out.stats.emitted += emitted;
            out.stats.tasks_mapped += 1;
            for (k, v) in table.drain() {
                let t = kv::route(&k, p).target;
                kv::encode_into(&k, &v, &mut buckets[t])?;
                out.stats.bucket_records += 1;
            }
        }
    }
    out.marks.map_end = Some(Instant::now());
    ep.barrier()?;

    let (_, pieces) = exchange_alltoall(ep, buckets, cfg.chunk_size)?;
    out.marks.reduce_start = Some(Instant::now());
    let mut table = ReduceTable::new();
    for piece in pieces {
        table.fold_stream(uc, &piece)?;
    }
    let run0 = table.into_run()?;
    out.trace.push(trace(me, 0, &run0));
    out.marks.reduce_end = Some(Instant::now());

    out.marks.combine_start = Some(Instant::now());
    let levels = combine_levels(p);
    let mut run = run0;
    for level in 1..levels {
        match combine_role(me, p, level) {
            CombineRole::Merge { partner } => {
                let other = ep.recv(partner, TAG_COMBINE + level as u64)?;
                run = merge_runs(&run, &other, uc)?;
                out.trace.push(trace(me, level, &run));
            }
            CombineRole::PassThrough => out.trace.push(trace(me, level, &run)),
            CombineRole::Exit { parent } => {
                ep.send(parent, TAG_COMBINE + level as u64, std::mem::take(&mut run))?;
                break;
            }
            CombineRole::Gone => unreachable!("rank {me} left before level {level}"),
        }
    }
    if me == 0 {
        out.result = Some(run);
    }
    out.marks.combine_end = Some(Instant::now());
    ep.barrier()?;
    Ok(out)
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rma::Fabric;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;
    use std::thread;

    fn exchange(
        p: usize,
        buckets: Vec<Vec<Vec<u8>>>,
    ) -> (Vec<ExchangePlan>, Vec<Vec<Vec<u8>>>, u64) {
        let fabric = Fabric::new(p);
        let results: Vec<_> = thread::scope(|s| {
            let hs: Vec<_> = buckets
                .into_iter()
                .enumerate()
                .map(|(r, b)| {
                    let fabric = fabric.clone();
                    s.spawn(move || exchange_alltoall(&fabric.endpoint(r), b, 100).unwrap())
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let (plans, pieces) = results.into_iter().unzip();
        (plans, pieces, fabric.barrier_count())
    }

    fn records(pairs: &[(&str, &str)]) -> Vec<u8> {
        let mut b = Vec::new();
        for (k, v) in pairs {
            kv::encode_into(k.as_bytes(), v.as_bytes(), &mut b).unwrap();
        }
        b
    }

    #[test]
    fn p2_symmetric() {
        let a = records(&[("x", "from0")]);
        let b = records(&[("y", "from1")]);
        let (plans, pieces, _) = exchange(
            2,
            vec![vec![Vec::new(), a.clone()], vec![b.clone(), Vec::new()]],
        );
        validate_plans(&plans).unwrap();
        assert_eq!(pieces[0], vec![Vec::new(), b]);
        assert_eq!(pieces[1], vec![a, Vec::new()]);
    }

    #[test]
    fn empty_exchange() {
        let (plans, pieces, barriers) = exchange(3, vec![vec![Vec::new(); 3]; 3]);
        validate_plans(&plans).unwrap();
        assert!(pieces.iter().flatten().all(|p| p.is_empty()));
        assert_eq!(barriers, 3);
    }

    #[test]
    fn random_multiset_preserved() {
        let p = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut sent: BTreeMap<(usize, usize), Vec<Vec<u8>>> = BTreeMap::new();
        let buckets: Vec<Vec<Vec<u8>>> = (0..p)
            .map(|s| {
                (0..p)
                    .map(|t| {
                        let mut b = Vec::new();
                        for _ in 0..rng.gen_range(0..200) {
                            let k: Vec<u8> = (0..rng.gen_range(1..20)).map(|_| rng.gen()).collect();
                            let v: Vec<u8> = (0..rng.gen_range(0..40)).map(|_| rng.gen()).collect();
                            kv::encode_into(&k, &v, &mut b).unwrap();
                            sent.entry((s, t))
                                .or_default()
                                .push(kv::encode_record(&kv::KvRecord::new(k, v)).unwrap());
                        }
                        b
                    })
                    .collect()
            })
            .collect();
        let (plans, pieces, _) = exchange(p, buckets);
        validate_plans(&plans).unwrap();
        for (t, row) in pieces.iter().enumerate() {
            for (s, piece) in row.iter().enumerate() {
                let mut got: Vec<Vec<u8>> = kv::iterate_records(piece, piece.len())
                    .map(|r| kv::encode_record(&r.unwrap().to_owned()).unwrap())
                    .collect();
                let mut want = sent.remove(&(s, t)).unwrap_or_default();
                got.sort();
                want.sort();
                assert_eq!(got, want, "{s} -> {t}");
            }
        }
    }

    #[test]
    fn plan_validation_catches_mismatch() {
        let mut plans: Vec<ExchangePlan> = (0..2)
            .map(|_| ExchangePlan {
                send_counts: vec![5, 7],
                recv_counts: vec![5, 5],
                offsets: vec![0, 5],
            })
            .collect();
        assert!(validate_plans(&plans).is_err());
        plans[0].recv_counts = vec![5, 5];
        plans[1].recv_counts = vec![7, 7];
        validate_plans(&plans).unwrap();
        plans[1].recv_counts = vec![6, 8];
        assert!(validate_plans(&plans).is_err());
    }

    #[test]
    fn task_message_round_trip() {
        let t = TaskDescriptor {
            index: 9,
            offset: 1 << 40,
            length: 77,
            repeat: 4,
        };
        assert_eq!(decode_task(&encode_task(&t)).unwrap(), Some(t));
        assert_eq!(decode_task(&[]).unwrap(), None);
        assert!(decode_task(&[1, 2, 3]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn plan_counts_balance(p in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let buckets: Vec<Vec<Vec<u8>>> = (0..p)
                .map(|s| {
                    (0..p)
                        .map(|t| {
                            let mut b = Vec::new();
                            for i in 0..rng.gen_range(0..30) {
                                kv::encode_into(format!("{s}-{t}-{i}").as_bytes(), b"v", &mut b).unwrap();
                            }
                            b
                        })
                        .collect()
                })
                .collect();
            let (plans, pieces, _) = exchange(p, buckets.clone());
            validate_plans(&plans).unwrap();
            for t in 0..p {
                for s in 0..p {
                    prop_assert_eq!(plans[t].recv_counts[s], buckets[s][t].len() as u64);
                    prop_assert_eq!(&pieces[t][s], &buckets[s][t]);
                }
                let sent: u64 = plans.iter().map(|pl| pl.send_counts[t]).sum();
                prop_assert_eq!(sent, plans[t].recv_counts.iter().sum::<u64>());
            }
        }
    }
}
