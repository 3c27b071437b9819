//! Self-scheduled task assignment and asynchronous input prefetch.

use std::fs::File;
use std::path::Path;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::runs::ReduceTable;
use super::JobConfig;
use crate::dataset::{read_task_input, TaskDescriptor};
use crate::error::{Error, Result};
use crate::rma::Rank;
use crate::usecase::{TaskInput, UseCase};

/// Static round-robin: rank `r` owns task indices `i` with `i mod P == r`.
pub fn next_task(
    rank: Rank,
    cfg: &JobConfig,
    file_len: u64,
    previous: Option<&TaskDescriptor>,
) -> Option<TaskDescriptor> {
    let index = match previous {
        Some(p) => p.index + cfg.num_workers,
        None => rank,
    };
    let offset = (index as u64).checked_mul(cfg.task_size)?;
    if offset >= file_len {
        return None;
    }
    Some(TaskDescriptor {
        index,
        offset,
        length: cfg.task_size.min(file_len - offset),
        repeat: cfg.skew.repeat(index, rank),
    })
}

/// All tasks of `rank`, in order.
pub fn tasks_for(rank: Rank, cfg: &JobConfig, file_len: u64) -> Vec<TaskDescriptor> {
    std::iter::successors(next_task(rank, cfg, file_len, None), |p| {
        next_task(rank, cfg, file_len, Some(p))
    })
    .collect()
}

/// Maps one task `repeat` times into a Local Reduce table. Only the last pass
/// is kept, so repeats change the cost of a task but not its output. Returns
/// the table and the number of pairs emitted by the kept pass.
pub fn map_task(uc: &dyn UseCase, task: &TaskDescriptor, input: &TaskInput) -> (ReduceTable, u64) {
    let mut table = ReduceTable::new();
    let mut emitted = 0u64;
    for _ in 0..task.repeat.max(1) {
        table = ReduceTable::new();
        emitted = 0;
        uc.map(input, &mut |k, v| {
            table.insert_local(uc, k, v);
            emitted += 1;
        });
    }
    (table, emitted)
}

/// Shared read handle on the job input.
pub struct TaskReader {
    file: File,
    len: u64,
    uc: Arc<dyn UseCase>,
    delay: Duration,
}

impl TaskReader {
    pub fn open(path: &Path, uc: Arc<dyn UseCase>) -> Result<Arc<TaskReader>> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        Ok(Arc::new(TaskReader {
            file,
            len,
            uc,
            delay: Duration::ZERO,
        }))
    }

    /// Adds an artificial latency to every read.
    pub fn with_delay(
        path: &Path,
        uc: Arc<dyn UseCase>,
        delay: Duration,
    ) -> Result<Arc<TaskReader>> {
        let mut r = Arc::try_unwrap(Self::open(path, uc)?).ok().unwrap();
        r.delay = delay;
        Ok(Arc::new(r))
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn use_case(&self) -> &Arc<dyn UseCase> {
        &self.uc
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn read(&self, t: &TaskDescriptor) -> Result<TaskInput> {
        if !self.delay.is_zero() {
            thread::sleep(self.delay);
        }
        Ok(read_task_input(&self.file, self.len, t, self.uc.as_ref())?)
    }
}

/// A read running in the background.
pub struct PendingRead {
    task: TaskDescriptor,
    handle: JoinHandle<Result<TaskInput>>,
}

impl PendingRead {
    pub fn task(&self) -> &TaskDescriptor {
        &self.task
    }
}

pub fn prefetch_input(reader: &Arc<TaskReader>, t: TaskDescriptor) -> PendingRead {
    let reader = reader.clone();
    PendingRead {
        task: t,
        handle: thread::spawn(move || reader.read(&t)),
    }
}

/// Blocks until the read finishes; I/O errors surface here.
pub fn complete_read(p: PendingRead) -> Result<TaskInput> {
    p.handle
        .join()
        .map_err(|_| Error::Resource("input reader thread panicked".into()))?
}

/// Runs `compute` over `tasks` while the next task's input is being read.
/// At most one read is outstanding ahead of the task being computed.
pub fn run_pipelined(
    reader: &Arc<TaskReader>,
    tasks: impl IntoIterator<Item = TaskDescriptor>,
    mut compute: impl FnMut(TaskDescriptor, TaskInput) -> Result<()>,
) -> Result<()> {
    let mut tasks = tasks.into_iter();
    let mut pending = tasks.next().map(|t| prefetch_input(reader, t));
    while let Some(p) = pending.take() {
        let task = *p.task();
        let input = complete_read(p)?;
        pending = tasks.next().map(|t| prefetch_input(reader, t));
        if let Err(e) = compute(task, input) {
            if let Some(p) = pending {
                let _ = complete_read(p);
            }
            return Err(e);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::split_tasks;
    use crate::usecase::WordCount;
    use std::io::Write;
    use std::time::Instant;

    fn cfg(p: usize, task_size: u64) -> JobConfig {
        let mut c = JobConfig::new("unused", p);
        c.task_size = task_size;
        c
    }

    #[test]
    fn round_robin_example() {
        let c = cfg(4, 64 << 20);
        let t = tasks_for(1, &c, 640 << 20);
        assert_eq!(t.iter().map(|t| t.index).collect::<Vec<_>>(), vec![1, 5, 9]);
        assert_eq!(
            t.iter().map(|t| t.offset >> 20).collect::<Vec<_>>(),
            vec![64, 320, 576]
        );
    }

    #[test]
    fn round_robin_enumeration_oracle() {
        for p in 1..=9 {
            for (len, ts) in [(0u64, 10u64), (5, 10), (100, 10), (101, 7), (1000, 1)] {
                let c = cfg(p, ts);
                let all = split_tasks(len, ts);
                let mut seen = vec![0; all.len()];
                for r in 0..p {
                    let mine = tasks_for(r, &c, len);
                    let expect: Vec<_> = all.iter().filter(|t| t.index % p == r).collect();
                    assert_eq!(mine.len(), expect.len());
                    for (a, b) in mine.iter().zip(expect) {
                        assert_eq!((a.index, a.offset, a.length), (b.index, b.offset, b.length));
                        seen[a.index] += 1;
                    }
                }
                assert!(seen.iter().all(|&n| n == 1));
            }
        }
    }

    #[test]
    fn short_and_empty_inputs() {
        let c = cfg(3, 64);
        let t = tasks_for(0, &c, 10);
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].index, t[0].offset, t[0].length), (0, 0, 10));
        assert!(tasks_for(1, &c, 10).is_empty());
        for r in 0..3 {
            assert!(next_task(r, &c, 0, None).is_none());
        }
    }

    #[test]
    fn repeats_do_not_change_output() {
        let input = TaskInput::whole(b"a b a c a".to_vec());
        let mut t = split_tasks(9, 9)[0];
        let (once, n1) = map_task(&WordCount, &t, &input);
        t.repeat = 4;
        let (four, n4) = map_task(&WordCount, &t, &input);
        assert_eq!((n1, n4), (5, 5));
        assert_eq!(once.into_run().unwrap(), four.into_run().unwrap());
    }

    #[test]
    fn skew_sets_repeat() {
        let mut c = cfg(2, 10);
        c.skew = "worker0x4".parse().unwrap();
        assert!(tasks_for(0, &c, 100).iter().all(|t| t.repeat == 4));
        assert!(tasks_for(1, &c, 100).iter().all(|t| t.repeat == 1));
    }

    fn corpus(n: usize) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        let text: Vec<u8> = (0..n)
            .map(|i| {
                if i % 6 == 5 {
                    b' '
                } else {
                    b'a' + (i % 7) as u8
                }
            })
            .collect();
        f.write_all(&text).unwrap();
        f
    }

    #[test]
    fn prefetch_matches_synchronous_read() {
        let f = corpus(10_000);
        let reader = TaskReader::open(f.path(), Arc::new(WordCount)).unwrap();
        for t in split_tasks(reader.len(), 999) {
            let sync = reader.read(&t).unwrap();
            let asynch = complete_read(prefetch_input(&reader, t)).unwrap();
            assert_eq!(sync, asynch);
            let raw = std::fs::read(f.path()).unwrap();
            assert_eq!(
                &asynch.data[asynch.body.clone()],
                &raw[t.offset as usize..(t.offset + t.length) as usize]
            );
        }
    }

    #[test]
    fn read_errors_surface_at_completion() {
        let f = corpus(100);
        let reader = TaskReader::open(f.path(), Arc::new(WordCount)).unwrap();
        let beyond = TaskDescriptor {
            index: 9,
            offset: 1000,
            length: 10,
            repeat: 1,
        };
        assert!(complete_read(prefetch_input(&reader, beyond)).is_err());
    }

    #[test]
    fn prefetch_overlaps_compute() {
        let f = corpus(10 * 64);
        let reader =
            TaskReader::with_delay(f.path(), Arc::new(WordCount), Duration::from_millis(50))
                .unwrap();
        let tasks = split_tasks(reader.len(), 64);
        assert_eq!(tasks.len(), 10);
        let start = Instant::now();
        let mut done = 0;
        run_pipelined(&reader, tasks, |_, input| {
            assert!(!input.data.is_empty());
            thread::sleep(Duration::from_millis(50));
            done += 1;
            Ok(())
        })
        .unwrap();
        let elapsed = start.elapsed();
        assert_eq!(done, 10);
        assert!(
            elapsed < Duration::from_millis(800),
            "pipelined run took {elapsed:?}"
        );
    }
}
