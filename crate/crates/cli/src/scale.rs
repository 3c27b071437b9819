//! Default job parameters and their scaling for small corpora.

pub const DEFAULT_TASK: u64 = 64 << 20;
pub const DEFAULT_CHUNK: u64 = 1 << 20;
pub const DEFAULT_BUCKET: u64 = 64 << 20;
pub const SMALL_CORPUS: u64 = 1 << 30;
pub const MIN_TASK: u64 = 64 << 10;

/// Task size for `corpus_bytes` split across `workers`. Below 1 GiB the
/// 64 MiB default would leave most workers idle, so it becomes
/// `max(corpus / (4 * workers), 64 KiB)`.
pub fn task_size(corpus_bytes: u64, workers: usize) -> u64 {
    if corpus_bytes >= SMALL_CORPUS {
        DEFAULT_TASK
    } else {
        (corpus_bytes / (4 * workers.max(1) as u64)).max(MIN_TASK)
    }
}

/// Bucket size, scaled with the same rule as the task size.
pub fn bucket_size(corpus_bytes: u64, workers: usize) -> u64 {
    if corpus_bytes >= SMALL_CORPUS {
        DEFAULT_BUCKET
    } else {
        task_size(corpus_bytes, workers)
    }
}
