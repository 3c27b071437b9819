//! Seeded corpus generation, task splitting and imbalance profiles.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv;
use crate::usecase::{TaskInput, UseCase};

/// One unit of Map work.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskDescriptor {
    pub index: usize,
    pub offset: u64,
    pub length: u64,
    /// Imbalance multiplier: the task is computed this many times.
    pub repeat: u32,
}

/// Splits `file_len` bytes into consecutive tasks of `task_size` bytes.
pub fn split_tasks(file_len: u64, task_size: u64) -> Vec<TaskDescriptor> {
    assert!(task_size > 0, "task size must be positive");
    (0..file_len.div_ceil(task_size))
        .map(|i| {
            let offset = i * task_size;
            TaskDescriptor {
                index: i as usize,
                offset,
                length: task_size.min(file_len - offset),
                repeat: 1,
            }
        })
        .collect()
}

const EXTEND_STEP: usize = 256;

fn read_task_with(
    file_len: u64,
    range: Range<u64>,
    uc: &dyn UseCase,
    mut read_at: impl FnMut(u64, &mut [u8]) -> io::Result<()>,
) -> io::Result<TaskInput> {
    let lead = u64::from(range.start > 0);
    let start = range.start - lead;
    let mut data = vec![0u8; (range.end - start) as usize];
    read_at(start, &mut data)?;
    let body = lead as usize..data.len();

    // Extend until the first separator so the last token is whole.
    let mut pos = range.end;
    while pos < file_len {
        let n = EXTEND_STEP.min((file_len - pos) as usize);
        let mut buf = vec![0u8; n];
        read_at(pos, &mut buf)?;
        if let Some(i) = buf.iter().position(|&b| uc.is_separator(b)) {
            data.extend_from_slice(&buf[..i]);
            break;
        }
        data.extend_from_slice(&buf);
        pos += n as u64;
    }
    Ok(TaskInput { data, body })
}

/// Reads a task's bytes (plus boundary context) from `file`.
pub fn read_task_input(
    file: &File,
    file_len: u64,
    task: &TaskDescriptor,
    uc: &dyn UseCase,
) -> io::Result<TaskInput> {
    read_task_with(
        file_len,
        task.offset..task.offset + task.length,
        uc,
        |off, buf| file.read_exact_at(buf, off),
    )
}

/// In-memory equivalent of [`read_task_input`].
pub fn task_input_from_slice(data: &[u8], range: Range<usize>, uc: &dyn UseCase) -> TaskInput {
    read_task_with(
        data.len() as u64,
        range.start as u64..range.end as u64,
        uc,
        |off, buf| {
            buf.copy_from_slice(&data[off as usize..off as usize + buf.len()]);
            Ok(())
        },
    )
    .expect("in-memory reads cannot fail")
}

/// Per-worker and per-task repeat counts used to simulate imbalance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SkewProfile {
    pub workers: BTreeMap<usize, u32>,
    pub tasks: BTreeMap<usize, u32>,
}

impl SkewProfile {
    pub fn balanced() -> Self {
        Self::default()
    }

    /// Every task of `worker` is computed `repeat` times.
    pub fn worker(worker: usize, repeat: u32) -> Self {
        let mut s = Self::default();
        s.workers.insert(worker, repeat.max(1));
        s
    }

    pub fn is_balanced(&self) -> bool {
        self.workers
            .values()
            .chain(self.tasks.values())
            .all(|&k| k <= 1)
    }

    pub fn repeat(&self, task: usize, worker: usize) -> u32 {
        self.tasks
            .get(&task)
            .or_else(|| self.workers.get(&worker))
            .copied()
            .unwrap_or(1)
            .max(1)
    }

    pub fn digest(&self) -> String {
        kv::digest(self.to_string().as_bytes())
    }
}

impl fmt::Display for SkewProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_balanced() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self
            .workers
            .iter()
            .filter(|(_, &k)| k > 1)
            .map(|(w, k)| format!("worker{w}x{k}"))
            .chain(
                self.tasks
                    .iter()
                    .filter(|(_, &k)| k > 1)
                    .map(|(t, k)| format!("task{t}x{k}")),
            )
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for SkewProfile {
    type Err = Error;

    /// Parses `none` or a comma-separated list of `workerNxK` / `taskNxK`
    /// (whitespace before `x` is allowed).
    fn from_str(s: &str) -> Result<Self> {
        let mut profile = SkewProfile::default();
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(profile);
        }
        for item in s.split(',') {
            let item: String = item.chars().filter(|c| !c.is_whitespace()).collect();
            let bad = || Error::Config(format!("bad skew item {item:?}, expected workerNxK"));
            let (target, rest) = if let Some(r) = item.strip_prefix("worker") {
                (&mut profile.workers, r)
            } else if let Some(r) = item.strip_prefix("task") {
                (&mut profile.tasks, r)
            } else {
                return Err(bad());
            };
            let (n, k) = rest.split_once('x').ok_or_else(bad)?;
            let n: usize = n.parse().map_err(|_| bad())?;
            let k: u32 = k.parse().map_err(|_| bad())?;
            if k == 0 {
                return Err(Error::Config("repeat counts must be at least 1".into()));
            }
            target.insert(n, k);
        }
        Ok(profile)
    }
}

/// Parameters of a generated corpus; generation is a pure function of these.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub size: u64,
    pub vocab_size: usize,
    pub zipf_s: f64,
    pub seed: u64,
    pub word_len_range: (usize, usize),
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            size: 64 << 20,
            vocab_size: 50_000,
            zipf_s: 1.1,
            seed: 42,
            word_len_range: (3, 10),
        }
    }
}

/// Ground truth for a generated corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenerationReport {
    pub bytes: u64,
    pub token_count: u64,
    pub counts: BTreeMap<Vec<u8>, u64>,
}

impl GenerationReport {
    /// Digest comparable with an engine's result digest.
    pub fn digest(&self) -> String {
        counts_digest(&self.counts)
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        write_oracle_csv(&self.counts, path)
    }
}

/// Digest of a `(word, count)` table in the engines' result encoding.
pub fn counts_digest(counts: &BTreeMap<Vec<u8>, u64>) -> String {
    let mut buf = Vec::new();
    for (k, v) in counts {
        kv::encode_into(k, &v.to_le_bytes(), &mut buf).expect("oracle keys are non-empty");
    }
    kv::digest(&buf)
}

pub fn write_oracle_csv(counts: &BTreeMap<Vec<u8>, u64>, path: &Path) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "word,count")?;
    for (k, v) in counts {
        w.write_all(k)?;
        writeln!(w, ",{v}")?;
    }
    w.flush()
}

pub fn read_oracle_csv(path: &Path) -> Result<BTreeMap<Vec<u8>, u64>> {
    let mut out = BTreeMap::new();
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.split(b'\n').enumerate() {
        let line = line?;
        if i == 0 || line.is_empty() {
            continue;
        }
        let comma = line
            .iter()
            .rposition(|&b| b == b',')
            .ok_or_else(|| Error::Config(format!("oracle line {} has no comma", i + 1)))?;
        let count = std::str::from_utf8(&line[comma + 1..])
            .ok()
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| Error::Config(format!("oracle line {} has a bad count", i + 1)))?;
        out.insert(line[..comma].to_vec(), count);
    }
    Ok(out)
}

fn vocabulary(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<u8>>> {
    let (lo, hi) = spec.word_len_range;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("bad word length range {lo}..={hi}")));
    }
    let capacity: f64 = (lo..=hi).map(|l| 26f64.powi(l as i32)).sum();
    if (spec.vocab_size as f64) > capacity / 2.0 {
        return Err(Error::Config(format!(
            "cannot draw {} distinct words of length {lo}..={hi}",
            spec.vocab_size
        )));
    }
    let mut seen = HashSet::with_capacity(spec.vocab_size);
    let mut words = Vec::with_capacity(spec.vocab_size);
    while words.len() < spec.vocab_size {
        let len = rng.gen_range(lo..=hi);
        let w: Vec<u8> = (0..len).map(|_| rng.gen_range(b'a'..=b'z')).collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    Ok(words)
}

/// Inverse-CDF sampler over ranks `0..n` with weights `1 / (rank+1)^s`.
pub struct ZipfTable {
    cdf: Vec<f64>,
}

impl ZipfTable {
    pub fn new(n: usize, s: f64) -> Self {
        assert!(n > 0 && s >= 0.0);
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (1..=n)
            .map(|k| {
                acc += (k as f64).powf(-s);
                acc
            })
            .collect();
        for c in &mut cdf {
            *c /= acc;
        }
        ZipfTable { cdf }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        self.cdf
            .partition_point(|&c| c <= u)
            .min(self.cdf.len() - 1)
    }

    /// Probability of `rank`.
    pub fn pmf(&self, rank: usize) -> f64 {
        self.cdf[rank] - if rank == 0 { 0.0 } else { self.cdf[rank - 1] }
    }
}

/// Writes exactly `spec.size` bytes of Zipf-distributed words to `out`.
pub fn generate_corpus(spec: &CorpusSpec, out: &Path) -> Result<GenerationReport> {
    if spec.vocab_size == 0 {
        return Err(Error::Config("vocabulary must not be empty".into()));
    }
    if spec.zipf_s.is_nan() || spec.zipf_s < 0.0 {
        return Err(Error::Config(format!(
            "zipf exponent {} must be >= 0",
            spec.zipf_s
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let words = vocabulary(spec, &mut rng)?;
    let table = ZipfTable::new(words.len(), spec.zipf_s);
    let mut hits = vec![0u64; words.len()];
    let mut w = BufWriter::with_capacity(1 << 20, File::create(out)?);
    let mut written = 0u64;
    let mut tokens = 0u64;
    loop {
        let idx = table.sample(&mut rng);
        let word = &words[idx];
        if written + word.len() as u64 + 1 > spec.size {
            break;
        }
        w.write_all(word)?;
        tokens += 1;
        w.write_all(if tokens.is_multiple_of(16) {
            b"\n"
        } else {
            b" "
        })?;
        written += word.len() as u64 + 1;
        hits[idx] += 1;
    }
    while written < spec.size {
        let pad = ((spec.size - written) as usize).min(4096);
        w.write_all(&vec![b'\n'; pad])?;
        written += pad as u64;
    }
    w.flush()?;

    let counts = words
        .into_iter()
        .zip(hits)
        .filter(|&(_, n)| n > 0)
        .collect();
    Ok(GenerationReport {
        bytes: written,
        token_count: tokens,
        counts,
    })
}
