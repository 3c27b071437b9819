//! Subcommands of `dmr`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use decoupled_mr::dataset::{
    counts_digest, generate_corpus, read_oracle_csv, CorpusSpec, SkewProfile,
};
use decoupled_mr::engine::CheckpointConfig;
use decoupled_mr::{run_job, run_job_2s, JobConfig, JobSummary, WordCount};

use crate::memory::MemorySampler;
use crate::report::{aggregate, Report, Row};
use crate::{parse_size, scale};

#[derive(Debug, Parser)]
#[command(name = "dmr", version, about = "Decoupled MapReduce benchmark harness")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a Zipf-distributed corpus and its oracle word counts.
    Gen(GenArgs),
    /// Run a Word-Count job and print one CSV row per repetition.
    Run(RunArgs),
    /// Strong or weak scaling sweep over worker counts.
    Sweep(SweepArgs),
    /// Run once and compare the result digest with the oracle.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Engine {
    #[value(name = "1s")]
    OneSided,
    #[value(name = "2s")]
    TwoSided,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepMode {
    Strong,
    Weak,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_parser = parse_size, default_value = "64MiB")]
    pub size: u64,
    #[arg(long, default_value_t = 1.1)]
    pub zipf: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 50_000)]
    pub vocab: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Oracle CSV path (default: `<out stem>.oracle.csv`).
    #[arg(long)]
    pub oracle: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct JobArgs {
    #[arg(long, value_enum, default_value = "1s")]
    pub engine: Engine,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    /// Default 64 MiB, scaled down for corpora under 1 GiB.
    #[arg(long, value_parser = parse_size)]
    pub task_size: Option<u64>,
    #[arg(long, value_parser = parse_size, default_value = "1MiB")]
    pub chunk_size: u64,
    /// Default 64 MiB, scaled down for corpora under 1 GiB.
    #[arg(long, value_parser = parse_size)]
    pub bucket_size: Option<u64>,
    #[arg(long, value_parser = parse_size, default_value = "0")]
    pub win_size: u64,
    /// `none`, or comma-separated `workerNxK` / `taskNxK`.
    #[arg(long, default_value = "none")]
    pub skew: SkewProfile,
    /// Back the one-sided engine's windows with files in this directory.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Resume from the files in --checkpoint-dir.
    #[arg(long, requires = "checkpoint_dir")]
    pub resume: bool,
    #[arg(long)]
    pub redundant_locks: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub job: JobArgs,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    /// Compare every repetition with the oracle; exit 2 on mismatch.
    #[arg(long)]
    pub verify: bool,
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub mode: SweepMode,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub workers: Vec<usize>,
    /// Corpus size (strong) or bytes per worker (weak).
    #[arg(long, value_parser = parse_size, default_value = "256MiB")]
    pub size: u64,
    /// Repeat every task of worker 0 four times.
    #[arg(long)]
    pub skewed: bool,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "1s,2s")]
    pub engines: Vec<Engine>,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    /// Where generated corpora are cached.
    #[arg(long, default_value = "dmr-corpora")]
    pub dir: PathBuf,
    #[arg(long, default_value_t = 1.1)]
    pub zipf: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_parser = parse_size, default_value = "1MiB")]
    pub chunk_size: u64,
    #[arg(long)]
    pub verify: bool,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    #[command(flatten)]
    pub job: JobArgs,
}

/// How a command ended; maps to the process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    VerifyFailed,
    Aborted,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Ok => 0,
            Outcome::VerifyFailed => 2,
            Outcome::Aborted => 3,
        }
    }

    fn worst(self, other: Outcome) -> Outcome {
        if other.code() > self.code() {
            other
        } else {
            self
        }
    }
}

/// Default oracle location for a corpus: `c.txt` → `c.oracle.csv`.
pub fn oracle_path(corpus: &Path) -> PathBuf {
    corpus.with_extension("oracle.csv")
}

/// Runs a parsed command. `Err` means a usage problem (exit code 1).
pub fn execute(cli: Cli, out: &mut dyn Write) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Gen(a) => gen(a, out),
        Command::Run(a) => run(a, out),
        Command::Sweep(a) => sweep(a, out),
        Command::Verify(a) => verify(a, out),
    }
}

fn gen(a: GenArgs, out: &mut dyn Write) -> anyhow::Result<Outcome> {
    let spec = CorpusSpec {
        size: a.size,
        vocab_size: a.vocab,
        zipf_s: a.zipf,
        seed: a.seed,
        ..CorpusSpec::default()
    };
    let oracle = a.oracle.unwrap_or_else(|| oracle_path(&a.out));
    let report = generate_corpus(&spec, &a.out)
        .with_context(|| format!("generating {}", a.out.display()))?;
    report.write_csv(&oracle)?;
    writeln!(
        out,
        "{} bytes, {} tokens, {} distinct words, digest {}",
        report.bytes,
        report.token_count,
        report.counts.len(),
        report.digest()
    )?;
    writeln!(
        out,
        "corpus {}\noracle {}",
        a.out.display(),
        oracle.display()
    )?;
    Ok(Outcome::Ok)
}

/// Builds the engine configuration for a corpus of `corpus_bytes`.
pub fn job_config(corpus: &Path, corpus_bytes: u64, j: &JobArgs) -> anyhow::Result<JobConfig> {
    if j.workers == 0 {
        bail!("--workers must be at least 1");
    }
    let mut c = JobConfig::new(corpus, j.workers);
    c.task_size = j
        .task_size
        .unwrap_or_else(|| scale::task_size(corpus_bytes, j.workers));
    c.bucket_size = j
        .bucket_size
        .unwrap_or_else(|| scale::bucket_size(corpus_bytes, j.workers));
    c.chunk_size = j.chunk_size;
    c.win_size = j.win_size;
    c.skew = j.skew.clone();
    c.redundant_lock_opt = j.redundant_locks;
    c.checkpoint = j.checkpoint_dir.as_ref().map(|d| CheckpointConfig {
        dir: d.clone(),
        resume: j.resume,
    });
    if j.checkpoint_dir.is_some() && j.engine == Engine::TwoSided {
        bail!("checkpointing is only implemented by the 1s engine");
    }
    c.validate()?;
    Ok(c)
}

/// Runs one job with the memory sampler attached.
pub fn run_once(engine: Engine, cfg: &JobConfig) -> decoupled_mr::Result<JobSummary> {
    let sampler = MemorySampler::start(Duration::from_millis(50));
    let result = match engine {
        Engine::OneSided => run_job(cfg, Arc::new(WordCount)),
        Engine::TwoSided => run_job_2s(cfg, Arc::new(WordCount)),
    };
    let peak = sampler.finish();
    result.map(|mut s| {
        s.peak_mem_bytes = peak;
        s
    })
}

fn corpus_len(path: &Path) -> anyhow::Result<u64> {
    Ok(fs::metadata(path)
        .with_context(|| format!("corpus {}", path.display()))?
        .len())
}

fn expected_digest(corpus: &Path, oracle: Option<&Path>) -> anyhow::Result<String> {
    let path = oracle
        .map(Path::to_path_buf)
        .unwrap_or_else(|| oracle_path(corpus));
    let counts = read_oracle_csv(&path).with_context(|| format!("oracle {}", path.display()))?;
    Ok(counts_digest(&counts))
}

fn open_report<'o>(
    csv: Option<&Path>,
    out: &'o mut dyn Write,
) -> anyhow::Result<Report<Box<dyn Write + 'o>>> {
    let sink: Box<dyn Write + 'o> = match csv {
        Some(p) => {
            Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)
        }
        None => Box::new(out),
    };
    Ok(Report::new(sink)?)
}

/// Runs `reps` repetitions into `report`; returns their rows.
fn repeat<'o>(
    engine: Engine,
    cfg: &JobConfig,
    reps: usize,
    expect: Option<&str>,
    report: &mut Report<Box<dyn Write + 'o>>,
) -> anyhow::Result<(Vec<Row>, Outcome)> {
    let mut rows = Vec::with_capacity(reps);
    let mut outcome = Outcome::Ok;
    for rep in 0..reps {
        match run_once(engine, cfg) {
            Ok(s) => {
                if let Some(want) = expect {
                    if s.result_digest != want {
                        log::error!(
                            "rep {rep}: digest {} differs from oracle {want}",
                            s.result_digest
                        );
                        outcome = outcome.worst(Outcome::VerifyFailed);
                    }
                }
                let row = Row::from_summary(&s, rep);
                report.push(&row)?;
                rows.push(row);
            }
            Err(e) => {
                log::error!("rep {rep} aborted: {e}");
                let template = Row {
                    engine: match engine {
                        Engine::OneSided => "1s",
                        Engine::TwoSided => "2s",
                    }
                    .into(),
                    workers: cfg.num_workers,
                    corpus_bytes: corpus_len(&cfg.filename).unwrap_or(0),
                    task_size: cfg.task_size,
                    chunk_size: cfg.chunk_size,
                    skew: cfg.skew.to_string(),
                    checkpoint: cfg.checkpoint.is_some(),
                    rep: String::new(),
                    t_map: 0.0,
                    t_reduce: 0.0,
                    t_combine: 0.0,
                    t_total: 0.0,
                    peak_mem: None,
                    digest: String::new(),
                };
                report.push(&Row::aborted(&template, rep))?;
                return Ok((rows, Outcome::Aborted));
            }
        }
    }
    if let Some((m, sd)) = aggregate(&rows) {
        report.push(&m)?;
        report.push(&sd)?;
    }
    Ok((rows, outcome))
}

fn run(a: RunArgs, out: &mut dyn Write) -> anyhow::Result<Outcome> {
    if a.reps == 0 {
        bail!("--reps must be at least 1");
    }
    let len = corpus_len(&a.corpus)?;
    let cfg = job_config(&a.corpus, len, &a.job)?;
    let expect = if a.verify {
        Some(expected_digest(&a.corpus, a.oracle.as_deref())?)
    } else {
        None
    };
    let mut report = open_report(a.csv.as_deref(), out)?;
    let (_, outcome) = repeat(a.job.engine, &cfg, a.reps, expect.as_deref(), &mut report)?;
    Ok(outcome)
}

fn verify(a: VerifyArgs, out: &mut dyn Write) -> anyhow::Result<Outcome> {
    let len = corpus_len(&a.corpus)?;
    let cfg = job_config(&a.corpus, len, &a.job)?;
    let want = expected_digest(&a.corpus, a.oracle.as_deref())?;
    match run_once(a.job.engine, &cfg) {
        Ok(s) if s.result_digest == want => {
            writeln!(out, "ok {want}")?;
            Ok(Outcome::Ok)
        }
        Ok(s) => {
            writeln!(out, "mismatch: oracle {want}, result {}", s.result_digest)?;
            Ok(Outcome::VerifyFailed)
        }
        Err(e) => {
            writeln!(out, "aborted: {e}")?;
            Ok(Outcome::Aborted)
        }
    }
}

/// Generates (or reuses) a cached corpus in `dir`.
pub fn cached_corpus(dir: &Path, size: u64, zipf: f64, seed: u64) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("corpus-{size}-z{zipf}-s{seed}.txt"));
    let oracle = oracle_path(&path);
    let fresh = fs::metadata(&path)
        .map(|m| m.len() == size)
        .unwrap_or(false)
        && oracle.exists();
    if !fresh {
        let spec = CorpusSpec {
            size,
            zipf_s: zipf,
            seed,
            ..CorpusSpec::default()
        };
        generate_corpus(&spec, &path)?.write_csv(&oracle)?;
    }
    Ok(path)
}

fn sweep(a: SweepArgs, out: &mut dyn Write) -> anyhow::Result<Outcome> {
    if a.workers.is_empty() || a.workers.contains(&0) {
        bail!("--workers needs positive counts");
    }
    if a.reps == 0 {
        bail!("--reps must be at least 1");
    }
    let mut report = open_report(a.csv.as_deref(), out)?;
    let mut outcome = Outcome::Ok;
    for &engine in &a.engines {
        let mut previous: Option<f64> = None;
        for &w in &a.workers {
            let size = match a.mode {
                SweepMode::Strong => a.size,
                SweepMode::Weak => a.size * w as u64,
            };
            let corpus = cached_corpus(&a.dir, size, a.zipf, a.seed)?;
            let job = JobArgs {
                engine,
                workers: w,
                task_size: None,
                chunk_size: a.chunk_size,
                bucket_size: None,
                win_size: 0,
                skew: if a.skewed {
                    SkewProfile::worker(0, 4)
                } else {
                    SkewProfile::balanced()
                },
                checkpoint_dir: None,
                resume: false,
                redundant_locks: false,
            };
            let cfg = job_config(&corpus, size, &job)?;
            let expect = if a.verify {
                Some(expected_digest(&corpus, None)?)
            } else {
                None
            };
            let (rows, o) = repeat(engine, &cfg, a.reps, expect.as_deref(), &mut report)?;
            outcome = outcome.worst(o);
            if o == Outcome::Aborted {
                return Ok(outcome);
            }
            let total = crate::report::mean(&rows.iter().map(|r| r.t_total).collect::<Vec<_>>());
            if a.mode == SweepMode::Strong {
                if let Some(prev) = previous.filter(|&p| total >= p) {
                    log::warn!(
                        "strong scaling: {w} workers took {total:.3}s, not below {prev:.3}s"
                    );
                }
            }
            previous = Some(total);
        }
    }
    Ok(outcome)
}
