//! End-to-end acceptance run. One line per criterion; exits non-zero if any fail.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use decoupled_mr::dataset::{
    generate_corpus, read_oracle_csv, write_oracle_csv, CorpusSpec, SkewProfile,
};
use decoupled_mr::engine::{CheckpointConfig, FaultPlan, ResumePhase};
use decoupled_mr::{run_job, run_job_2s, Error, JobConfig, JobSummary, UseCase, WordCount};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MIB: u64 = 1 << 20;
const KIB: u64 = 1 << 10;

type Engine = fn(&JobConfig, Arc<dyn UseCase>) -> decoupled_mr::Result<JobSummary>;

fn wc() -> Arc<dyn UseCase> {
    Arc::new(WordCount)
}

struct Corpus {
    path: PathBuf,
    oracle: BTreeMap<Vec<u8>, u64>,
    tokens: u64,
}

fn corpus(dir: &Path, size: u64, zipf_s: f64, seed: u64) -> Corpus {
    let path = dir.join(format!("c-{size}-{zipf_s}-{seed}.txt"));
    let spec = CorpusSpec {
        size,
        zipf_s,
        seed,
        ..CorpusSpec::default()
    };
    let report = generate_corpus(&spec, &path).expect("generate corpus");
    let csv = path.with_extension("oracle.csv");
    write_oracle_csv(&report.counts, &csv).expect("write oracle");
    Corpus {
        path,
        oracle: read_oracle_csv(&csv).expect("read oracle"),
        tokens: report.token_count,
    }
}

/// Task and bucket size as the benchmark CLI picks them for corpora under 1 GiB.
fn scaled(size: u64, p: usize) -> u64 {
    (size / (4 * p as u64)).max(64 * KIB)
}

fn job(c: &Corpus, size: u64, p: usize) -> JobConfig {
    let mut cfg = JobConfig::new(&c.path, p);
    cfg.task_size = scaled(size, p);
    cfg.bucket_size = scaled(size, p);
    cfg.chunk_size = MIB;
    cfg
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn median_total(cfg: &JobConfig, engine: Engine, reps: usize) -> Result<f64, String> {
    let mut t = Vec::new();
    for _ in 0..reps {
        let s = engine(cfg, wc()).map_err(|e| e.to_string())?;
        t.push(s.t_total);
    }
    Ok(median(t))
}

fn engines() -> [(&'static str, Engine); 2] {
    [("1s", run_job as Engine), ("2s", run_job_2s as Engine)]
}

type Outcome = Result<String, String>;

fn oracle_matrix(dir: &Path) -> Outcome {
    let size = 64 * MIB;
    let mut jobs = 0;
    for zipf_s in [0.0, 1.2] {
        let c = corpus(dir, size, zipf_s, 11);
        for (name, engine) in engines() {
            for p in [1, 2, 3, 4, 8, 16] {
                for skew in [SkewProfile::balanced(), SkewProfile::worker(0, 4)] {
                    for chunk in [64 * KIB, MIB] {
                        let mut cfg = job(&c, size, p);
                        cfg.skew = skew.clone();
                        cfg.chunk_size = chunk;
                        let s = engine(&cfg, wc()).map_err(|e| e.to_string())?;
                        let got = s.word_counts().map_err(|e| e.to_string())?;
                        if got != c.oracle {
                            return Err(format!(
                                "{name} P={p} zipf={zipf_s} skew={skew} chunk={chunk}: mismatch"
                            ));
                        }
                        jobs += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{jobs} jobs equal the oracle"))
}

fn seal_stress(dir: &Path) -> Outcome {
    // About 10^5 words.
    let c = corpus(dir, 740 * KIB, 1.1, 5);
    if !(95_000..=105_000).contains(&c.tokens) {
        return Err(format!("stress corpus has {} tokens", c.tokens));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut transferred_trials = 0;
    let mut trials = 0;
    for p in [2, 4] {
        for trial in 0..1000u64 {
            let mut cfg = JobConfig::new(&c.path, p);
            cfg.task_size = rng.gen_range(8..64) * KIB;
            cfg.bucket_size = rng.gen_range(64..4096);
            cfg.chunk_size = rng.gen_range(256..8192);
            cfg.jitter = Some(trial);
            cfg.skew = match rng.gen_range(0..3) {
                0 => SkewProfile::balanced(),
                1 => SkewProfile::worker(0, 4),
                _ => SkewProfile::worker(p - 1, 3),
            };
            let s = run_job(&cfg, wc()).map_err(|e| e.to_string())?;
            let folded: u64 = s.word_counts().map_err(|e| e.to_string())?.values().sum();
            if folded != c.tokens || s.stats.emitted != c.tokens {
                return Err(format!(
                    "P={p} trial {trial}: folded {folded} of {} emitted",
                    c.tokens
                ));
            }
            if s.stats.transferred > 0 {
                transferred_trials += 1;
            }
            trials += 1;
        }
    }
    Ok(format!(
        "{trials}/{trials} trials conserved {} emissions, {transferred_trials} with ownership transfer",
        c.tokens
    ))
}

fn combine_shape(dir: &Path) -> Outcome {
    let c = corpus(dir, MIB, 1.1, 3);
    for p in 1..=16usize {
        let want = (p as f64).log2().ceil() as usize + 1;
        for (name, engine) in engines() {
            let mut cfg = job(&c, MIB, p);
            cfg.task_size = 16 * KIB;
            let s = engine(&cfg, wc()).map_err(|e| e.to_string())?;
            if s.combine_levels() != want {
                return Err(format!(
                    "{name} P={p}: {} levels, want {want}",
                    s.combine_levels()
                ));
            }
            if !s.combine_trace.iter().all(|t| t.sorted) {
                return Err(format!("{name} P={p}: unsorted run"));
            }
        }
    }
    Ok("levels = ceil(log2 P) + 1 and all runs sorted for P 1..16".into())
}

fn imbalance(c: &Corpus) -> Outcome {
    let mut cfg = job(c, 256 * MIB, 8);
    cfg.skew = SkewProfile::worker(0, 4);
    let one = median_total(&cfg, run_job, 5)?;
    let two = median_total(&cfg, run_job_2s, 5)?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let detail = format!(
        "median 1s {one:.3}s, 2s {two:.3}s, ratio {:.3} (limit 0.90, {threads} hardware threads)",
        one / two
    );
    if one <= 0.90 * two {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn parity(c: &Corpus) -> Outcome {
    let cfg = job(c, 256 * MIB, 8);
    let one = median_total(&cfg, run_job, 5)?;
    let two = median_total(&cfg, run_job_2s, 5)?;
    let gap = (one - two).abs() / two;
    let detail = format!(
        "median 1s {one:.3}s, 2s {two:.3}s, gap {:.1}% (limit 15%)",
        gap * 100.0
    );
    if gap <= 0.15 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn checkpoint(dir: &Path, c: &Corpus) -> Outcome {
    let plain = job(c, 256 * MIB, 8);
    let mut backed = plain.clone();
    backed.checkpoint = Some(CheckpointConfig {
        dir: dir.join("ck-overhead"),
        resume: false,
    });
    let off = median_total(&plain, run_job, 5)?;
    let on = median_total(&backed, run_job, 5)?;
    let overhead = on / off - 1.0;

    let small = corpus(dir, 4 * MIB, 1.1, 21);
    let mut cfg = job(&small, 4 * MIB, 4);
    cfg.task_size = 128 * KIB;
    cfg.checkpoint = Some(CheckpointConfig {
        dir: dir.join("ck-restart"),
        resume: true,
    });
    cfg.fault = Some(FaultPlan {
        rank: 2,
        after_tasks: 4,
    });
    match run_job(&cfg, wc()) {
        Err(Error::InjectedFault { .. }) => {}
        other => {
            return Err(format!(
                "fault not raised: {:?}",
                other.map(|s| s.result_digest)
            ))
        }
    }
    cfg.fault = None;
    let s = run_job(&cfg, wc()).map_err(|e| e.to_string())?;
    let restart_ok = s.resumed == Some(ResumePhase::Map)
        && s.word_counts().map_err(|e| e.to_string())? == small.oracle;

    let detail = format!(
        "median off {off:.3}s, on {on:.3}s, overhead {:.1}% (limit 15%); restart {}",
        overhead * 100.0,
        if restart_ok {
            "matches oracle"
        } else {
            "wrong"
        }
    );
    if overhead <= 0.15 && restart_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn barrier_audit(dir: &Path) -> Outcome {
    let c = corpus(dir, 2 * MIB, 1.1, 4);
    for p in [1, 2, 4, 8, 16] {
        let cfg = job(&c, 2 * MIB, p);
        let one = run_job(&cfg, wc()).map_err(|e| e.to_string())?.barriers;
        let two = run_job_2s(&cfg, wc()).map_err(|e| e.to_string())?.barriers;
        if one != 2 || two < 4 {
            return Err(format!("P={p}: 1s {one}, 2s {two}"));
        }
    }
    Ok("1s = 2 barriers, 2s >= 4 for P in {1,2,4,8,16}".into())
}

fn coupling(dir: &Path) -> Outcome {
    let c = corpus(dir, 32 * MIB, 1.1, 6);
    let mut cfg = job(&c, 32 * MIB, 8);
    cfg.skew = SkewProfile::worker(0, 4);
    let two = run_job_2s(&cfg, wc()).map_err(|e| e.to_string())?;
    let slow = two.timelines[0].map_end;
    let coupled = two.timelines.iter().all(|t| t.reduce_start >= slow);
    let one = run_job(&cfg, wc()).map_err(|e| e.to_string())?;
    let slow1 = one.timelines[0].map_end;
    let early = one
        .timelines
        .iter()
        .filter(|t| t.reduce_start < slow1)
        .count();
    let detail = format!(
        "2s: every reduce after worker 0 map end = {coupled}; 1s: {early} workers reduce before it"
    );
    if coupled && early > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("tempdir");
    let d = dir.path();
    let mut failed = 0;
    let mut report = |n: usize, started: Instant, r: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match r {
            Ok(m) => println!("criterion {n}: PASS {m} [{secs:.0}s]"),
            Err(m) => {
                failed += 1;
                println!("criterion {n}: FAIL {m} [{secs:.0}s]");
            }
        }
    };

    let t = Instant::now();
    report(1, t, oracle_matrix(d));
    let t = Instant::now();
    report(2, t, seal_stress(d));
    let t = Instant::now();
    report(3, t, combine_shape(d));

    let big = corpus(d, 256 * MIB, 1.1, 42);
    let t = Instant::now();
    report(4, t, imbalance(&big));
    let t = Instant::now();
    report(5, t, parity(&big));
    let t = Instant::now();
    report(6, t, checkpoint(d, &big));
    drop(big);

    let t = Instant::now();
    report(7, t, barrier_audit(d));
    let t = Instant::now();
    report(8, t, coupling(d));

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
