//! Peak resident memory, sampled from `/proc/self/status`.

use std::fs;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

/// Current resident set size in bytes, if the platform exposes it.
pub fn resident_bytes() -> Option<u64> {
    status_field("VmRSS:")
}

fn status_field(name: &str) -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with(name))?;
    let kib: u64 = line[name.len()..]
        .trim()
        .trim_end_matches("kB")
        .trim()
        .parse()
        .ok()?;
    Some(kib * 1024)
}

/// Background thread recording the largest resident set seen.
pub struct MemorySampler {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<Option<u64>>,
}

impl MemorySampler {
    /// Starts sampling every `interval` (the harness uses 50 ms, i.e. 20 Hz).
    pub fn start(interval: Duration) -> MemorySampler {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = thread::Builder::new()
            .name("mem-sampler".into())
            .spawn(move || {
                let mut peak = resident_bytes();
                while !flag.load(Ordering::Relaxed) {
                    thread::sleep(interval);
                    if let Some(now) = resident_bytes() {
                        peak = Some(peak.map_or(now, |p| p.max(now)));
                    }
                }
                peak
            })
            .expect("failed to spawn memory sampler");
        MemorySampler { stop, handle }
    }

    /// Stops sampling; `None` when the counter is unavailable.
    pub fn finish(self) -> Option<u64> {
        self.stop.store(true, Ordering::Relaxed);
        self.handle.join().ok().flatten()
    }
}
