//! One-sided communication substrate.
//!
//! A [`Fabric`] hosts `size` ranks. Every rank owns a set of windows addressed
//! by `(rank, WindowId, offset)`; any rank can `put`/`get` into another rank's
//! window inside a passive-target lock epoch, or operate on 64-bit words with
//! linearizable atomics. Windows are dynamic: regions can be attached at any
//! time by their owner without collective synchronization, and are identified
//! by a [`Displacement`] in a per-window address space.
//!
//! This transport keeps all windows in a single address space and runs one
//! worker per thread. Window memory is stored as `AtomicU64` words so that
//! concurrent byte transfers and atomics on the same region are sound.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{fence, AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::Duration;

use crate::error::{Error, Result};

pub type Rank = usize;

/// Granularity of dirty tracking for storage-backed windows.
pub const PAGE_SIZE: u64 = 4096;

/// Alignment of every attached region after the first.
const REGION_ALIGN: u64 = PAGE_SIZE;

const WAIT_SLICE: Duration = Duration::from_millis(20);

/// Identifies one logical window of a worker; numbering is identical on every rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowId(pub u16);

/// Byte offset of an attached region inside a dynamic window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Displacement(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LockKind {
    Shared,
    Exclusive,
}

fn zeroed_words(n: usize) -> Result<Box<[AtomicU64]>> {
    if n == 0 {
        return Ok(Box::new([]));
    }
    let layout = std::alloc::Layout::array::<AtomicU64>(n)
        .map_err(|_| Error::Resource(format!("region of {n} words is too large")))?;
    // SAFETY: layout is non-zero sized; an all-zero bit pattern is a valid
    // AtomicU64, and the allocation is handed to Box with the same layout.
    unsafe {
        let ptr = std::alloc::alloc_zeroed(layout) as *mut AtomicU64;
        if ptr.is_null() {
            return Err(Error::Resource(format!(
                "failed to allocate {} bytes",
                n * 8
            )));
        }
        Ok(Box::from_raw(std::ptr::slice_from_raw_parts_mut(ptr, n)))
    }
}

/// A contiguous, zero-initialized block of window memory.
pub struct Region {
    disp: u64,
    len: u64,
    words: Box<[AtomicU64]>,
    dirty: Option<Box<[AtomicU64]>>,
}

impl Region {
    fn new(disp: u64, len: u64, track_dirty: bool) -> Result<Region> {
        let words = zeroed_words(len.div_ceil(8) as usize)?;
        let dirty = if track_dirty {
            let pages = len.div_ceil(PAGE_SIZE);
            Some(zeroed_words(pages.div_ceil(64) as usize)?)
        } else {
            None
        };
        Ok(Region {
            disp,
            len,
            words,
            dirty,
        })
    }

    pub fn displacement(&self) -> Displacement {
        Displacement(self.disp)
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn end(&self) -> u64 {
        self.disp + self.len
    }

    /// Copies `out.len()` bytes starting at region-relative offset `at`.
    pub fn read(&self, at: u64, out: &mut [u8]) {
        let mut pos = at as usize;
        let mut done = 0;
        while done < out.len() {
            let w = pos / 8;
            let shift = pos % 8;
            let take = (8 - shift).min(out.len() - done);
            let bytes = self.words[w].load(Ordering::Relaxed).to_le_bytes();
            out[done..done + take].copy_from_slice(&bytes[shift..shift + take]);
            done += take;
            pos += take;
        }
    }

    /// Writes `data` at region-relative offset `at`.
    pub fn write(&self, at: u64, data: &[u8]) {
        let mut pos = at as usize;
        let mut done = 0;
        while done < data.len() {
            let w = pos / 8;
            let shift = pos % 8;
            let take = (8 - shift).min(data.len() - done);
            if take == 8 {
                let v = u64::from_le_bytes(data[done..done + 8].try_into().unwrap());
                self.words[w].store(v, Ordering::Relaxed);
            } else {
                let _ = self.words[w].fetch_update(Ordering::Relaxed, Ordering::Relaxed, |old| {
                    let mut bytes = old.to_le_bytes();
                    bytes[shift..shift + take].copy_from_slice(&data[done..done + take]);
                    Some(u64::from_le_bytes(bytes))
                });
            }
            done += take;
            pos += take;
        }
        self.mark_dirty(at, data.len() as u64);
    }

    fn word(&self, at: u64) -> &AtomicU64 {
        &self.words[(at / 8) as usize]
    }

    fn mark_dirty(&self, at: u64, len: u64) {
        let Some(bits) = &self.dirty else { return };
        if len == 0 {
            return;
        }
        let first = at / PAGE_SIZE;
        let last = (at + len - 1) / PAGE_SIZE;
        for page in first..=last {
            bits[(page / 64) as usize].fetch_or(1 << (page % 64), Ordering::Release);
        }
    }

    /// Marks every page dirty (used right after attaching a tracked region).
    fn mark_all_dirty(&self) {
        self.mark_dirty(0, self.len);
    }

    /// Clears and returns the dirty pages as region-relative byte ranges.
    pub fn take_dirty(&self) -> Vec<(u64, u64)> {
        let Some(bits) = &self.dirty else {
            return Vec::new();
        };
        let mut ranges: Vec<(u64, u64)> = Vec::new();
        for (i, word) in bits.iter().enumerate() {
            let mut set = word.swap(0, Ordering::AcqRel);
            while set != 0 {
                let b = set.trailing_zeros() as u64;
                set &= set - 1;
                let start = (i as u64 * 64 + b) * PAGE_SIZE;
                let end = (start + PAGE_SIZE).min(self.len);
                match ranges.last_mut() {
                    Some(last) if last.1 == start => last.1 = end,
                    _ => ranges.push((start, end)),
                }
            }
        }
        ranges
    }

    pub fn has_dirty(&self) -> bool {
        self.dirty
            .as_ref()
            .is_some_and(|bits| bits.iter().any(|w| w.load(Ordering::Acquire) != 0))
    }
}

impl fmt::Debug for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Region")
            .field("disp", &self.disp)
            .field("len", &self.len)
            .finish()
    }
}

#[derive(Default)]
struct LockState {
    next_ticket: u64,
    queue: VecDeque<(u64, LockKind)>,
    shared: usize,
    exclusive: bool,
}

/// FIFO reader/writer lock backing passive-target epochs.
#[derive(Default)]
struct EpochLock {
    state: Mutex<LockState>,
    cv: Condvar,
}

impl EpochLock {
    fn acquire(&self, kind: LockKind, aborted: &AtomicBool) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        let ticket = st.next_ticket;
        st.next_ticket += 1;
        st.queue.push_back((ticket, kind));
        loop {
            let grantable = st.queue.front().map(|&(t, _)| t) == Some(ticket)
                && match kind {
                    LockKind::Shared => !st.exclusive,
                    LockKind::Exclusive => !st.exclusive && st.shared == 0,
                };
            if grantable {
                st.queue.pop_front();
                match kind {
                    LockKind::Shared => st.shared += 1,
                    LockKind::Exclusive => st.exclusive = true,
                }
                // A following shared request may now be at the front.
                self.cv.notify_all();
                fence(Ordering::Acquire);
                return Ok(());
            }
            if aborted.load(Ordering::Acquire) {
                st.queue.retain(|&(t, _)| t != ticket);
                self.cv.notify_all();
                return Err(Error::Aborted);
            }
            st = self.cv.wait_timeout(st, WAIT_SLICE).unwrap().0;
        }
    }

    fn release(&self, kind: LockKind) {
        fence(Ordering::Release);
        let mut st = self.state.lock().unwrap();
        match kind {
            LockKind::Shared => st.shared -= 1,
            LockKind::Exclusive => st.exclusive = false,
        }
        self.cv.notify_all();
    }
}

/// A remotely addressable window owned by one rank.
pub struct Window {
    owner: Rank,
    id: WindowId,
    track_dirty: bool,
    regions: RwLock<Vec<Arc<Region>>>,
    lock: EpochLock,
}

impl Window {
    /// Creates a window with one zero-filled region of `initial_size` bytes at
    /// displacement 0 (no region when `initial_size` is 0).
    pub fn new(owner: Rank, id: WindowId, initial_size: u64, track_dirty: bool) -> Result<Window> {
        let w = Window {
            owner,
            id,
            track_dirty,
            regions: RwLock::new(Vec::new()),
            lock: EpochLock::default(),
        };
        if initial_size > 0 {
            w.attach(initial_size)?;
        }
        Ok(w)
    }

    pub fn owner(&self) -> Rank {
        self.owner
    }

    pub fn id(&self) -> WindowId {
        self.id
    }

    pub fn tracks_dirty(&self) -> bool {
        self.track_dirty
    }

    /// Appends a zero-filled region past every existing one.
    pub fn attach(&self, size: u64) -> Result<Displacement> {
        let mut regions = self.regions.write().unwrap();
        let disp = match regions.last() {
            None => 0,
            Some(last) => (last.end() + 1).next_multiple_of(REGION_ALIGN),
        };
        let region = Region::new(disp, size, self.track_dirty)?;
        if self.track_dirty {
            region.mark_all_dirty();
        }
        regions.push(Arc::new(region));
        Ok(Displacement(disp))
    }

    /// Attaches a region at a fixed displacement; used when restoring a
    /// window image. The displacement must lie past every existing region.
    pub fn attach_at(&self, disp: Displacement, size: u64) -> Result<Arc<Region>> {
        let mut regions = self.regions.write().unwrap();
        if let Some(last) = regions.last() {
            if disp.0 < last.end() {
                return Err(Error::Config(format!(
                    "region at {} overlaps existing region ending at {}",
                    disp.0,
                    last.end()
                )));
            }
        }
        let region = Arc::new(Region::new(disp.0, size, self.track_dirty)?);
        regions.push(region.clone());
        Ok(region)
    }

    /// Snapshot of the attached regions in displacement order.
    pub fn regions(&self) -> Vec<Arc<Region>> {
        self.regions.read().unwrap().clone()
    }

    /// Finds the region holding `[offset, offset+len)` and returns it with the
    /// region-relative start.
    fn locate(&self, offset: u64, len: u64) -> Result<(Arc<Region>, u64)> {
        let regions = self.regions.read().unwrap();
        let idx = regions.partition_point(|r| r.disp <= offset);
        let found = idx
            .checked_sub(1)
            .map(|i| &regions[i])
            .filter(|r| offset + len <= r.end());
        match found {
            Some(r) => Ok((r.clone(), offset - r.disp)),
            None => Err(Error::Protocol {
                rank: self.owner,
                window: self.id,
                msg: format!(
                    "access [{offset}, {}) outside attached regions",
                    offset + len
                ),
            }),
        }
    }

    fn locate_word(&self, offset: u64) -> Result<(Arc<Region>, u64)> {
        let (r, at) = self.locate(offset, 8)?;
        if at % 8 != 0 {
            return Err(Error::Usage(format!(
                "atomic at offset {offset} is not 8-byte aligned"
            )));
        }
        Ok((r, at))
    }
}

impl fmt::Debug for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Window")
            .field("owner", &self.owner)
            .field("id", &self.id)
            .field("regions", &*self.regions.read().unwrap())
            .finish()
    }
}

#[derive(Default)]
struct BarrierState {
    arrived: usize,
    generation: u64,
}

/// Generation barrier that counts completed episodes for auditing.
struct AuditBarrier {
    parties: usize,
    state: Mutex<BarrierState>,
    cv: Condvar,
    episodes: AtomicU64,
}

impl AuditBarrier {
    fn wait(&self, aborted: &AtomicBool) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        let gen = st.generation;
        st.arrived += 1;
        if st.arrived == self.parties {
            st.arrived = 0;
            st.generation += 1;
            self.episodes.fetch_add(1, Ordering::SeqCst);
            self.cv.notify_all();
            return Ok(());
        }
        while st.generation == gen {
            if aborted.load(Ordering::Acquire) {
                return Err(Error::Aborted);
            }
            st = self.cv.wait_timeout(st, WAIT_SLICE).unwrap().0;
        }
        Ok(())
    }
}

struct Message {
    src: Rank,
    tag: u64,
    data: Vec<u8>,
}

#[derive(Default)]
struct Mailbox {
    queue: Mutex<VecDeque<Message>>,
    cv: Condvar,
}

/// The set of ranks and their windows for one job.
pub struct Fabric {
    size: usize,
    windows: Vec<RwLock<HashMap<WindowId, Arc<Window>>>>,
    barrier: AuditBarrier,
    mailboxes: Vec<Mailbox>,
    aborted: AtomicBool,
}

impl Fabric {
    pub fn new(size: usize) -> Arc<Fabric> {
        assert!(size >= 1, "a fabric needs at least one rank");
        Arc::new(Fabric {
            size,
            windows: (0..size).map(|_| RwLock::default()).collect(),
            barrier: AuditBarrier {
                parties: size,
                state: Mutex::default(),
                cv: Condvar::new(),
                episodes: AtomicU64::new(0),
            },
            mailboxes: (0..size).map(|_| Mailbox::default()).collect(),
            aborted: AtomicBool::new(false),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Handle through which `rank` issues operations.
    pub fn endpoint(self: &Arc<Self>, rank: Rank) -> Endpoint {
        assert!(rank < self.size);
        Endpoint {
            fabric: self.clone(),
            rank,
            epochs: RefCell::default(),
            cache: RefCell::default(),
            transfers: Cell::new(0),
        }
    }

    /// Number of completed barrier episodes since the fabric was created.
    pub fn barrier_count(&self) -> u64 {
        self.barrier.episodes.load(Ordering::SeqCst)
    }

    /// Wakes every blocked worker with [`Error::Aborted`].
    pub fn abort(&self) {
        self.aborted.store(true, Ordering::Release);
        self.barrier.cv.notify_all();
        for m in &self.mailboxes {
            m.cv.notify_all();
        }
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted.load(Ordering::Acquire)
    }

    /// Looks up a window of any rank.
    pub fn window(&self, rank: Rank, id: WindowId) -> Option<Arc<Window>> {
        self.windows.get(rank)?.read().unwrap().get(&id).cloned()
    }
}

/// Per-worker handle; tracks the epochs opened by this rank.
///
/// An endpoint belongs to one worker context and is not shared between threads.
pub struct Endpoint {
    fabric: Arc<Fabric>,
    rank: Rank,
    epochs: RefCell<HashMap<(Rank, WindowId), LockKind>>,
    cache: RefCell<HashMap<(Rank, WindowId), Arc<Window>>>,
    transfers: Cell<u64>,
}

impl Endpoint {
    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.fabric.size
    }

    pub fn fabric(&self) -> &Arc<Fabric> {
        &self.fabric
    }

    /// Number of underlying put/get transfers issued by this endpoint.
    pub fn transfers(&self) -> u64 {
        self.transfers.get()
    }

    pub fn create_window(&self, id: WindowId, initial_size: u64) -> Result<Arc<Window>> {
        let w = Arc::new(Window::new(self.rank, id, initial_size, false)?);
        self.register_window(w.clone())?;
        Ok(w)
    }

    /// Makes an externally constructed window (e.g. storage-backed) remotely addressable.
    pub fn register_window(&self, w: Arc<Window>) -> Result<()> {
        if w.owner != self.rank {
            return Err(Error::Config(format!(
                "rank {} cannot register a window owned by rank {}",
                self.rank, w.owner
            )));
        }
        let mut map = self.fabric.windows[self.rank].write().unwrap();
        if map.contains_key(&w.id) {
            return Err(Error::Config(format!(
                "window {:?} already exists on rank {}",
                w.id, self.rank
            )));
        }
        map.insert(w.id, w);
        Ok(())
    }

    fn window(&self, target: Rank, id: WindowId) -> Result<Arc<Window>> {
        if let Some(w) = self.cache.borrow().get(&(target, id)) {
            return Ok(w.clone());
        }
        let w = self.fabric.window(target, id).ok_or_else(|| {
            Error::Usage(format!("window {id:?} does not exist on rank {target}"))
        })?;
        self.cache.borrow_mut().insert((target, id), w.clone());
        Ok(w)
    }

    /// Attaches a new region to one of this rank's own windows.
    pub fn attach_region(&self, id: WindowId, size: u64) -> Result<Displacement> {
        self.window(self.rank, id)?.attach(size)
    }

    fn require_epoch(&self, target: Rank, id: WindowId) -> Result<()> {
        if self.epochs.borrow().contains_key(&(target, id)) {
            Ok(())
        } else {
            Err(Error::Usage(format!(
                "rank {} has no epoch open on ({target}, {id:?})",
                self.rank
            )))
        }
    }

    pub fn put(&self, target: Rank, id: WindowId, offset: u64, data: &[u8]) -> Result<()> {
        self.require_epoch(target, id)?;
        let w = self.window(target, id)?;
        let (region, at) = w.locate(offset, data.len() as u64)?;
        region.write(at, data);
        self.transfers.set(self.transfers.get() + 1);
        Ok(())
    }

    pub fn get(&self, target: Rank, id: WindowId, offset: u64, len: u64) -> Result<Vec<u8>> {
        let mut out = vec![0u8; len as usize];
        self.get_into(target, id, offset, &mut out)?;
        Ok(out)
    }

    pub fn get_into(&self, target: Rank, id: WindowId, offset: u64, out: &mut [u8]) -> Result<()> {
        self.require_epoch(target, id)?;
        let w = self.window(target, id)?;
        let (region, at) = w.locate(offset, out.len() as u64)?;
        region.read(at, out);
        self.transfers.set(self.transfers.get() + 1);
        Ok(())
    }

    /// `get` split into transfers of at most `chunk_limit` bytes.
    pub fn get_chunked(
        &self,
        target: Rank,
        id: WindowId,
        offset: u64,
        len: u64,
        chunk_limit: u64,
    ) -> Result<Vec<u8>> {
        if chunk_limit == 0 {
            return Err(Error::Usage("chunk limit must be positive".into()));
        }
        self.require_epoch(target, id)?;
        let mut out = vec![0u8; len as usize];
        for (i, chunk) in out.chunks_mut(chunk_limit as usize).enumerate() {
            self.get_into(target, id, offset + i as u64 * chunk_limit, chunk)?;
        }
        Ok(out)
    }

    pub fn atomic_replace(&self, target: Rank, id: WindowId, offset: u64, word: u64) -> Result<()> {
        let w = self.window(target, id)?;
        let (region, at) = w.locate_word(offset)?;
        region.word(at).store(word, Ordering::SeqCst);
        region.mark_dirty(at, 8);
        Ok(())
    }

    pub fn atomic_fetch(&self, target: Rank, id: WindowId, offset: u64) -> Result<u64> {
        let w = self.window(target, id)?;
        let (region, at) = w.locate_word(offset)?;
        Ok(region.word(at).load(Ordering::SeqCst))
    }

    pub fn compare_and_swap(
        &self,
        target: Rank,
        id: WindowId,
        offset: u64,
        expected: u64,
        desired: u64,
    ) -> Result<u64> {
        let w = self.window(target, id)?;
        let (region, at) = w.locate_word(offset)?;
        let prior = match region.word(at).compare_exchange(
            expected,
            desired,
            Ordering::SeqCst,
            Ordering::SeqCst,
        ) {
            Ok(v) => {
                region.mark_dirty(at, 8);
                v
            }
            Err(v) => v,
        };
        Ok(prior)
    }

    /// Atomically ORs `mask` into the word, built from a CAS retry loop.
    pub fn fetch_or(&self, target: Rank, id: WindowId, offset: u64, mask: u64) -> Result<u64> {
        let mut current = self.atomic_fetch(target, id, offset)?;
        loop {
            if current & mask == mask {
                return Ok(current);
            }
            let prior = self.compare_and_swap(target, id, offset, current, current | mask)?;
            if prior == current {
                return Ok(prior);
            }
            current = prior;
        }
    }

    /// Opens an epoch on `(target, id)`, blocking until grantable.
    pub fn lock(&self, target: Rank, id: WindowId, kind: LockKind) -> Result<()> {
        if self.epochs.borrow().contains_key(&(target, id)) {
            return Err(Error::Usage(format!(
                "rank {} already holds a lock on ({target}, {id:?})",
                self.rank
            )));
        }
        let w = self.window(target, id)?;
        w.lock.acquire(kind, &self.fabric.aborted)?;
        self.epochs.borrow_mut().insert((target, id), kind);
        Ok(())
    }

    /// Closes the epoch; every transfer issued inside it is complete on return.
    pub fn unlock(&self, target: Rank, id: WindowId) -> Result<()> {
        let kind = self
            .epochs
            .borrow_mut()
            .remove(&(target, id))
            .ok_or_else(|| {
                Error::Usage(format!(
                    "rank {} unlocks ({target}, {id:?}) without holding a lock",
                    self.rank
                ))
            })?;
        self.window(target, id)?.lock.release(kind);
        Ok(())
    }

    pub fn holds_lock(&self, target: Rank, id: WindowId) -> bool {
        self.epochs.borrow().contains_key(&(target, id))
    }

    /// Releases every epoch still held; used when a job unwinds on error.
    pub fn release_all(&self) {
        let held: Vec<_> = self.epochs.borrow_mut().drain().collect();
        for ((target, id), kind) in held {
            if let Ok(w) = self.window(target, id) {
                w.lock.release(kind);
            }
        }
    }

    pub fn barrier(&self) -> Result<()> {
        self.fabric.barrier.wait(&self.fabric.aborted)
    }

    /// Two-sided send; never blocks.
    pub fn send(&self, dest: Rank, tag: u64, data: Vec<u8>) -> Result<()> {
        let mb = self
            .fabric
            .mailboxes
            .get(dest)
            .ok_or_else(|| Error::Usage(format!("no rank {dest}")))?;
        mb.queue.lock().unwrap().push_back(Message {
            src: self.rank,
            tag,
            data,
        });
        mb.cv.notify_all();
        Ok(())
    }

    /// Blocks until a message from `src` with `tag` arrives.
    pub fn recv(&self, src: Rank, tag: u64) -> Result<Vec<u8>> {
        let mb = &self.fabric.mailboxes[self.rank];
        let mut q = mb.queue.lock().unwrap();
        loop {
            if let Some(pos) = q.iter().position(|m| m.src == src && m.tag == tag) {
                return Ok(q.remove(pos).unwrap().data);
            }
            if self.fabric.is_aborted() {
                return Err(Error::Aborted);
            }
            q = mb.cv.wait_timeout(q, WAIT_SLICE).unwrap().0;
        }
    }
}
