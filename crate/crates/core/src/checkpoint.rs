//! Storage-backed windows and restart.
//!
//! Each window is mirrored into one file. Nothing reaches the file until
//! [`StorageWindow::win_sync`], which writes the dirty pages, then the
//! completed-task bitmap and region table, then the header, then fsyncs.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! 0   magic "DMRCKPT\0"
//! 8   version u32
//! 12  window id u32
//! 16  extent u64          end of the highest region in displacement space
//! 24  bitmap_offset u64   file offset of the bitmap, followed by the region table
//! 32  bitmap_bits u64
//! 40  region_count u32
//! 44  num_workers u32
//! 48  rank u32
//! 52  phase u32
//! 56  generation u64      number of completed syncs
//! 64  window bytes, displacement d stored at 64 + d
//! ```

use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::engine::{JobConfig, ResumePhase, WorkerStatus};
use crate::error::{Error, Result};
use crate::rma::{Displacement, Rank, Window, WindowId};

pub const MAGIC: [u8; 8] = *b"DMRCKPT\0";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 64;

/// Decoded checkpoint header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub window: WindowId,
    pub extent: u64,
    pub bitmap_offset: u64,
    pub bitmap_bits: u64,
    pub region_count: u32,
    pub num_workers: u32,
    pub rank: u32,
    pub phase: u32,
    pub generation: u64,
}

impl Header {
    pub fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[0..8].copy_from_slice(&MAGIC);
        b[8..12].copy_from_slice(&VERSION.to_le_bytes());
        b[12..16].copy_from_slice(&(self.window.0 as u32).to_le_bytes());
        b[16..24].copy_from_slice(&self.extent.to_le_bytes());
        b[24..32].copy_from_slice(&self.bitmap_offset.to_le_bytes());
        b[32..40].copy_from_slice(&self.bitmap_bits.to_le_bytes());
        b[40..44].copy_from_slice(&self.region_count.to_le_bytes());
        b[44..48].copy_from_slice(&self.num_workers.to_le_bytes());
        b[48..52].copy_from_slice(&self.rank.to_le_bytes());
        b[52..56].copy_from_slice(&self.phase.to_le_bytes());
        b[56..64].copy_from_slice(&self.generation.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Result<Header> {
        if b.len() < HEADER_LEN as usize {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        if b[0..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let id = u32_at(12);
        let window = WindowId(
            u16::try_from(id).map_err(|_| Error::Checkpoint(format!("bad window id {id}")))?,
        );
        Ok(Header {
            window,
            extent: u64_at(16),
            bitmap_offset: u64_at(24),
            bitmap_bits: u64_at(32),
            region_count: u32_at(40),
            num_workers: u32_at(44),
            rank: u32_at(48),
            phase: u32_at(52),
            generation: u64_at(56),
        })
    }
}

/// Conventional file name for a rank's window.
pub fn window_path(dir: &Path, rank: Rank, id: WindowId) -> PathBuf {
    dir.join(format!("rank{rank}_win{}.ckpt", id.0))
}

#[derive(Debug)]
struct Meta {
    bitmap: Vec<u64>,
    bitmap_bits: u64,
    phase: u32,
    generation: u64,
    changed: bool,
}

/// A window whose contents are persisted at every [`win_sync`](Self::win_sync).
pub struct StorageWindow {
    window: Arc<Window>,
    path: PathBuf,
    file: File,
    rank: Rank,
    num_workers: usize,
    meta: Mutex<Meta>,
}

impl std::fmt::Debug for StorageWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StorageWindow")
            .field("path", &self.path)
            .field("rank", &self.rank)
            .finish()
    }
}

/// Opens (or creates) the storage window `id` of `owner` backed by `path`.
///
/// With `recover` set and a valid file present the window is rebuilt from the
/// last synced image; otherwise the file is truncated and the window starts
/// zero-filled with `size` bytes. A file written for a different number of
/// workers is rejected.
pub fn open_storage_window(
    owner: Rank,
    id: WindowId,
    size: u64,
    path: &Path,
    recover: bool,
    num_workers: usize,
) -> Result<StorageWindow> {
    if recover && path.exists() {
        return restore(owner, id, size, path, num_workers);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = OpenOptions::new()
        .read(true)
        .write(true)
        .create(true)
        .truncate(true)
        .open(path)?;
    let sw = StorageWindow {
        window: Arc::new(Window::new(owner, id, size, true)?),
        path: path.to_path_buf(),
        file,
        rank: owner,
        num_workers,
        meta: Mutex::new(Meta {
            bitmap: Vec::new(),
            bitmap_bits: 0,
            phase: 0,
            generation: 0,
            changed: false,
        }),
    };
    sw.file.write_all_at(&sw.empty_header().encode(), 0)?;
    Ok(sw)
}

fn restore(
    owner: Rank,
    id: WindowId,
    size: u64,
    path: &Path,
    num_workers: usize,
) -> Result<StorageWindow> {
    let file = OpenOptions::new().read(true).write(true).open(path)?;
    let image = read_image(&file)?;
    let h = image.header;
    if h.window != id || h.rank as usize != owner {
        return Err(Error::Checkpoint(format!(
            "{} holds window {:?} of rank {}, expected {:?} of rank {owner}",
            path.display(),
            h.window,
            h.rank,
            id
        )));
    }
    check_workers(&h, num_workers, path)?;
    let window = Window::new(owner, id, 0, true)?;
    if h.generation == 0 {
        if size > 0 {
            window.attach(size)?;
        }
    } else {
        for &(disp, len) in &image.regions {
            let region = window.attach_at(Displacement(disp), len)?;
            let mut buf = vec![0u8; len as usize];
            file.read_exact_at(&mut buf, HEADER_LEN + disp)?;
            region.write(0, &buf);
            region.take_dirty();
        }
    }
    Ok(StorageWindow {
        window: Arc::new(window),
        path: path.to_path_buf(),
        file,
        rank: owner,
        num_workers,
        meta: Mutex::new(Meta {
            bitmap: image.bitmap,
            bitmap_bits: h.bitmap_bits,
            phase: h.phase,
            generation: h.generation,
            changed: false,
        }),
    })
}

fn check_workers(h: &Header, num_workers: usize, path: &Path) -> Result<()> {
    if h.num_workers as usize != num_workers {
        return Err(Error::Checkpoint(format!(
            "{} was written by a job with {} workers, this job has {num_workers}",
            path.display(),
            h.num_workers
        )));
    }
    Ok(())
}

/// Header, bitmap and region table of a checkpoint file.
#[derive(Clone, Debug)]
pub struct Image {
    pub header: Header,
    pub bitmap: Vec<u64>,
    pub regions: Vec<(u64, u64)>,
}

impl Image {
    pub fn completed(&self) -> Vec<usize> {
        bitmap_members(&self.bitmap, self.header.bitmap_bits)
    }
}

fn bitmap_members(bitmap: &[u64], bits: u64) -> Vec<usize> {
    (0..bits as usize)
        .filter(|&i| bitmap[i / 64] & (1 << (i % 64)) != 0)
        .collect()
}

fn read_image(file: &File) -> Result<Image> {
    let file_len = file.metadata()?.len();
    let mut hb = [0u8; HEADER_LEN as usize];
    file.read_exact_at(&mut hb, 0)
        .map_err(|_| Error::Checkpoint("file shorter than its header".into()))?;
    let header = Header::decode(&hb)?;
    if header.generation == 0 {
        return Ok(Image {
            header,
            bitmap: Vec::new(),
            regions: Vec::new(),
        });
    }
    let words = header.bitmap_bits.div_ceil(64);
    let table_at = header
        .bitmap_offset
        .checked_add(words * 8)
        .filter(|&t| t >= HEADER_LEN + header.extent)
        .ok_or_else(|| Error::Checkpoint("bitmap offset inside window image".into()))?;
    let table_len = header.region_count as u64 * 16;
    if table_at + table_len > file_len {
        return Err(Error::Checkpoint(format!(
            "file is {file_len} bytes, table ends at {}",
            table_at + table_len
        )));
    }
    let mut raw = vec![0u8; (words * 8) as usize];
    file.read_exact_at(&mut raw, header.bitmap_offset)?;
    let bitmap = raw
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut raw = vec![0u8; table_len as usize];
    file.read_exact_at(&mut raw, table_at)?;
    let regions: Vec<(u64, u64)> = raw
        .chunks_exact(16)
        .map(|c| {
            (
                u64::from_le_bytes(c[..8].try_into().unwrap()),
                u64::from_le_bytes(c[8..].try_into().unwrap()),
            )
        })
        .collect();
    let mut end = 0;
    for &(disp, len) in &regions {
        if disp < end || disp + len > header.extent {
            return Err(Error::Checkpoint(
                "region table out of order or out of range".into(),
            ));
        }
        end = disp + len;
    }
    Ok(Image {
        header,
        bitmap,
        regions,
    })
}

/// Reads and validates a checkpoint file without loading window bytes.
pub fn inspect(path: &Path) -> Result<Image> {
    read_image(&File::open(path)?)
}

impl StorageWindow {
    pub fn window(&self) -> &Arc<Window> {
        &self.window
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn empty_header(&self) -> Header {
        Header {
            window: self.window.id(),
            extent: 0,
            bitmap_offset: HEADER_LEN,
            bitmap_bits: 0,
            region_count: 0,
            num_workers: self.num_workers as u32,
            rank: self.rank as u32,
            phase: 0,
            generation: 0,
        }
    }

    /// Records `task` in the completed-task bitmap (persisted at next sync).
    pub fn mark_completed(&self, task: usize) {
        let mut m = self.meta.lock().unwrap();
        let need = task as u64 + 1;
        if need > m.bitmap_bits {
            m.bitmap_bits = need;
            let words = need.div_ceil(64) as usize;
            m.bitmap.resize(words, 0);
        }
        m.bitmap[task / 64] |= 1 << (task % 64);
        m.changed = true;
    }

    pub fn completed(&self) -> Vec<usize> {
        let m = self.meta.lock().unwrap();
        bitmap_members(&m.bitmap, m.bitmap_bits)
    }

    pub fn set_phase(&self, phase: u32) {
        let mut m = self.meta.lock().unwrap();
        if m.phase != phase {
            m.phase = phase;
            m.changed = true;
        }
    }

    pub fn phase(&self) -> u32 {
        self.meta.lock().unwrap().phase
    }

    /// Completed syncs, including those of earlier runs on the same file.
    pub fn generation(&self) -> u64 {
        self.meta.lock().unwrap().generation
    }

    /// Makes every modification since the previous sync durable. A no-op when
    /// nothing changed.
    pub fn win_sync(&self) -> Result<()> {
        let mut m = self.meta.lock().unwrap();
        let regions = self.window.regions();
        let dirty: Vec<_> = regions.iter().map(|r| r.take_dirty()).collect();
        if !m.changed && dirty.iter().all(|d| d.is_empty()) {
            return Ok(());
        }
        let mut buf = Vec::new();
        for (region, ranges) in regions.iter().zip(&dirty) {
            let base = HEADER_LEN + region.displacement().0;
            for &(s, e) in ranges {
                buf.resize((e - s) as usize, 0);
                region.read(s, &mut buf);
                self.file.write_all_at(&buf, base + s)?;
            }
        }
        let extent = regions
            .last()
            .map(|r| r.displacement().0 + r.len())
            .unwrap_or(0);
        let bitmap_offset = (HEADER_LEN + extent).next_multiple_of(8);
        let mut tail = Vec::with_capacity(m.bitmap.len() * 8 + regions.len() * 16);
        for w in &m.bitmap {
            tail.extend_from_slice(&w.to_le_bytes());
        }
        for r in &regions {
            tail.extend_from_slice(&r.displacement().0.to_le_bytes());
            tail.extend_from_slice(&r.len().to_le_bytes());
        }
        self.file.write_all_at(&tail, bitmap_offset)?;
        let header = Header {
            extent,
            bitmap_offset,
            bitmap_bits: m.bitmap_bits,
            region_count: regions.len() as u32,
            phase: m.phase,
            generation: m.generation + 1,
            ..self.empty_header()
        };
        self.file.write_all_at(&header.encode(), 0)?;
        self.file.sync_data()?;
        m.generation += 1;
        m.changed = false;
        Ok(())
    }
}

/// Where a job restarts, decided from the checkpoint files of every rank.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ResumePoint {
    /// `None` means a cold start.
    pub phase: Option<ResumePhase>,
    /// Map tasks already reflected in each rank's synced Key-Value image.
    pub completed: Vec<Vec<usize>>,
}

/// Windows that carry checkpoint state.
pub struct CheckpointWindows {
    pub kv: WindowId,
    pub kv_disp: WindowId,
    pub combine: WindowId,
    pub combine_disp: WindowId,
}

/// Chooses the resume point for `cfg`:
///
/// * rank 0 synced its final result: `Done`;
/// * every rank synced its level-0 run: `Combine`;
/// * every rank has a Key-Value image: `Map`, skipping completed tasks;
/// * anything missing or unreadable: cold start, with a warning.
///
/// Files written for a different worker count are an error.
pub fn recover_job(cfg: &JobConfig, ids: &CheckpointWindows) -> Result<ResumePoint> {
    let Some(ck) = cfg.checkpoint.as_ref().filter(|c| c.resume) else {
        return Ok(ResumePoint::default());
    };
    let p = cfg.num_workers;
    let load = |rank: Rank, id: WindowId| -> Result<Option<Image>> {
        let path = window_path(&ck.dir, rank, id);
        match File::open(&path) {
            Ok(f) => match read_image(&f) {
                Ok(img) => {
                    check_workers(&img.header, p, &path)?;
                    Ok(Some(img))
                }
                Err(e) => {
                    log::warn!("ignoring unreadable checkpoint {}: {e}", path.display());
                    Ok(None)
                }
            },
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    };

    // A leftover file from a larger job would otherwise go unnoticed.
    if let Some(img) = load(p, ids.kv)? {
        check_workers(&img.header, p, &window_path(&ck.dir, p, ids.kv))?;
    }

    let combine_phase = |rank| -> Result<u32> {
        Ok(
            match (load(rank, ids.combine)?, load(rank, ids.combine_disp)?) {
                (Some(a), Some(b)) if a.header.generation > 0 && b.header.generation > 0 => {
                    a.header.phase.min(b.header.phase)
                }
                _ => 0,
            },
        )
    };
    if combine_phase(0)? >= WorkerStatus::Done as u32 {
        return Ok(ResumePoint {
            phase: Some(ResumePhase::Done),
            completed: vec![Vec::new(); p],
        });
    }
    let mut all_combine = true;
    for r in 0..p {
        if combine_phase(r)? < WorkerStatus::Combine as u32 {
            all_combine = false;
            break;
        }
    }
    if all_combine {
        return Ok(ResumePoint {
            phase: Some(ResumePhase::Combine),
            completed: vec![Vec::new(); p],
        });
    }

    let mut completed = Vec::with_capacity(p);
    for r in 0..p {
        match (load(r, ids.kv)?, load(r, ids.kv_disp)?) {
            (Some(kv), Some(_)) => completed.push(kv.completed()),
            _ => {
                log::warn!(
                    "no usable checkpoint for rank {r} in {}; starting cold",
                    ck.dir.display()
                );
                return Ok(ResumePoint::default());
            }
        }
    }
    Ok(ResumePoint {
        phase: Some(ResumePhase::Map),
        completed,
    })
}
