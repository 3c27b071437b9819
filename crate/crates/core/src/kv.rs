//! Key-value record format, hashing and routing.
//!
//! A record is encoded as an 8-byte header (`key_len`, `val_len`, both
//! little-endian `u32`) followed by the key bytes and the value bytes. The
//! same encoding is used in bucket memory, on the wire and in checkpoint files.

use std::hash::{BuildHasherDefault, Hasher};

use crate::error::{Error, Result};

/// Size of the fixed record header.
pub const HEADER_LEN: usize = 8;

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Bucket control word: bit 63 seals the bucket.
pub const SEAL_BIT: u64 = 1 << 63;
/// Bucket control word: bit 62 says a successor bucket has been published.
pub const LINK_BIT: u64 = 1 << 62;
/// Bucket control word: bits 0..=61 hold the committed byte count.
pub const COMMITTED_MASK: u64 = LINK_BIT - 1;
/// Bytes reserved for the control word at the head of every bucket.
pub const CONTROL_LEN: u64 = 8;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KvRecord {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

impl KvRecord {
    pub fn new(key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> Self {
        KvRecord {
            key: key.into(),
            value: value.into(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        encoded_len(&self.key, &self.value)
    }
}

/// A decoded record borrowing from its buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordRef<'a> {
    pub key: &'a [u8],
    pub value: &'a [u8],
}

impl RecordRef<'_> {
    pub fn to_owned(&self) -> KvRecord {
        KvRecord::new(self.key, self.value)
    }
}

pub fn encoded_len(key: &[u8], value: &[u8]) -> usize {
    HEADER_LEN + key.len() + value.len()
}

/// Appends the encoding of `(key, value)` to `out`.
pub fn encode_into(key: &[u8], value: &[u8], out: &mut Vec<u8>) -> Result<()> {
    if key.is_empty() {
        return Err(Error::Encoding("key must not be empty".into()));
    }
    let klen = u32::try_from(key.len())
        .map_err(|_| Error::Encoding(format!("key length {} overflows u32", key.len())))?;
    let vlen = u32::try_from(value.len())
        .map_err(|_| Error::Encoding(format!("value length {} overflows u32", value.len())))?;
    out.reserve(encoded_len(key, value));
    out.extend_from_slice(&klen.to_le_bytes());
    out.extend_from_slice(&vlen.to_le_bytes());
    out.extend_from_slice(key);
    out.extend_from_slice(value);
    Ok(())
}

pub fn encode_record(r: &KvRecord) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(r.encoded_len());
    encode_into(&r.key, &r.value, &mut out)?;
    Ok(out)
}

/// Decodes the record starting at `at`, returning it and the next offset.
pub fn decode_record(buf: &[u8], at: usize) -> Result<(RecordRef<'_>, usize)> {
    let header = buf
        .get(at..at + HEADER_LEN)
        .ok_or_else(|| Error::Corruption {
            offset: at,
            msg: format!(
                "truncated header ({} bytes left)",
                buf.len().saturating_sub(at)
            ),
        })?;
    let klen = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
    let vlen = u32::from_le_bytes(header[4..].try_into().unwrap()) as usize;
    if klen == 0 {
        return Err(Error::Corruption {
            offset: at,
            msg: "zero-length key".into(),
        });
    }
    let kstart = at + HEADER_LEN;
    let end = kstart + klen + vlen;
    if end > buf.len() {
        return Err(Error::Corruption {
            offset: at,
            msg: format!(
                "record needs {} bytes, {} available",
                end - at,
                buf.len() - at
            ),
        });
    }
    Ok((
        RecordRef {
            key: &buf[kstart..kstart + klen],
            value: &buf[kstart + klen..end],
        },
        end,
    ))
}

/// Iterates the records in `region[..committed]`.
pub fn iterate_records(region: &[u8], committed: usize) -> Records<'_> {
    Records {
        buf: &region[..committed.min(region.len())],
        pos: 0,
        failed: committed > region.len(),
    }
}

pub struct Records<'a> {
    buf: &'a [u8],
    pos: usize,
    failed: bool,
}

impl<'a> Iterator for Records<'a> {
    type Item = Result<RecordRef<'a>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            self.failed = false;
            self.pos = self.buf.len();
            return Some(Err(Error::Corruption {
                offset: self.buf.len(),
                msg: "committed length exceeds region".into(),
            }));
        }
        if self.pos >= self.buf.len() {
            return None;
        }
        match decode_record(self.buf, self.pos) {
            Ok((r, next)) => {
                self.pos = next;
                Some(Ok(r))
            }
            Err(e) => {
                self.pos = self.buf.len();
                Some(Err(e))
            }
        }
    }
}

/// FNV-1a, 64-bit.
pub fn hash64(key: &[u8]) -> u64 {
    let mut h = FNV_OFFSET_BASIS;
    for &b in key {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashRoute {
    pub hash: u64,
    pub target: usize,
}

pub fn route(key: &[u8], num_workers: usize) -> HashRoute {
    assert!(num_workers >= 1);
    let hash = hash64(key);
    HashRoute {
        hash,
        target: (hash % num_workers as u64) as usize,
    }
}

/// `Hasher` adapter so in-memory tables use the same hash as routing.
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(FNV_OFFSET_BASIS)
    }
}

impl Hasher for Fnv1a {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }
}

pub type FnvBuildHasher = BuildHasherDefault<Fnv1a>;

/// Digest of a record stream, used to compare results across engines and
/// against the generator's oracle.
pub fn digest(encoded: &[u8]) -> String {
    format!("{:016x}", hash64(encoded))
}
