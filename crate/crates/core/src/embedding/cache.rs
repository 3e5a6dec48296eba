//! Content-addressed store of raw (pre-reduction) embedding vectors and its
//! little-endian binary file format.
//!
//! File layout: magic `MATUCACH`, version `u32`, entry count `u64`, then per
//! entry: 32-byte key, `u32` length + UTF-8 model id, `u32` dim, `dim` x
//! `f32` values, and a CRC32 over everything from the key through the values.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::RwLock;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"MATUCACH";
pub const CACHE_VERSION: u32 = 1;

/// Marker mixed into every key: the cache only ever holds full-dimension
/// vectors, so the reduced dimension never changes the key.
const FULL_DIM_MARKER: &str = "full";

pub type CacheKey = [u8; 32];

pub fn cache_key(model_id: &str, text: &str) -> CacheKey {
    let mut h = Sha256::new();
    h.update(model_id.as_bytes());
    h.update([0u8]);
    h.update(FULL_DIM_MARKER.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    let out = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&out);
    key
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCacheEntry {
    pub key: CacheKey,
    pub model_id: String,
    pub values: Vec<f32>,
}

/// Concurrent readers, serialized writers. Entries are never mutated once
/// inserted except by re-inserting an identical key.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<CacheKey, EmbeddingCacheEntry>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<Vec<f32>> {
        self.entries
            .read()
            .expect("cache lock")
            .get(key)
            .map(|e| e.values.clone())
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.entries.read().expect("cache lock").contains_key(key)
    }

    pub fn insert(&self, model_id: &str, text: &str, values: Vec<f32>) -> CacheKey {
        let key = cache_key(model_id, text);
        self.insert_entry(EmbeddingCacheEntry {
            key,
            model_id: model_id.to_string(),
            values,
        });
        key
    }

    pub fn insert_entry(&self, entry: EmbeddingCacheEntry) {
        self.entries.write().expect("cache lock").insert(entry.key, entry);
    }

    /// Entries sorted by key, so saved files are byte-stable.
    pub fn sorted_entries(&self) -> Vec<EmbeddingCacheEntry> {
        let mut v: Vec<_> = self.entries.read().expect("cache lock").values().cloned().collect();
        v.sort_by_key(|e| e.key);
        v
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let entries = self.sorted_entries();
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&(entries.len() as u64).to_le_bytes())?;
        for e in &entries {
            w.write_all(&encode_entry(e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a cache stream and merges its entries. Loading the same file
    /// twice leaves the cache unchanged.
    pub fn read_from<R: Read>(&self, mut r: R) -> Result<usize> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let entries = decode_cache(&buf)?;
        let n = entries.len();
        let mut map = self.entries.write().expect("cache lock");
        for e in entries {
            map.insert(e.key, e);
        }
        Ok(n)
    }

    pub fn load(&self, path: &Path) -> Result<usize> {
        let f = std::fs::File::open(path)?;
        self.read_from(std::io::BufReader::new(f))
    }
}

pub(crate) fn encode_entry(e: &EmbeddingCacheEntry) -> Vec<u8> {
    let mut body = Vec::with_capacity(32 + 8 + e.model_id.len() + 4 * e.values.len());
    body.extend_from_slice(&e.key);
    body.extend_from_slice(&(e.model_id.len() as u32).to_le_bytes());
    body.extend_from_slice(e.model_id.as_bytes());
    body.extend_from_slice(&(e.values.len() as u32).to_le_bytes());
    for v in &e.values {
        body.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    body
}

/// Bounds-checked little-endian reader over a byte buffer; every failure
/// reports the offset where framing broke.
pub(crate) struct Cursor<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::CorruptCacheFile(self.pos as u64))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::CorruptCacheFile(at as u64))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(Error::CorruptCacheFile(self.pos as u64))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(Error::CorruptCacheFile(self.pos as u64))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn header(&mut self, magic: &[u8; 8], version: u32) -> Result<u64> {
        if self.take(8)? != magic {
            return Err(Error::CorruptCacheFile(0));
        }
        let at = self.pos;
        if self.u32()? != version {
            return Err(Error::CorruptCacheFile(at as u64));
        }
        self.u64()
    }

    /// Verifies the CRC32 trailing the bytes `[start, pos)`.
    pub fn check_crc(&mut self, start: usize) -> Result<()> {
        let expected = crc32fast::hash(&self.buf[start..self.pos]);
        let stored = self.u32()?;
        if stored != expected {
            return Err(Error::CorruptCacheFile(start as u64));
        }
        Ok(())
    }
}

fn decode_cache(buf: &[u8]) -> Result<Vec<EmbeddingCacheEntry>> {
    let mut c = Cursor::new(buf);
    let count = c.header(CACHE_MAGIC, CACHE_VERSION)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let start = c.pos;
        let key: CacheKey = c.take(32)?.try_into().unwrap();
        let model_id = c.string()?;
        let dim = c.u32()? as usize;
        let values = c.f32s(dim)?;
        c.check_crc(start)?;
        out.push(EmbeddingCacheEntry { key, model_id, values });
    }
    if c.pos != buf.len() {
        return Err(Error::CorruptCacheFile(c.pos as u64));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_entry_bytes() -> Vec<u8> {
        let cache = EmbeddingCache::new();
        cache.insert("m", "a", vec![1.0, 2.0]);
        cache.insert("m", "b", vec![3.0, 4.0]);
        cache.insert("m", "c", vec![5.0, 6.0]);
        let mut buf = Vec::new();
        cache.write_to(&mut buf).unwrap();
        buf
    }

    #[test]
    fn load_three_entries_idempotent() {
        let buf = three_entry_bytes();
        let cache = EmbeddingCache::new();
        cache.read_from(&buf[..]).unwrap();
        assert_eq!(cache.len(), 3);
        cache.read_from(&buf[..]).unwrap();
        assert_eq!(cache.len(), 3);
        assert_eq!(cache.get(&cache_key("m", "b")), Some(vec![3.0, 4.0]));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let buf = three_entry_bytes();
        let cache = EmbeddingCache::new();
        let err = cache.read_from(&buf[..buf.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::CorruptCacheFile(_)));
    }

    #[test]
    fn flipped_byte_fails_crc() {
        let mut buf = three_entry_bytes();
        let last_value = buf.len() - 6;
        buf[last_value] ^= 0x40;
        let err = EmbeddingCache::new().read_from(&buf[..]).unwrap_err();
        assert!(matches!(err, Error::CorruptCacheFile(off) if off > 20));
    }

    #[test]
    fn bad_magic() {
        let mut buf = three_entry_bytes();
        buf[0] = b'X';
        assert!(matches!(
            EmbeddingCache::new().read_from(&buf[..]),
            Err(Error::CorruptCacheFile(0))
        ));
    }

    #[test]
    fn key_depends_on_model_and_text() {
        assert_ne!(cache_key("m1", "x"), cache_key("m2", "x"));
        assert_ne!(cache_key("m", "x"), cache_key("m", "y"));
        assert_eq!(cache_key("m", "x"), cache_key("m", "x"));
    }

    #[test]
    fn header_layout() {
        let buf = three_entry_bytes();
        assert_eq!(&buf[..8], b"MATUCACH");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 3);
    }
}
