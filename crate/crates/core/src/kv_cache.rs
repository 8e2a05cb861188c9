//! Position-free KV cache, one per layer, split into three segments:
//! `global` (the first `l_global` entries), `local` (the most recent
//! `l_local_max` entries) and `middle` (everything in between).
//!
//! Storage is append-only and head-major. Segment boundaries are derived from
//! the entry count alone, so promotion from local to middle is FIFO and
//! per-token, and entry indices never move.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"RKVC";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedKvCache {
    n_kv_heads: usize,
    d_head: usize,
    l_global: usize,
    l_local_max: usize,
    len: usize,
    /// `keys[h]` is `len x d_head`, row-major.
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl SegmentedKvCache {
    pub fn new(n_kv_heads: usize, d_head: usize, l_global: usize, l_local_max: usize) -> Self {
        Self {
            n_kv_heads,
            d_head,
            l_global,
            l_local_max,
            len: 0,
            keys: vec![Vec::new(); n_kv_heads],
            values: vec![Vec::new(); n_kv_heads],
        }
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn l_global(&self) -> usize {
        self.l_global
    }

    pub fn l_local_max(&self) -> usize {
        self.l_local_max
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends token-major projections: each of `new_keys` / `new_values`
    /// holds `n` rows of `n_kv_heads * d_head` values.
    pub fn append(&mut self, new_keys: &[f32], new_values: &[f32]) -> Result<()> {
        let row = self.n_kv_heads * self.d_head;
        if row == 0 || !new_keys.len().is_multiple_of(row) || new_keys.len() != new_values.len() {
            return Err(Error::Shape(format!(
                "cache append of {} keys / {} values with row width {row}",
                new_keys.len(),
                new_values.len()
            )));
        }
        let n = new_keys.len() / row;
        for h in 0..self.n_kv_heads {
            let (kh, vh) = (&mut self.keys[h], &mut self.values[h]);
            kh.reserve(n * self.d_head);
            vh.reserve(n * self.d_head);
            for t in 0..n {
                let src = t * row + h * self.d_head..t * row + (h + 1) * self.d_head;
                kh.extend_from_slice(&new_keys[src.clone()]);
                vh.extend_from_slice(&new_values[src]);
            }
        }
        self.len += n;
        Ok(())
    }

    pub fn global_range(&self) -> Range<usize> {
        0..self.len.min(self.l_global)
    }

    pub fn local_range(&self) -> Range<usize> {
        let global_end = self.len.min(self.l_global);
        global_end.max(self.len.saturating_sub(self.l_local_max))..self.len
    }

    pub fn middle_range(&self) -> Range<usize> {
        self.global_range().end..self.local_range().start
    }

    pub fn middle_len(&self) -> usize {
        self.middle_range().len()
    }

    pub fn views(&self) -> (SegmentView<'_>, SegmentView<'_>, SegmentView<'_>) {
        (
            self.segment(self.global_range()),
            self.segment(self.middle_range()),
            self.segment(self.local_range()),
        )
    }

    pub fn segment(&self, range: Range<usize>) -> SegmentView<'_> {
        debug_assert!(range.end <= self.len);
        SegmentView { cache: self, range }
    }

    /// Key vector of entry `index` for KV head `head`.
    pub fn key(&self, head: usize, index: usize) -> &[f32] {
        &self.keys[head][index * self.d_head..(index + 1) * self.d_head]
    }

    pub fn value(&self, head: usize, index: usize) -> &[f32] {
        &self.values[head][index * self.d_head..(index + 1) * self.d_head]
    }

    pub fn head_keys(&self, head: usize) -> &[f32] {
        &self.keys[head]
    }

    pub fn head_values(&self, head: usize) -> &[f32] {
        &self.values[head]
    }
}

/// Zero-copy view of a contiguous index range of one cache.
#[derive(Debug, Clone)]
pub struct SegmentView<'a> {
    cache: &'a SegmentedKvCache,
    range: Range<usize>,
}

impl<'a> SegmentView<'a> {
    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    pub fn d_head(&self) -> usize {
        self.cache.d_head
    }

    pub fn n_kv_heads(&self) -> usize {
        self.cache.n_kv_heads
    }

    /// `len x d_head` keys for one head.
    pub fn keys(&self, head: usize) -> &'a [f32] {
        let d = self.cache.d_head;
        &self.cache.keys[head][self.range.start * d..self.range.end * d]
    }

    pub fn values(&self, head: usize) -> &'a [f32] {
        let d = self.cache.d_head;
        &self.cache.values[head][self.range.start * d..self.range.end * d]
    }
}

/// Writes every layer's cache to a little-endian `RKVC` snapshot.
///
/// Layout: magic, version, `n_layers`, `n_kv_heads`, `d_head` (all `u32`), then
/// per layer `len`, `l_global`, `l_local_max` (`u64`), then per layer the key
/// payload `[head][entry][dim]` followed by the value payload, as `f32`.
pub fn write_snapshot(path: &Path, caches: &[SegmentedKvCache]) -> Result<()> {
    let (n_kv_heads, d_head) = caches.first().map_or((0, 0), |c| (c.n_kv_heads, c.d_head));
    if caches.iter().any(|c| c.n_kv_heads != n_kv_heads || c.d_head != d_head) {
        return Err(Error::Shape("snapshot layers disagree on head shape".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::new();
    buf.extend_from_slice(SNAPSHOT_MAGIC);
    for v in [SNAPSHOT_VERSION, caches.len() as u32, n_kv_heads as u32, d_head as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for c in caches {
        for v in [c.len, c.l_global, c.l_local_max] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    for c in caches {
        for store in [&c.keys, &c.values] {
            for head in store {
                buf.clear();
                for x in head {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&buf).map_err(|e| Error::io(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_snapshot(path: &Path) -> Result<Vec<SegmentedKvCache>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::Format(format!("bad cache snapshot magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!("unsupported cache snapshot version {version}")));
    }
    let n_layers = read_u32(&mut r)? as usize;
    let n_kv_heads = read_u32(&mut r)? as usize;
    let d_head = read_u32(&mut r)? as usize;
    let mut counts = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        counts.push((read_u64(&mut r)?, read_u64(&mut r)?, read_u64(&mut r)?));
    }
    let mut caches = Vec::with_capacity(n_layers);
    for (len, l_global, l_local_max) in counts {
        let mut c = SegmentedKvCache::new(n_kv_heads, d_head, l_global as usize, l_local_max as usize);
        c.len = len as usize;
        for store in [&mut c.keys, &mut c.values] {
            for head in store.iter_mut() {
                *head = read_f32s(&mut r, c.len * d_head)?;
            }
        }
        caches.push(c);
    }
    Ok(caches)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated file: {e}")))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    read_exact(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}
