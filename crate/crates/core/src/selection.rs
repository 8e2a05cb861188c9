//! Position-agnostic top-k selection over the middle cache segment.
//!
//! The pipeline is: [`fused_topk_scores`] (streaming dot-product scoring with a
//! running top-k per head and query), [`vote`] (tally across heads and
//! queries, keep `k_prime` winners), then [`expand_spans`] (grow each winner
//! into a block of `span_m` neighbors and deduplicate).
//!
//! Ordering is total and deterministic everywhere: higher score first, ties
//! toward the lower middle index.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::SegmentView;
use crate::numerics::{dot, MatRef};

/// How a winning middle index is grown into a span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanAlignment {
    /// The `span_m`-aligned block containing the winner.
    #[default]
    Aligned,
    /// `span_m` entries centered on the winner, shifted to stay in bounds.
    Centered,
}

/// Selection and segmentation hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Top-k kept per (head, query).
    pub k: usize,
    /// Voted winners; 0 disables selection (global + local window only).
    pub k_prime: usize,
    pub span_m: usize,
    /// Middle entries scored per streaming tile.
    pub tile_size: usize,
    pub l_global: usize,
    pub l_local: usize,
    /// Prefill chunk length after the first `l_global + l_local` block.
    pub l_chunk: usize,
    pub span_alignment: SpanAlignment,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k: 4,
            k_prime: 127,
            span_m: 32,
            tile_size: 2048,
            l_global: 32,
            l_local: 4096,
            l_chunk: 512,
            span_alignment: SpanAlignment::Aligned,
        }
    }
}

impl SelectionConfig {
    /// Largest possible attention scope: `l_global + k_prime * span_m + l_local`.
    pub fn budget(&self) -> usize {
        self.l_global + self.k_prime * self.span_m + self.l_local
    }

    pub fn validate(&self, pretrain_window: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.k == 0 {
            return fail("k must be >= 1".into());
        }
        if self.span_m == 0 {
            return fail("span_m must be >= 1".into());
        }
        if self.tile_size == 0 {
            return fail("tile_size must be >= 1".into());
        }
        if self.l_local == 0 || self.l_chunk == 0 {
            return fail("l_local and l_chunk must be >= 1".into());
        }
        if self.l_chunk > self.l_local {
            return fail(format!(
                "l_chunk {} must fit inside l_local {}",
                self.l_chunk, self.l_local
            ));
        }
        if self.budget() > pretrain_window {
            return fail(format!(
                "budget {} + {}x{} + {} = {} exceeds pretrain window {pretrain_window}",
                self.l_global,
                self.k_prime,
                self.span_m,
                self.l_local,
                self.budget()
            ));
        }
        Ok(())
    }
}

/// Scoring queries laid out `[head][query][dim]`, before any rotation.
#[derive(Debug, Clone, Copy)]
pub struct QueryBlock<'a> {
    pub n_heads: usize,
    pub n_q: usize,
    pub d: usize,
    pub data: &'a [f32],
}

impl<'a> QueryBlock<'a> {
    pub fn new(n_heads: usize, n_q: usize, d: usize, data: &'a [f32]) -> Result<Self> {
        if data.len() != n_heads * n_q * d {
            return Err(Error::Shape(format!(
                "{} query values for {n_heads} heads x {n_q} queries x {d}",
                data.len()
            )));
        }
        Ok(Self { n_heads, n_q, d, data })
    }

    pub fn query(&self, head: usize, q: usize) -> &'a [f32] {
        let start = (head * self.n_q + q) * self.d;
        &self.data[start..start + self.d]
    }
}

/// Middle-segment keys, one contiguous `len x d` slice per head.
#[derive(Debug, Clone)]
pub struct MiddleKeys<'a> {
    len: usize,
    d: usize,
    heads: Vec<&'a [f32]>,
}

impl<'a> MiddleKeys<'a> {
    pub fn new(len: usize, d: usize, heads: Vec<&'a [f32]>) -> Result<Self> {
        if heads.iter().any(|h| h.len() != len * d) {
            return Err(Error::Shape(format!("middle key slices must be {len}x{d}")));
        }
        Ok(Self { len, d, heads })
    }

    pub fn from_view(view: &SegmentView<'a>) -> Self {
        Self {
            len: view.len(),
            d: view.d_head(),
            heads: (0..view.n_kv_heads()).map(|h| view.keys(h)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head(&self, h: usize) -> &'a [f32] {
        self.heads[h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredIndex {
    pub index: usize,
    pub score: f32,
}

/// Higher score first, then lower index.
pub fn rank_order(a: &ScoredIndex, b: &ScoredIndex) -> Ordering {
    b.score.total_cmp(&a.score).then(a.index.cmp(&b.index))
}

/// Per-(head, query) top-k lists, each sorted by [`rank_order`].
#[derive(Debug, Clone, PartialEq)]
pub struct TopkLists {
    pub n_heads: usize,
    pub n_q: usize,
    lists: Vec<Vec<ScoredIndex>>,
}

impl TopkLists {
    pub fn from_lists(n_heads: usize, n_q: usize, lists: Vec<Vec<ScoredIndex>>) -> Result<Self> {
        if lists.len() != n_heads * n_q {
            return Err(Error::Shape(format!(
                "{} lists for {n_heads} heads x {n_q} queries",
                lists.len()
            )));
        }
        Ok(Self { n_heads, n_q, lists })
    }

    pub fn get(&self, head: usize, q: usize) -> &[ScoredIndex] {
        &self.lists[head * self.n_q + q]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[ScoredIndex]> {
        self.lists.iter().map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.lists.iter().all(Vec::is_empty)
    }
}

/// Byte accounting for transient scoring buffers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScratchMeter {
    current: usize,
    peak: usize,
}

impl ScratchMeter {
    pub fn acquire(&mut self, bytes: usize) {
        self.current += bytes;
        self.peak = self.peak.max(self.current);
    }

    pub fn release(&mut self, bytes: usize) {
        self.current = self.current.saturating_sub(bytes);
    }

    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Bounded top-k buffer kept sorted by [`rank_order`].
#[derive(Debug, Clone)]
struct RunningTopk {
    k: usize,
    items: Vec<ScoredIndex>,
}

impl RunningTopk {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k),
        }
    }

    /// Indices must be offered in ascending order, so an equal score never
    /// displaces an earlier entry.
    #[inline]
    fn offer(&mut self, index: usize, score: f32) {
        if self.items.len() == self.k {
            match self.items.last() {
                Some(last) if score.total_cmp(&last.score) == Ordering::Greater => {
                    self.items.pop();
                }
                _ => return,
            }
        }
        let cand = ScoredIndex { index, score };
        let pos = self.items.partition_point(|x| rank_order(x, &cand) == Ordering::Less);
        self.items.insert(pos, cand);
    }
}

/// Exact top-k dot-product scores of every (head, query) against the middle
/// keys, computed tile by tile.
///
/// Transient memory is `min(tile_size, |middle|) x n_heads x n_q` scores plus
/// the top-k buffers; it does not grow with the middle length.
pub fn fused_topk_scores(
    queries: QueryBlock<'_>,
    middle: &MiddleKeys<'_>,
    k: usize,
    tile_size: usize,
    meter: &mut ScratchMeter,
) -> Result<TopkLists> {
    let (n_heads, n_q, d) = (queries.n_heads, queries.n_q, queries.d);
    let n_pairs = n_heads * n_q;
    if middle.is_empty() || n_pairs == 0 {
        return TopkLists::from_lists(n_heads, n_q, vec![Vec::new(); n_pairs]);
    }
    if middle.n_heads() != n_heads || middle.d != d {
        return Err(Error::Shape(format!(
            "queries have {n_heads} heads of dim {d}, middle keys {} of dim {}",
            middle.n_heads(),
            middle.d
        )));
    }
    if k == 0 || tile_size == 0 {
        return Err(Error::Config("k and tile_size must be >= 1".into()));
    }

    let tile = tile_size.min(middle.len);
    let scratch_bytes =
        tile * n_pairs * std::mem::size_of::<f32>() + n_pairs * k.min(middle.len) * std::mem::size_of::<ScoredIndex>();
    meter.acquire(scratch_bytes);

    let mut scores = vec![0.0f32; tile * n_pairs];
    let mut running: Vec<RunningTopk> = (0..n_pairs).map(|_| RunningTopk::new(k)).collect();

    let mut start = 0;
    while start < middle.len {
        let end = (start + tile).min(middle.len);
        let width = end - start;
        for h in 0..n_heads {
            let keys = &middle.head(h)[start * d..end * d];
            for q in 0..n_q {
                let pair = h * n_q + q;
                let qv = queries.query(h, q);
                let buf = &mut scores[pair * tile..pair * tile + width];
                for (s, key) in buf.iter_mut().zip(keys.chunks_exact(d)) {
                    *s = dot(qv, key);
                }
                let top = &mut running[pair];
                for (j, &s) in buf.iter().enumerate() {
                    top.offer(start + j, s);
                }
            }
        }
        start = end;
    }

    meter.release(scratch_bytes);
    TopkLists::from_lists(n_heads, n_q, running.into_iter().map(|t| t.items).collect())
}

/// Baseline scorer: materializes the full `(head, query) x |middle|` score
/// matrix, then sorts every row.
pub fn naive_topk_scores(
    queries: QueryBlock<'_>,
    middle: &MiddleKeys<'_>,
    k: usize,
    meter: &mut ScratchMeter,
) -> Result<TopkLists> {
    let (n_heads, n_q, d) = (queries.n_heads, queries.n_q, queries.d);
    let n_pairs = n_heads * n_q;
    if middle.is_empty() || n_pairs == 0 {
        return TopkLists::from_lists(n_heads, n_q, vec![Vec::new(); n_pairs]);
    }
    if middle.n_heads() != n_heads || middle.d != d {
        return Err(Error::Shape("query/middle head shape mismatch".into()));
    }
    let len = middle.len;
    let bytes = n_pairs * len * std::mem::size_of::<f32>() + len * std::mem::size_of::<usize>();
    meter.acquire(bytes);

    let mut matrix = vec![0.0f32; n_pairs * len];
    for h in 0..n_heads {
        let keys = middle.head(h);
        for q in 0..n_q {
            let qv = queries.query(h, q);
            let row = &mut matrix[(h * n_q + q) * len..(h * n_q + q + 1) * len];
            for (s, key) in row.iter_mut().zip(keys.chunks_exact(d)) {
                *s = dot(qv, key);
            }
        }
    }
    let mut order: Vec<usize> = Vec::with_capacity(len);
    let mut lists = Vec::with_capacity(n_pairs);
    for row in matrix.chunks_exact(len) {
        order.clear();
        order.extend(0..len);
        order.sort_unstable_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        lists.push(
            order
                .iter()
                .take(k)
                .map(|&i| ScoredIndex {
                    index: i,
                    score: row[i],
                })
                .collect(),
        );
    }
    meter.release(bytes);
    TopkLists::from_lists(n_heads, n_q, lists)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCandidate {
    pub middle_index: usize,
    /// Best score this index received from any (head, query).
    pub score: f32,
    pub votes: usize,
}

/// One vote per appearance in any (head, query) top-k list. Winners are
/// ranked by votes, then best score, then lower index; the first `k_prime`
/// are kept.
pub fn vote(candidates: &TopkLists, k_prime: usize) -> Vec<ScoredCandidate> {
    if k_prime == 0 {
        return Vec::new();
    }
    let mut tally: HashMap<usize, ScoredCandidate> = HashMap::new();
    for list in candidates.iter() {
        for c in list {
            tally
                .entry(c.index)
                .and_modify(|e| {
                    e.votes += 1;
                    if c.score > e.score {
                        e.score = c.score;
                    }
                })
                .or_insert(ScoredCandidate {
                    middle_index: c.index,
                    score: c.score,
                    votes: 1,
                });
        }
    }
    let mut ranked: Vec<ScoredCandidate> = tally.into_values().collect();
    ranked.sort_unstable_by(|a, b| {
        b.votes
            .cmp(&a.votes)
            .then(b.score.total_cmp(&a.score))
            .then(a.middle_index.cmp(&b.middle_index))
    });
    ranked.truncate(k_prime);
    ranked
}

/// Sorted, pairwise-disjoint ranges over middle coordinates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SpanSet {
    ranges: Vec<Range<usize>>,
}

impl SpanSet {
    /// Sorts and merges overlapping ranges; empty ranges are dropped.
    pub fn from_ranges(mut ranges: Vec<Range<usize>>) -> Self {
        ranges.retain(|r| !r.is_empty());
        ranges.sort_unstable_by_key(|r| (r.start, r.end));
        let mut merged: Vec<Range<usize>> = Vec::with_capacity(ranges.len());
        for r in ranges {
            match merged.last_mut() {
                Some(last) if r.start < last.end => last.end = last.end.max(r.end),
                _ => merged.push(r),
            }
        }
        Self { ranges: merged }
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn covered_len(&self) -> usize {
        self.ranges.iter().map(ExactSizeIterator::len).sum()
    }

    pub fn contains(&self, index: usize) -> bool {
        let pos = self.ranges.partition_point(|r| r.end <= index);
        self.ranges.get(pos).is_some_and(|r| r.contains(&index))
    }

    /// True when any covered index falls in `range`.
    pub fn intersects(&self, range: &Range<usize>) -> bool {
        self.ranges.iter().any(|r| r.start < range.end && range.start < r.end)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(Clone::clone)
    }
}

/// The aligned block `[floor(i/m)*m, min(floor(i/m)*m + m, len))` holding `index`.
pub fn aligned_block(index: usize, span_m: usize, middle_len: usize) -> Range<usize> {
    let start = index / span_m * span_m;
    start..(start + span_m).min(middle_len)
}

pub fn expand_spans(winners: &[usize], span_m: usize, middle_len: usize, alignment: SpanAlignment) -> SpanSet {
    if span_m == 0 {
        return SpanSet::default();
    }
    let ranges = winners
        .iter()
        .filter(|&&i| i < middle_len)
        .map(|&i| match alignment {
            SpanAlignment::Aligned => aligned_block(i, span_m, middle_len),
            SpanAlignment::Centered => {
                let end = (i.saturating_sub(span_m / 2) + span_m).min(middle_len);
                end.saturating_sub(span_m)..end
            }
        })
        .collect();
    SpanSet::from_ranges(ranges)
}

/// Output of one full selection pass.
#[derive(Debug, Clone)]
pub struct Selection {
    pub candidates: TopkLists,
    pub winners: Vec<ScoredCandidate>,
    pub spans: SpanSet,
}

/// Score, vote and expand in one call. With `k_prime == 0` or an empty
/// middle, nothing is scored and the span set is empty.
pub fn select_spans(
    queries: QueryBlock<'_>,
    middle: &MiddleKeys<'_>,
    cfg: &SelectionConfig,
    meter: &mut ScratchMeter,
) -> Result<Selection> {
    if cfg.k_prime == 0 || middle.is_empty() {
        let n_pairs = queries.n_heads * queries.n_q;
        return Ok(Selection {
            candidates: TopkLists::from_lists(queries.n_heads, queries.n_q, vec![Vec::new(); n_pairs])?,
            winners: Vec::new(),
            spans: SpanSet::default(),
        });
    }
    let candidates = fused_topk_scores(queries, middle, cfg.k, cfg.tile_size, meter)?;
    let winners = vote(&candidates, cfg.k_prime);
    let idx: Vec<usize> = winners.iter().map(|w| w.middle_index).collect();
    let spans = expand_spans(&idx, cfg.span_m, middle.len(), cfg.span_alignment);
    Ok(Selection {
        candidates,
        winners,
        spans,
    })
}

/// Averages each KV head's group of query heads: input rows are
/// `n_head * d` wide, output is `[kv_head][query][d]`.
pub fn group_mean_queries(q: MatRef<'_>, n_head: usize, n_kv_head: usize, d: usize) -> Result<Vec<f32>> {
    if n_kv_head == 0 || !n_head.is_multiple_of(n_kv_head) || q.cols() != n_head * d {
        return Err(Error::Shape(format!(
            "cannot group {} query columns into {n_head} heads / {n_kv_head} kv heads of dim {d}",
            q.cols()
        )));
    }
    let group = n_head / n_kv_head;
    let n_q = q.rows();
    let mut out = vec![0.0f32; n_kv_head * n_q * d];
    let inv = 1.0 / group as f32;
    for g in 0..n_kv_head {
        for t in 0..n_q {
            let row = q.row(t);
            let dst = &mut out[(g * n_q + t) * d..(g * n_q + t + 1) * d];
            for h in g * group..(g + 1) * group {
                for (o, x) in dst.iter_mut().zip(&row[h * d..(h + 1) * d]) {
                    *o += x;
                }
            }
            dst.iter_mut().for_each(|o| *o *= inv);
        }
    }
    Ok(out)
}
