//! Property checks shared by the proptest suites and the acceptance runner.

#![allow(dead_code)]

use proptest::collection::{btree_set, vec};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use reattention::kv_cache::SegmentedKvCache;
use reattention::selection::{expand_spans, vote, ScoredIndex, SpanAlignment, TopkLists};

use super::{oracle_blocks, oracle_vote};

#[derive(Debug, Clone)]
pub struct SpanCase {
    pub winners: Vec<usize>,
    pub span_m: usize,
    pub middle_len: usize,
    pub centered: bool,
}

pub fn span_case() -> impl Strategy<Value = SpanCase> {
    (1usize..200_000, 1usize..=160, any::<bool>())
        .prop_flat_map(|(len, m, centered)| (vec(0..len, 0..=160), Just(m), Just(len), Just(centered)))
        .prop_map(|(winners, span_m, middle_len, centered)| SpanCase {
            winners,
            span_m,
            middle_len,
            centered,
        })
}

pub fn check_spans(c: &SpanCase) -> Result<(), TestCaseError> {
    let alignment = if c.centered {
        SpanAlignment::Centered
    } else {
        SpanAlignment::Aligned
    };
    let set = expand_spans(&c.winners, c.span_m, c.middle_len, alignment);
    let ranges = set.ranges();
    for r in ranges {
        prop_assert!(r.start < r.end && r.end <= c.middle_len, "range {r:?} out of bounds");
    }
    for w in ranges.windows(2) {
        prop_assert!(w[0].end <= w[1].start, "overlap {:?} {:?}", w[0], w[1]);
    }
    prop_assert!(set.covered_len() <= c.winners.len() * c.span_m);
    for &w in &c.winners {
        prop_assert!(set.contains(w), "winner {w} not covered");
    }
    if !c.centered {
        let want = oracle_blocks(&c.winners, c.span_m, c.middle_len);
        let got: Vec<usize> = set.indices().collect();
        let want: Vec<usize> = want.into_iter().flatten().collect();
        prop_assert_eq!(got, want);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct VoteCase {
    pub n_heads: usize,
    pub n_q: usize,
    pub lists: Vec<Vec<(usize, f32)>>,
    pub k_prime: usize,
}

pub fn vote_case() -> impl Strategy<Value = VoteCase> {
    (1usize..=8, 1usize..=8, 1usize..=8, 1usize..=300, 0usize..=160)
        .prop_flat_map(|(n_heads, n_q, k, len, k_prime)| {
            let list = btree_set(0..len, 0..=k.min(len)).prop_flat_map(|idx| {
                let n = idx.len();
                (Just(idx), vec(-8i32..8, n))
            });
            (Just(n_heads), Just(n_q), vec(list, n_heads * n_q), Just(k_prime))
        })
        .prop_map(|(n_heads, n_q, raw, k_prime)| VoteCase {
            n_heads,
            n_q,
            lists: raw
                .into_iter()
                .map(|(idx, s)| idx.into_iter().zip(s).map(|(i, s)| (i, s as f32 / 4.0)).collect())
                .collect(),
            k_prime,
        })
}

fn to_topk(n_heads: usize, n_q: usize, lists: &[Vec<(usize, f32)>]) -> TopkLists {
    let lists = lists
        .iter()
        .map(|l| l.iter().map(|&(index, score)| ScoredIndex { index, score }).collect())
        .collect();
    TopkLists::from_lists(n_heads, n_q, lists).expect("list count matches")
}

pub fn check_vote(c: &VoteCase) -> Result<(), TestCaseError> {
    let got = vote(&to_topk(c.n_heads, c.n_q, &c.lists), c.k_prime);
    let again = vote(&to_topk(c.n_heads, c.n_q, &c.lists), c.k_prime);
    prop_assert_eq!(&got, &again);
    let mut reversed = c.lists.clone();
    reversed.reverse();
    let swapped = vote(&to_topk(c.n_heads, c.n_q, &reversed), c.k_prime);
    prop_assert_eq!(&got, &swapped);

    let want = oracle_vote(&c.lists, c.k_prime);
    prop_assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        prop_assert_eq!((g.middle_index, g.votes), (w.0, w.1));
        prop_assert_eq!(g.score.to_bits(), w.2.to_bits());
        prop_assert!(g.votes >= 1);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CacheCase {
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub l_global: usize,
    pub l_local: usize,
    pub appends: Vec<usize>,
}

pub fn cache_case() -> impl Strategy<Value = CacheCase> {
    (
        1usize..=3,
        1usize..=4,
        0usize..=40,
        1usize..=80,
        vec(1usize..=70, 0..40),
    )
        .prop_map(|(n_kv_heads, d_head, l_global, l_local, appends)| CacheCase {
            n_kv_heads,
            d_head,
            l_global,
            l_local,
            appends,
        })
}

pub fn check_cache(c: &CacheCase) -> Result<(), TestCaseError> {
    let (h, d) = (c.n_kv_heads, c.d_head);
    let mut cache = SegmentedKvCache::new(h, d, c.l_global, c.l_local);
    let mut shadow_k: Vec<f32> = Vec::new();
    let mut rank = 0usize;
    for &n in &c.appends {
        let mut keys = Vec::with_capacity(n * h * d);
        for t in 0..n {
            for head in 0..h {
                for j in 0..d {
                    keys.push(((rank + t) * 1000 + head * 10 + j) as f32);
                }
            }
        }
        let values: Vec<f32> = keys.iter().map(|x| -x).collect();
        cache
            .append(&keys, &values)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        shadow_k.extend_from_slice(&keys);
        rank += n;

        let (g, m, l) = (cache.global_range(), cache.middle_range(), cache.local_range());
        prop_assert_eq!(g.start, 0);
        prop_assert_eq!(g.end, m.start);
        prop_assert_eq!(m.end, l.start);
        prop_assert_eq!(l.end, rank);
        prop_assert_eq!(g.len(), rank.min(c.l_global));
        prop_assert_eq!(l.len(), (rank - g.len()).min(c.l_local));
        prop_assert_eq!(m.clone(), c.l_global.min(rank)..rank - l.len());

        let (gv, mv, lv) = cache.views();
        prop_assert_eq!(gv.len() + mv.len() + lv.len(), rank);
        for head in 0..h {
            let mut flat: Vec<f32> = Vec::new();
            for v in [&gv, &mv, &lv] {
                flat.extend_from_slice(v.keys(head));
            }
            for (i, chunk) in flat.chunks_exact(d).enumerate() {
                let src = &shadow_k[(i * h + head) * d..(i * h + head + 1) * d];
                prop_assert_eq!(chunk, src, "entry {} head {}", i, head);
            }
            for (i, chunk) in mv.values(head).chunks_exact(d).enumerate() {
                let want = -(((m.start + i) * 1000 + head * 10) as f32);
                prop_assert_eq!(chunk[0].to_bits(), want.to_bits());
            }
        }
    }
    Ok(())
}
