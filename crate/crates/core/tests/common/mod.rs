//! Test-only reference implementations. None of these share code paths with
//! the library beyond the plain `dot` primitive.

#![allow(dead_code)]

pub mod props;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Materialize every score, softmax in f64, weighted sum in f64.
pub fn naive_attend(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    n_q: usize,
    len: usize,
    d: usize,
    boundary: Option<usize>,
) -> Vec<f32> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0f32; n_q * d];
    for i in 0..n_q {
        let visible = boundary.map_or(len, |b| (b + i + 1).min(len));
        let scores: Vec<f64> = (0..visible)
            .map(|j| (0..d).map(|c| q[i * d + c] as f64 * k[j * d + c] as f64).sum::<f64>() * scale)
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..d {
            out[i * d + c] = (0..visible).map(|j| e[j] / z * v[j * d + c] as f64).sum::<f64>() as f32;
        }
    }
    out
}

/// Full score matrix per (head, query), then a complete sort.
pub fn oracle_topk(
    queries: &[f32],
    keys: &[Vec<f32>],
    n_heads: usize,
    n_q: usize,
    d: usize,
    len: usize,
    k: usize,
) -> Vec<Vec<(usize, f32)>> {
    let mut out = Vec::new();
    for h in 0..n_heads {
        for q in 0..n_q {
            let qv = &queries[(h * n_q + q) * d..(h * n_q + q + 1) * d];
            let mut all: Vec<(usize, f32)> = (0..len)
                .map(|j| (j, reattention::numerics::dot(qv, &keys[h][j * d..(j + 1) * d])))
                .collect();
            all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            all.truncate(k);
            out.push(all);
        }
    }
    out
}

/// Tally in a BTreeMap, then rank by (votes desc, best score desc, index asc).
pub fn oracle_vote(lists: &[Vec<(usize, f32)>], k_prime: usize) -> Vec<(usize, usize, f32)> {
    let mut tally: BTreeMap<usize, (usize, f32)> = BTreeMap::new();
    for list in lists {
        for &(i, s) in list {
            let e = tally.entry(i).or_insert((0, f32::NEG_INFINITY));
            e.0 += 1;
            if s > e.1 {
                e.1 = s;
            }
        }
    }
    let mut v: Vec<(usize, usize, f32)> = tally.into_iter().map(|(i, (c, s))| (i, c, s)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
    v.truncate(k_prime);
    v
}

/// Unique aligned blocks as a sorted list of ranges.
pub fn oracle_blocks(winners: &[usize], m: usize, len: usize) -> Vec<std::ops::Range<usize>> {
    let blocks: std::collections::BTreeSet<usize> = winners.iter().map(|w| w / m).collect();
    blocks.into_iter().map(|b| b * m..((b + 1) * m).min(len)).collect()
}
