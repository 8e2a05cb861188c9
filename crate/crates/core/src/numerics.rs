//! Dense primitives shared by the model and the attention path: row-major
//! matrices, stable softmax, rotary position embedding, streaming (online
//! softmax) attention, and attention entropy.
//!
//! Scores and projections are `f32`; softmax normalizers and attention
//! accumulators are carried in `f64`.

use crate::error::{Error, Result};

/// Keys processed per block inside [`attend`].
const ATTEND_KEY_TILE: usize = 64;

/// Owned row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn view(&self) -> MatRef<'_> {
        MatRef {
            rows: self.rows,
            cols: self.cols,
            data: &self.data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Borrowed row-major matrix view.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    rows: usize,
    cols: usize,
    data: &'a [f32],
}

impl<'a> MatRef<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f32]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} view", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &'a [f32] {
        self.data
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_owned(&self) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.to_vec(),
        }
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for lane in 0..8 {
            acc[lane] += x[lane] * y[lane];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Softmax with max subtraction; the normalizer is accumulated in `f64`.
pub fn stable_softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| (e / sum) as f32).collect())
}

/// Shannon entropy in nats; `0 ln 0` counts as zero.
pub fn attention_entropy(weights: &[f64]) -> f64 {
    -weights.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Precomputed cos/sin tables for interleaved rotary embedding.
///
/// Dimension pair `(2i, 2i + 1)` at position `p` is rotated by
/// `p * base^(-2i / head_dim)`.
#[derive(Debug, Clone)]
pub struct RotaryTable {
    head_dim: usize,
    base: f64,
    max_position: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RotaryTable {
    pub fn new(head_dim: usize, base: f64, max_position: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary head_dim {head_dim} must be even and > 0"
            )));
        }
        if !(base > 0.0 && base.is_finite()) {
            return Err(Error::Config(format!("rotary base {base} must be positive")));
        }
        let pairs = head_dim / 2;
        let inv_freq: Vec<f64> = (0..pairs)
            .map(|i| base.powf(-((2 * i) as f64) / head_dim as f64))
            .collect();
        let mut cos = Vec::with_capacity(max_position * pairs);
        let mut sin = Vec::with_capacity(max_position * pairs);
        for pos in 0..max_position {
            for &f in &inv_freq {
                let angle = pos as f64 * f;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Ok(Self {
            head_dim,
            base,
            max_position,
            cos,
            sin,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn max_position(&self) -> usize {
        self.max_position
    }

    /// `(cos, sin)` for one position, indexed by dimension pair.
    pub fn angles(&self, position: usize) -> Result<(&[f32], &[f32])> {
        self.check_position(position)?;
        let pairs = self.head_dim / 2;
        let r = position * pairs..(position + 1) * pairs;
        Ok((&self.cos[r.clone()], &self.sin[r]))
    }

    pub fn check_position(&self, position: usize) -> Result<()> {
        if position >= self.max_position {
            return Err(Error::PositionOutOfRange {
                position,
                max_position: self.max_position,
            });
        }
        Ok(())
    }

    pub fn rotate_in_place(&self, row: &mut [f32], position: usize) -> Result<()> {
        if row.len() != self.head_dim {
            return Err(Error::Shape(format!(
                "rotary row of length {} for head_dim {}",
                row.len(),
                self.head_dim
            )));
        }
        let (cos, sin) = self.angles(position)?;
        for (pair, (c, s)) in row.chunks_exact_mut(2).zip(cos.iter().zip(sin)) {
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = x0 * c - x1 * s;
            pair[1] = x0 * s + x1 * c;
        }
        Ok(())
    }
}

/// Rotates each row of `vectors` to its position.
pub fn rope_rotate(vectors: MatRef<'_>, positions: &[usize], table: &RotaryTable) -> Result<DenseMatrix> {
    if positions.len() != vectors.rows() {
        return Err(Error::Shape(format!(
            "{} positions for {} rows",
            positions.len(),
            vectors.rows()
        )));
    }
    let mut out = vectors.to_owned();
    for (i, &p) in positions.iter().enumerate() {
        table.rotate_in_place(out.row_mut(i), p)?;
    }
    Ok(out)
}

/// Scaled dot-product attention with streaming accumulation.
///
/// With `causal_boundary = Some(b)`, query row `i` sees keys `0..b + i + 1`.
/// The full score matrix is never materialized.
pub fn attend(q: MatRef<'_>, k: MatRef<'_>, v: MatRef<'_>, causal_boundary: Option<usize>) -> Result<DenseMatrix> {
    attend_inner(q, k, v, causal_boundary, None)
}

/// [`attend`] that also reports each query row's attention entropy (nats).
pub fn attend_with_entropy(
    q: MatRef<'_>,
    k: MatRef<'_>,
    v: MatRef<'_>,
    causal_boundary: Option<usize>,
) -> Result<(DenseMatrix, Vec<f64>)> {
    let mut entropy = vec![0.0; q.rows()];
    let out = attend_inner(q, k, v, causal_boundary, Some(&mut entropy))?;
    Ok((out, entropy))
}

fn attend_inner(
    q: MatRef<'_>,
    k: MatRef<'_>,
    v: MatRef<'_>,
    causal_boundary: Option<usize>,
    mut entropy: Option<&mut [f64]>,
) -> Result<DenseMatrix> {
    let len = k.rows();
    if len == 0 {
        return Err(Error::EmptyKeySet);
    }
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!("query dim {} vs key dim {}", q.cols(), k.cols())));
    }
    if v.rows() != len {
        return Err(Error::Shape(format!("{} values for {} keys", v.rows(), len)));
    }
    let dv = v.cols();
    let scale = 1.0 / (q.cols() as f32).sqrt();
    let mut out = DenseMatrix::zeros(q.rows(), dv);
    let mut scores = [0.0f32; ATTEND_KEY_TILE];
    let mut acc = vec![0.0f64; dv];

    for i in 0..q.rows() {
        let qi = q.row(i);
        let visible = causal_boundary.map_or(len, |b| (b + i + 1).min(len));
        let mut max = f64::NEG_INFINITY;
        // Running sum of exp(s - max) and of exp(s - max) * (s - max).
        let mut norm = 0.0f64;
        let mut shifted = 0.0f64;
        acc.iter_mut().for_each(|a| *a = 0.0);

        let mut start = 0;
        while start < visible {
            let end = (start + ATTEND_KEY_TILE).min(visible);
            let tile = &mut scores[..end - start];
            let mut tile_max = f32::NEG_INFINITY;
            for (j, s) in tile.iter_mut().enumerate() {
                *s = dot(qi, k.row(start + j)) * scale;
                tile_max = tile_max.max(*s);
            }
            let tile_max = tile_max as f64;
            if tile_max > max {
                if norm > 0.0 {
                    let alpha = (max - tile_max).exp();
                    shifted = alpha * (shifted + (max - tile_max) * norm);
                    norm *= alpha;
                    acc.iter_mut().for_each(|a| *a *= alpha);
                }
                max = tile_max;
            }
            for (j, &s) in tile.iter().enumerate() {
                let delta = s as f64 - max;
                let p = (delta as f32).exp() as f64;
                norm += p;
                shifted += p * delta;
                for (a, &x) in acc.iter_mut().zip(v.row(start + j)) {
                    *a += p * x as f64;
                }
            }
            start = end;
        }

        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = (a / norm) as f32;
        }
        if let Some(h) = entropy.as_deref_mut() {
            h[i] = (norm.ln() - shifted / norm).max(0.0);
        }
    }
    Ok(out)
}
