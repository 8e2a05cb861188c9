//! Toy pre-norm decoder-only transformer: RMS norm, grouped-query attention,
//! two-matrix gated feed-forward, residual connections and an untied LM head.
//!
//! [`forward_full`] is the dense causal reference. The cached attention modes
//! live in [`crate::reattention`] and reuse the block structure through
//! [`forward_layers`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::{read_f32s, read_u32};
use crate::numerics::{dot, rope_rotate, stable_softmax, DenseMatrix, MatRef, RotaryTable};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"RATW";
pub const WEIGHTS_VERSION: u32 = 1;

const RMS_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Every cached token at its true position; bounded by the pretrain window.
    Full,
    /// Global prefix plus local suffix only.
    Window,
    /// Global + selected middle spans + local.
    #[default]
    #[serde(alias = "re_attention")]
    Reattention,
}

impl AttentionMode {
    fn code(self) -> u32 {
        match self {
            AttentionMode::Full => 0,
            AttentionMode::Window => 1,
            AttentionMode::Reattention => 2,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => AttentionMode::Full,
            1 => AttentionMode::Window,
            2 => AttentionMode::Reattention,
            other => return Err(Error::Format(format!("unknown attention mode code {other}"))),
        })
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AttentionMode::Full),
            "window" => Ok(AttentionMode::Window),
            "reattention" => Ok(AttentionMode::Reattention),
            other => Err(Error::Config(format!("unknown attention mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub n_kv_head: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Largest position the rotary table covers.
    pub pretrain_window: usize,
    pub rope_base: f64,
    pub attention_mode: AttentionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layer: 2,
            n_head: 4,
            n_kv_head: 2,
            d_model: 128,
            d_head: 32,
            d_ff: 512,
            vocab_size: 512,
            pretrain_window: 4096,
            rope_base: 10000.0,
            attention_mode: AttentionMode::Reattention,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if [
            self.n_layer,
            self.n_head,
            self.n_kv_head,
            self.d_head,
            self.d_ff,
            self.vocab_size,
            self.pretrain_window,
        ]
        .contains(&0)
        {
            return fail("model dimensions must be positive".into());
        }
        if !self.n_head.is_multiple_of(self.n_kv_head) {
            return fail(format!(
                "n_head {} not divisible by n_kv_head {}",
                self.n_head, self.n_kv_head
            ));
        }
        if self.d_model != self.n_head * self.d_head {
            return fail(format!(
                "d_model {} != n_head {} x d_head {}",
                self.d_model, self.n_head, self.d_head
            ));
        }
        if !self.d_head.is_multiple_of(2) {
            return fail(format!("d_head {} must be even", self.d_head));
        }
        if self.rope_base.is_nan() || self.rope_base <= 0.0 {
            return fail("rope_base must be positive".into());
        }
        Ok(())
    }

    pub fn q_dim(&self) -> usize {
        self.n_head * self.d_head
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_head * self.d_head
    }

    pub fn group_size(&self) -> usize {
        self.n_head / self.n_kv_head
    }

    /// `(name, shape)` of every tensor, in file order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("embedding".to_string(), vec![self.vocab_size, self.d_model])];
        for i in 0..self.n_layer {
            let p = format!("layers.{i}");
            out.push((format!("{p}.attn_norm"), vec![self.d_model]));
            out.push((format!("{p}.wq"), vec![self.q_dim(), self.d_model]));
            out.push((format!("{p}.wk"), vec![self.kv_dim(), self.d_model]));
            out.push((format!("{p}.wv"), vec![self.kv_dim(), self.d_model]));
            out.push((format!("{p}.wo"), vec![self.d_model, self.q_dim()]));
            out.push((format!("{p}.ffn_norm"), vec![self.d_model]));
            out.push((format!("{p}.w_in"), vec![2 * self.d_ff, self.d_model]));
            out.push((format!("{p}.w_out"), vec![self.d_model, self.d_ff]));
        }
        out.push(("final_norm".to_string(), vec![self.d_model]));
        out.push(("lm_head".to_string(), vec![self.vocab_size, self.d_model]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    /// Projections are stored `out x in`.
    pub wq: DenseMatrix,
    pub wk: DenseMatrix,
    pub wv: DenseMatrix,
    pub wo: DenseMatrix,
    pub ffn_norm: Vec<f32>,
    /// Gate rows `0..d_ff`, up rows `d_ff..2*d_ff`.
    pub w_in: DenseMatrix,
    pub w_out: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embedding: DenseMatrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: DenseMatrix,
}

impl ModelWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Flat tensors in [`ModelConfig::tensor_layout`] order.
    fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.embedding.as_slice()];
        for l in &self.layers {
            out.extend([
                l.attn_norm.as_slice(),
                l.wq.as_slice(),
                l.wk.as_slice(),
                l.wv.as_slice(),
                l.wo.as_slice(),
                l.ffn_norm.as_slice(),
                l.w_in.as_slice(),
                l.w_out.as_slice(),
            ]);
        }
        out.push(&self.final_norm);
        out.push(self.lm_head.as_slice());
        out
    }

    fn from_tensors(config: ModelConfig, tensors: Vec<Vec<f32>>) -> Result<Self> {
        let layout = config.tensor_layout();
        if tensors.len() != layout.len() {
            return Err(Error::Format(format!(
                "{} tensors, expected {}",
                tensors.len(),
                layout.len()
            )));
        }
        let mut it = tensors.into_iter().zip(layout);
        let mut next = || -> Result<DenseMatrix> {
            let (data, (name, shape)) = it.next().expect("length checked above");
            let (rows, cols) = match shape.as_slice() {
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => unreachable!("layout tensors are rank 1 or 2"),
            };
            DenseMatrix::from_vec(rows, cols, data)
                .map_err(|_| Error::Shape(format!("tensor '{name}' has wrong element count")))
        };
        let embedding = next()?;
        let mut layers = Vec::with_capacity(config.n_layer);
        for _ in 0..config.n_layer {
            layers.push(LayerWeights {
                attn_norm: next()?.into_vec(),
                wq: next()?,
                wk: next()?,
                wv: next()?,
                wo: next()?,
                ffn_norm: next()?.into_vec(),
                w_in: next()?,
                w_out: next()?,
            });
        }
        let final_norm = next()?.into_vec();
        let lm_head = next()?;
        Ok(Self {
            config,
            embedding,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Seeded normal(0, 0.02) init for matrices; norm gains start at 1.
pub fn init_random(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("constant std is valid");
    let tensors = config
        .tensor_layout()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            if name.ends_with("norm") {
                vec![1.0f32; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            }
        })
        .collect();
    ModelWeights::from_tensors(config.clone(), tensors)
}

/// `x W^T` for `W` stored `out x in`.
pub fn linear(x: MatRef<'_>, w: &DenseMatrix) -> DenseMatrix {
    debug_assert_eq!(x.cols(), w.cols());
    let mut out = DenseMatrix::zeros(x.rows(), w.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        for (o, wr) in out.row_mut(i).iter_mut().zip(w.as_slice().chunks_exact(w.cols())) {
            *o = dot(xi, wr);
        }
    }
    out
}

pub fn rms_norm(x: MatRef<'_>, gain: &[f32]) -> DenseMatrix {
    let mut out = x.to_owned();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / row.len() as f64;
        let inv = (1.0 / (ms + RMS_EPS).sqrt()) as f32;
        for (v, g) in row.iter_mut().zip(gain) {
            *v = *v * inv * g;
        }
    }
    out
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn feed_forward(h: MatRef<'_>, layer: &LayerWeights) -> DenseMatrix {
    let d_ff = layer.w_out.cols();
    let up = linear(h, &layer.w_in);
    let mut act = DenseMatrix::zeros(h.rows(), d_ff);
    for i in 0..h.rows() {
        let (gate, lin) = up.row(i).split_at(d_ff);
        for ((a, &g), &u) in act.row_mut(i).iter_mut().zip(gate).zip(lin) {
            *a = silu(g) * u;
        }
    }
    linear(act.view(), &layer.w_out)
}

pub fn embed(weights: &ModelWeights, tokens: &[u32]) -> Result<DenseMatrix> {
    let d = weights.config.d_model;
    let vocab_size = weights.config.vocab_size;
    let mut out = DenseMatrix::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        if t as usize >= vocab_size {
            return Err(Error::TokenOutOfRange { token: t, vocab_size });
        }
        out.row_mut(i).copy_from_slice(weights.embedding.row(t as usize));
    }
    Ok(out)
}

/// Projections of one block for one layer, all un-rotated.
pub struct LayerProjections {
    /// `n x (n_head * d_head)`
    pub q: DenseMatrix,
    /// `n x (n_kv_head * d_head)`
    pub k: DenseMatrix,
    pub v: DenseMatrix,
}

/// Runs the residual stack over a block of tokens, delegating attention to
/// `attend(layer, projections)`, which must return `n x (n_head * d_head)`.
/// Returns logits for every row of the block.
pub fn forward_layers<F>(weights: &ModelWeights, tokens: &[u32], mut attend: F) -> Result<DenseMatrix>
where
    F: FnMut(usize, LayerProjections) -> Result<DenseMatrix>,
{
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut x = embed(weights, tokens)?;
    for (li, layer) in weights.layers.iter().enumerate() {
        let h = rms_norm(x.view(), &layer.attn_norm);
        let proj = LayerProjections {
            q: linear(h.view(), &layer.wq),
            k: linear(h.view(), &layer.wk),
            v: linear(h.view(), &layer.wv),
        };
        let attn = attend(li, proj)?;
        let o = linear(attn.view(), &layer.wo);
        add_in_place(&mut x, &o);
        let h2 = rms_norm(x.view(), &layer.ffn_norm);
        let f = feed_forward(h2.view(), layer);
        add_in_place(&mut x, &f);
    }
    let hn = rms_norm(x.view(), &weights.final_norm);
    Ok(linear(hn.view(), &weights.lm_head))
}

fn add_in_place(x: &mut DenseMatrix, y: &DenseMatrix) {
    for (a, b) in x.as_mut_slice().iter_mut().zip(y.as_slice()) {
        *a += b;
    }
}

/// Copies head `h` (columns `h*d..(h+1)*d`) out of a multi-head block.
pub fn head_slice(m: &DenseMatrix, h: usize, d: usize) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(m.rows(), d);
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&m.row(i)[h * d..(h + 1) * d]);
    }
    out
}

/// Dense causal forward at true positions; logits for every position.
///
/// Deliberately plain: every score row is materialized and normalized with
/// [`stable_softmax`]. It serves as the reference for the cached modes.
pub fn forward_full(tokens: &[u32], weights: &ModelWeights) -> Result<DenseMatrix> {
    let cfg = &weights.config;
    if tokens.len() > cfg.pretrain_window {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            window: cfg.pretrain_window,
        });
    }
    let rope = RotaryTable::new(cfg.d_head, cfg.rope_base, cfg.pretrain_window)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let d = cfg.d_head;
    let scale = 1.0 / (d as f32).sqrt();
    forward_layers(weights, tokens, |_, p| {
        let n = p.q.rows();
        let mut out = DenseMatrix::zeros(n, cfg.q_dim());
        let keys: Vec<DenseMatrix> = (0..cfg.n_kv_head)
            .map(|g| rope_rotate(head_slice(&p.k, g, d).view(), &positions, &rope))
            .collect::<Result<_>>()?;
        for h in 0..cfg.n_head {
            let g = h / cfg.group_size();
            let q = rope_rotate(head_slice(&p.q, h, d).view(), &positions, &rope)?;
            for i in 0..n {
                let scores: Vec<f32> = (0..=i).map(|j| dot(q.row(i), keys[g].row(j)) * scale).collect();
                let probs = stable_softmax(&scores)?;
                let mut acc = vec![0.0f64; d];
                for (j, &pj) in probs.iter().enumerate() {
                    for (a, &vv) in acc.iter_mut().zip(&p.v.row(j)[g * d..(g + 1) * d]) {
                        *a += pj as f64 * vv as f64;
                    }
                }
                for (o, a) in out.row_mut(i)[h * d..(h + 1) * d].iter_mut().zip(acc) {
                    *o = a as f32;
                }
            }
        }
        Ok(out)
    })
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Writes the `RATW` container. See `docs/formats.md` for the byte layout.
pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<()> {
    let cfg = &weights.config;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    for v in [
        cfg.n_layer,
        cfg.n_head,
        cfg.n_kv_head,
        cfg.d_model,
        cfg.d_head,
        cfg.d_ff,
        cfg.vocab_size,
        cfg.pretrain_window,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&cfg.rope_base.to_le_bytes());
    buf.extend_from_slice(&cfg.attention_mode.code().to_le_bytes());
    let layout = cfg.tensor_layout();
    buf.extend_from_slice(&(layout.len() as u32).to_le_bytes());
    for ((name, shape), data) in layout.iter().zip(weights.tensors()) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        buf.clear();
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a `RATW` file using the config stored in it.
pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    load_inner(path, None)
}

/// Loads a `RATW` file and requires every tensor to match `expected`.
pub fn load_weights_for(path: &Path, expected: &ModelConfig) -> Result<ModelWeights> {
    load_inner(path, Some(expected))
}

fn load_inner(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelWeights> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format(format!("bad weights magic {magic:?}, expected \"RATW\"")));
    }
    let version = read_u32(&mut r)?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!(
            "unsupported weights version {version}, expected {WEIGHTS_VERSION}"
        )));
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = read_u32(&mut r)? as usize;
    }
    let mut base = [0u8; 8];
    r.read_exact(&mut base)
        .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
    let mode = AttentionMode::from_code(read_u32(&mut r)?)?;
    let stored = ModelConfig {
        n_layer: dims[0],
        n_head: dims[1],
        n_kv_head: dims[2],
        d_model: dims[3],
        d_head: dims[4],
        d_ff: dims[5],
        vocab_size: dims[6],
        pretrain_window: dims[7],
        rope_base: f64::from_le_bytes(base),
        attention_mode: mode,
    };
    let config = match expected {
        Some(e) => e.clone(),
        None => {
            stored.validate()?;
            stored
        }
    };
    let layout = config.tensor_layout();
    let count = read_u32(&mut r)? as usize;
    if count != layout.len() {
        return Err(Error::Shape(format!(
            "file holds {count} tensors, config expects {}",
            layout.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in &layout {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!("implausible tensor name length {name_len}")));
        }
        let mut raw = vec![0u8; name_len];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
        let found_name = String::from_utf8_lossy(&raw);
        if found_name != name.as_str() {
            return Err(Error::Format(format!("expected tensor '{name}', found '{found_name}'")));
        }
        let rank = read_u32(&mut r)? as usize;
        if rank > 4 {
            return Err(Error::Format(format!("tensor '{name}' has rank {rank}")));
        }
        let found: Vec<usize> = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<_>>()?;
        if &found != shape {
            return Err(Error::Shape(format!(
                "tensor '{name}' shape mismatch: expected {shape:?}, found {found:?}"
            )));
        }
        tensors.push(read_f32s(&mut r, shape.iter().product())?);
    }
    ModelWeights::from_tensors(config, tensors)
}
