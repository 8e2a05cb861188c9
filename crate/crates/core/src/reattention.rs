//! One attention step over a bounded scope, and the prefill/decode engine.
//!
//! A step appends the block's own K/V first, then (in `Reattention` mode)
//! selects middle spans with the un-rotated queries, concatenates
//! `global | spans | local` in original order, assigns compact positions
//! `0..L'`, rotates, and runs causal attention with the block's queries at the
//! scope tail. `Window` mode builds the `global | local` scope directly and
//! `Full` mode attends over the whole cache at true positions.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kv_cache::SegmentedKvCache;
use crate::model::{argmax, forward_layers, head_slice, AttentionMode, ModelWeights};
use crate::numerics::{attend_with_entropy, rope_rotate, DenseMatrix, RotaryTable};
use crate::selection::{
    group_mean_queries, select_spans, MiddleKeys, QueryBlock, ScratchMeter, SelectionConfig, SpanSet,
};

/// Keys and values actually attended in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScope {
    /// Cache index of each scope entry, strictly increasing.
    pub source_indices: Vec<usize>,
    /// Per KV head, `L' x d_head`, un-rotated.
    pub keys: Vec<DenseMatrix>,
    pub values: Vec<DenseMatrix>,
}

impl AttentionScope {
    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }

    /// Compact sequential positions; entry `i` of the scope sits at position `i`.
    pub fn compact_positions(&self) -> std::ops::Range<usize> {
        0..self.len()
    }
}

fn gather(cache: &SegmentedKvCache, indices: Vec<usize>) -> AttentionScope {
    let d = cache.d_head();
    let mut keys = Vec::with_capacity(cache.n_kv_heads());
    let mut values = Vec::with_capacity(cache.n_kv_heads());
    for h in 0..cache.n_kv_heads() {
        let mut k = Vec::with_capacity(indices.len() * d);
        let mut v = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            k.extend_from_slice(cache.key(h, i));
            v.extend_from_slice(cache.value(h, i));
        }
        keys.push(DenseMatrix::from_vec(indices.len(), d, k).expect("gathered rows have d_head columns"));
        values.push(DenseMatrix::from_vec(indices.len(), d, v).expect("gathered rows have d_head columns"));
    }
    AttentionScope {
        source_indices: indices,
        keys,
        values,
    }
}

/// `global ++ spans (middle coordinates, ascending) ++ local`.
pub fn assemble_scope(cache: &SegmentedKvCache, spans: &SpanSet, pretrain_window: usize) -> Result<AttentionScope> {
    let global = cache.global_range();
    let middle = cache.middle_range();
    let local = cache.local_range();
    if let Some(last) = spans.ranges().last() {
        if last.end > middle.len() {
            return Err(Error::Shape(format!(
                "span {last:?} outside middle of length {}",
                middle.len()
            )));
        }
    }
    let scope_len = global.len() + spans.covered_len() + local.len();
    if scope_len > pretrain_window {
        return Err(Error::ScopeExceedsWindow {
            scope_len,
            window: pretrain_window,
        });
    }
    let mut indices = Vec::with_capacity(scope_len);
    indices.extend(global);
    indices.extend(spans.indices().map(|i| middle.start + i));
    indices.extend(local);
    Ok(gather(cache, indices))
}

/// Λ-shaped window scope: the first `l_global` and last `l_local` entries,
/// copied straight from the cache without going through span selection.
pub fn window_scope(cache: &SegmentedKvCache, pretrain_window: usize) -> Result<AttentionScope> {
    let len = cache.len();
    let head_end = len.min(cache.l_global());
    let tail_start = len.saturating_sub(cache.l_local_max()).max(head_end);
    let scope_len = head_end + (len - tail_start);
    if scope_len > pretrain_window {
        return Err(Error::ScopeExceedsWindow {
            scope_len,
            window: pretrain_window,
        });
    }
    let d = cache.d_head();
    let copy = |src: &[f32]| {
        let mut out = Vec::with_capacity(scope_len * d);
        out.extend_from_slice(&src[..head_end * d]);
        out.extend_from_slice(&src[tail_start * d..len * d]);
        DenseMatrix::from_vec(scope_len, d, out).expect("window rows have d_head columns")
    };
    Ok(AttentionScope {
        source_indices: (0..head_end).chain(tail_start..len).collect(),
        keys: (0..cache.n_kv_heads()).map(|h| copy(cache.head_keys(h))).collect(),
        values: (0..cache.n_kv_heads()).map(|h| copy(cache.head_values(h))).collect(),
    })
}

/// Shared, per-layer inputs of an attention step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub n_head: usize,
    pub selection: &'a SelectionConfig,
    pub rope: &'a RotaryTable,
    pub pretrain_window: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `n_q x (n_head * d_head)`
    pub output: DenseMatrix,
    pub spans: SpanSet,
    pub middle_len: usize,
    pub scope_len: usize,
    pub max_position: usize,
    /// Largest per-row attention entropy (nats).
    pub max_entropy: f64,
    /// Largest `entropy - ln(visible keys)` over rows; never positive up to rounding.
    pub max_entropy_excess: f64,
}

/// Rotates the scope at compact positions and attends with the queries at its tail.
fn attend_scope(
    q: &DenseMatrix,
    scope: &AttentionScope,
    n_head: usize,
    rope: &RotaryTable,
) -> Result<(DenseMatrix, f64, f64)> {
    let n_q = q.rows();
    let scope_len = scope.len();
    if scope_len < n_q {
        return Err(Error::Shape(format!(
            "scope of {scope_len} entries cannot hold {n_q} trailing queries"
        )));
    }
    let d = rope.head_dim();
    let n_kv = scope.keys.len();
    let group = n_head / n_kv;
    let key_positions: Vec<usize> = scope.compact_positions().collect();
    let query_positions: Vec<usize> = (scope_len - n_q..scope_len).collect();
    let boundary = scope_len - n_q;

    let rotated: Vec<DenseMatrix> = scope
        .keys
        .iter()
        .map(|k| rope_rotate(k.view(), &key_positions, rope))
        .collect::<Result<_>>()?;
    let mut out = DenseMatrix::zeros(n_q, n_head * d);
    let mut max_entropy = 0.0f64;
    let mut max_excess = f64::NEG_INFINITY;
    for h in 0..n_head {
        let g = h / group;
        let qh = rope_rotate(head_slice(q, h, d).view(), &query_positions, rope)?;
        let (o, entropy) = attend_with_entropy(qh.view(), rotated[g].view(), scope.values[g].view(), Some(boundary))?;
        for (i, &e) in entropy.iter().enumerate() {
            out.row_mut(i)[h * d..(h + 1) * d].copy_from_slice(o.row(i));
            let visible = (boundary + i + 1) as f64;
            max_entropy = max_entropy.max(e);
            max_excess = max_excess.max(e - visible.ln());
        }
    }
    Ok((out, max_entropy, max_excess))
}

/// Selection, scope assembly, sequential rotation and causal attention for
/// one block of `n_q` queries (un-rotated, `n_q x n_head*d_head`). The
/// block's K/V must already be appended to `cache`.
pub fn attend_step(
    q: &DenseMatrix,
    cache: &SegmentedKvCache,
    ctx: StepContext<'_>,
    meter: &mut ScratchMeter,
) -> Result<StepOutput> {
    let (n_kv, d) = (cache.n_kv_heads(), cache.d_head());
    let (_, middle, _) = cache.views();
    let middle_len = middle.len();
    let spans = if ctx.selection.k_prime > 0 && middle_len > 0 {
        let grouped = group_mean_queries(q.view(), ctx.n_head, n_kv, d)?;
        let queries = QueryBlock::new(n_kv, q.rows(), d, &grouped)?;
        select_spans(queries, &MiddleKeys::from_view(&middle), ctx.selection, meter)?.spans
    } else {
        SpanSet::default()
    };
    let scope = assemble_scope(cache, &spans, ctx.pretrain_window)?;
    let (output, max_entropy, max_entropy_excess) = attend_scope(q, &scope, ctx.n_head, ctx.rope)?;
    Ok(StepOutput {
        output,
        spans,
        middle_len,
        scope_len: scope.len(),
        max_position: scope.len() - 1,
        max_entropy,
        max_entropy_excess,
    })
}

/// Λ-window attention step (global prefix + local suffix).
pub fn window_attend_step(q: &DenseMatrix, cache: &SegmentedKvCache, ctx: StepContext<'_>) -> Result<StepOutput> {
    let scope = window_scope(cache, ctx.pretrain_window)?;
    let (output, max_entropy, max_entropy_excess) = attend_scope(q, &scope, ctx.n_head, ctx.rope)?;
    Ok(StepOutput {
        output,
        spans: SpanSet::default(),
        middle_len: cache.middle_len(),
        scope_len: scope.len(),
        max_position: scope.len() - 1,
        max_entropy,
        max_entropy_excess,
    })
}

/// Attention over the entire cache at true positions.
pub fn full_attend_step(q: &DenseMatrix, cache: &SegmentedKvCache, ctx: StepContext<'_>) -> Result<StepOutput> {
    if cache.len() > ctx.pretrain_window {
        return Err(Error::SequenceTooLong {
            len: cache.len(),
            window: ctx.pretrain_window,
        });
    }
    let scope = gather(cache, (0..cache.len()).collect());
    let (output, max_entropy, max_entropy_excess) = attend_scope(q, &scope, ctx.n_head, ctx.rope)?;
    Ok(StepOutput {
        output,
        spans: SpanSet::default(),
        middle_len: 0,
        scope_len: scope.len(),
        max_position: scope.len() - 1,
        max_entropy,
        max_entropy_excess,
    })
}

/// Running instrumentation over every attention step an engine performs.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EngineStats {
    pub attention_steps: usize,
    pub max_position: Option<usize>,
    pub max_scope_len: usize,
    pub max_entropy: f64,
    pub max_entropy_excess: Option<f64>,
    /// Steps with a non-empty middle whose spans did not cover all of it.
    pub partial_coverage_steps: usize,
    pub max_middle_len: usize,
}

impl EngineStats {
    fn record(&mut self, step: &StepOutput) {
        self.attention_steps += 1;
        self.max_position = Some(
            self.max_position
                .map_or(step.max_position, |p| p.max(step.max_position)),
        );
        self.max_scope_len = self.max_scope_len.max(step.scope_len);
        self.max_entropy = self.max_entropy.max(step.max_entropy);
        self.max_entropy_excess = Some(
            self.max_entropy_excess
                .map_or(step.max_entropy_excess, |e| e.max(step.max_entropy_excess)),
        );
        if step.middle_len > 0 && step.spans.covered_len() < step.middle_len {
            self.partial_coverage_steps += 1;
        }
        self.max_middle_len = self.max_middle_len.max(step.middle_len);
    }
}

/// Owns the per-layer caches of one generation and drives prefill/decode.
#[derive(Debug)]
pub struct Engine {
    weights: Arc<ModelWeights>,
    mode: AttentionMode,
    selection: SelectionConfig,
    rope: RotaryTable,
    caches: Vec<SegmentedKvCache>,
    meter: ScratchMeter,
    stats: EngineStats,
    last_spans: Vec<SpanSet>,
    last_logits: Option<Vec<f32>>,
}

impl Engine {
    /// Uses the attention mode stored in the model config.
    pub fn new(weights: Arc<ModelWeights>, selection: SelectionConfig) -> Result<Self> {
        let mode = weights.config.attention_mode;
        Self::with_mode(weights, selection, mode)
    }

    pub fn with_mode(weights: Arc<ModelWeights>, selection: SelectionConfig, mode: AttentionMode) -> Result<Self> {
        let cfg = weights.config.clone();
        cfg.validate()?;
        match mode {
            AttentionMode::Reattention => selection.validate(cfg.pretrain_window)?,
            AttentionMode::Window => SelectionConfig {
                k_prime: 0,
                ..selection.clone()
            }
            .validate(cfg.pretrain_window)?,
            AttentionMode::Full => {}
        }
        let rope = RotaryTable::new(cfg.d_head, cfg.rope_base, cfg.pretrain_window)?;
        let caches = (0..cfg.n_layer)
            .map(|_| SegmentedKvCache::new(cfg.n_kv_head, cfg.d_head, selection.l_global, selection.l_local))
            .collect();
        Ok(Self {
            weights,
            mode,
            selection,
            rope,
            caches,
            meter: ScratchMeter::default(),
            stats: EngineStats::default(),
            last_spans: vec![SpanSet::default(); cfg.n_layer],
            last_logits: None,
        })
    }

    pub fn mode(&self) -> AttentionMode {
        self.mode
    }

    pub fn selection(&self) -> &SelectionConfig {
        &self.selection
    }

    pub fn weights(&self) -> &Arc<ModelWeights> {
        &self.weights
    }

    pub fn caches(&self) -> &[SegmentedKvCache] {
        &self.caches
    }

    pub fn context_len(&self) -> usize {
        self.caches.first().map_or(0, SegmentedKvCache::len)
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = EngineStats::default();
        self.meter.reset();
    }

    /// Peak selection scratch bytes since the last [`Engine::reset_stats`].
    pub fn scratch_peak(&self) -> usize {
        self.meter.peak()
    }

    /// Span sets chosen by each layer during the most recent step.
    pub fn last_spans(&self) -> &[SpanSet] {
        &self.last_spans
    }

    pub fn last_logits(&self) -> Option<&[f32]> {
        self.last_logits.as_deref()
    }

    /// Processes a prompt: a first block of `l_global + l_local` tokens (when
    /// the cache is empty), then `l_chunk`-sized chunks. Returns the logits of
    /// the final chunk, one row per token.
    pub fn prefill(&mut self, tokens: &[u32]) -> Result<DenseMatrix> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        let first = if self.context_len() == 0 {
            self.selection.l_global + self.selection.l_local
        } else {
            self.selection.l_chunk
        };
        let mut start = 0;
        let mut end = first.min(tokens.len());
        loop {
            let logits = self.forward_block(&tokens[start..end])?;
            if end == tokens.len() {
                return Ok(logits);
            }
            start = end;
            end = (start + self.selection.l_chunk).min(tokens.len());
        }
    }

    /// Feeds one token and returns the greedy next token.
    pub fn decode_step(&mut self, last_token: u32) -> Result<u32> {
        self.forward_block(&[last_token])?;
        Ok(self.next_token().expect("forward_block stores logits"))
    }

    /// Greedy choice from the most recent logits.
    pub fn next_token(&self) -> Option<u32> {
        self.last_logits.as_deref().map(|l| argmax(l) as u32)
    }

    /// Prefill `prompt`, then emit `steps` greedy tokens.
    pub fn generate(&mut self, prompt: &[u32], steps: usize) -> Result<Vec<u32>> {
        self.prefill(prompt)?;
        let mut out = Vec::with_capacity(steps);
        let Some(mut tok) = self.next_token() else {
            return Ok(out);
        };
        for _ in 0..steps {
            out.push(tok);
            tok = self.decode_step(tok)?;
        }
        Ok(out)
    }

    fn forward_block(&mut self, tokens: &[u32]) -> Result<DenseMatrix> {
        let weights = Arc::clone(&self.weights);
        let n_head = weights.config.n_head;
        let window = weights.config.pretrain_window;
        let Self {
            mode,
            selection,
            rope,
            caches,
            meter,
            stats,
            last_spans,
            ..
        } = self;
        let ctx = StepContext {
            n_head,
            selection,
            rope,
            pretrain_window: window,
        };
        let logits = forward_layers(&weights, tokens, |layer, p| {
            let cache = &mut caches[layer];
            cache.append(p.k.as_slice(), p.v.as_slice())?;
            let step = match mode {
                AttentionMode::Reattention => attend_step(&p.q, cache, ctx, meter)?,
                AttentionMode::Window => window_attend_step(&p.q, cache, ctx)?,
                AttentionMode::Full => full_attend_step(&p.q, cache, ctx)?,
            };
            stats.record(&step);
            last_spans[layer] = step.spans;
            Ok(step.output)
        })?;
        self.last_logits = Some(logits.row(logits.rows() - 1).to_vec());
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_full, init_random, ModelConfig};

    fn small_model() -> ModelConfig {
        ModelConfig {
            n_layer: 2,
            n_head: 4,
            n_kv_head: 2,
            d_model: 32,
            d_head: 8,
            d_ff: 64,
            vocab_size: 64,
            pretrain_window: 256,
            ..ModelConfig::default()
        }
    }

    fn cache_with(n: usize, g: usize, l: usize) -> SegmentedKvCache {
        let mut c = SegmentedKvCache::new(1, 2, g, l);
        let k: Vec<f32> = (0..2 * n).map(|i| i as f32).collect();
        c.append(&k, &k).unwrap();
        c
    }

    #[test]
    fn scope_without_spans_is_global_then_local() {
        let c = cache_with(20, 3, 5);
        let s = assemble_scope(&c, &SpanSet::default(), 64).unwrap();
        assert_eq!(s.source_indices, vec![0, 1, 2, 15, 16, 17, 18, 19]);
        assert_eq!(s.compact_positions(), 0..8);
        assert_eq!(s.keys[0].row(3), c.key(0, 15));
        assert_eq!(window_scope(&c, 64).unwrap(), s);
    }

    #[test]
    fn scope_inserts_spans_in_order() {
        let c = cache_with(20, 3, 5);
        let spans = SpanSet::from_ranges(vec![8..10, 0..2]);
        let s = assemble_scope(&c, &spans, 64).unwrap();
        assert_eq!(s.source_indices, vec![0, 1, 2, 3, 4, 11, 12, 15, 16, 17, 18, 19]);
        let err = assemble_scope(&c, &spans, 11).unwrap_err();
        assert!(err.to_string().starts_with("scope exceeds pretrain window"));
    }

    #[test]
    fn single_token_prefill_matches_full() {
        let w = Arc::new(init_random(&small_model(), 1).unwrap());
        let sel = SelectionConfig {
            l_global: 4,
            l_local: 16,
            l_chunk: 8,
            k_prime: 2,
            span_m: 4,
            ..SelectionConfig::default()
        };
        let mut e = Engine::new(w.clone(), sel).unwrap();
        let got = e.prefill(&[5]).unwrap();
        let want = forward_full(&[5], &w).unwrap();
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn short_context_reattention_equals_window() {
        let w = Arc::new(init_random(&small_model(), 2).unwrap());
        let sel = SelectionConfig {
            l_global: 4,
            l_local: 32,
            l_chunk: 8,
            k_prime: 4,
            span_m: 4,
            ..SelectionConfig::default()
        };
        let tokens: Vec<u32> = (0..30).map(|i| (i * 7 % 64) as u32).collect();
        let mut a = Engine::with_mode(w.clone(), sel.clone(), AttentionMode::Reattention).unwrap();
        let mut b = Engine::with_mode(w, sel, AttentionMode::Window).unwrap();
        assert_eq!(a.prefill(&tokens).unwrap(), b.prefill(&tokens).unwrap());
    }

    #[test]
    fn full_mode_refuses_to_exceed_window() {
        let cfg = ModelConfig {
            pretrain_window: 16,
            ..small_model()
        };
        let w = Arc::new(init_random(&cfg, 0).unwrap());
        let sel = SelectionConfig {
            l_global: 2,
            l_local: 8,
            l_chunk: 4,
            k_prime: 1,
            span_m: 4,
            ..SelectionConfig::default()
        };
        let mut e = Engine::with_mode(w, sel, AttentionMode::Full).unwrap();
        let err = e.prefill(&[1u32; 20]).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { .. }));
    }

    #[test]
    fn empty_prefill_is_error() {
        let w = Arc::new(init_random(&small_model(), 0).unwrap());
        let sel = SelectionConfig {
            l_global: 4,
            l_local: 16,
            l_chunk: 8,
            k_prime: 1,
            span_m: 4,
            ..SelectionConfig::default()
        };
        let mut e = Engine::new(w, sel).unwrap();
        assert!(matches!(e.prefill(&[]), Err(Error::EmptyInput)));
    }
}
