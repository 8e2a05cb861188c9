//! Experiment drivers behind the `reattn` CLI.
//!
//! Every run is a pure function of an [`ExperimentConfig`] (including its
//! seed) and returns a list of [`MetricsRecord`]s plus any assertion failures.
//! Records are written one JSON object per line. Wall-clock fields and
//! timing assertions only apply when `timing` is enabled, so untimed runs are
//! byte-for-byte reproducible.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, forward_full, init_random, AttentionMode, ModelConfig, ModelWeights};
use crate::reattention::Engine;
use crate::selection::{
    aligned_block, fused_topk_scores, naive_topk_scores, select_spans, MiddleKeys, QueryBlock, ScratchMeter,
    SelectionConfig, TopkLists,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Equivalence,
    Niah,
    Extrapolate,
    Bench,
    Sweep,
}

impl RunKind {
    pub fn name(self) -> &'static str {
        match self {
            RunKind::Equivalence => "equivalence",
            RunKind::Niah => "niah",
            RunKind::Extrapolate => "extrapolate",
            RunKind::Bench => "bench",
            RunKind::Sweep => "sweep",
        }
    }
}

/// Hyperparameter grid for `sweep`. `l_global` is set equal to the span size
/// and `k_prime` is derived so that the scope budget equals `window`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub chunk: Vec<usize>,
    pub span: Vec<usize>,
    pub k: Vec<usize>,
    pub local: Vec<usize>,
    pub window: usize,
    /// Middle length of the per-cell vector needle test.
    pub needle_haystack: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            chunk: vec![512, 1024, 2048],
            span: vec![8, 16, 32, 64, 128],
            k: vec![1, 4, 8],
            local: vec![1024, 2048, 4096],
            window: 8192,
            needle_haystack: 16384,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub selection: SelectionConfig,
    pub seed: u64,
    /// Context lengths (middle lengths for `niah` and `bench`).
    pub context_lengths: Vec<usize>,
    /// Attention mode compared against (or driven by) the run.
    pub mode: AttentionMode,
    /// Seeds per length (`equivalence`) or needle trials (`niah`, `sweep`).
    pub trials: usize,
    pub decode_steps: usize,
    pub warmup_steps: usize,
    /// Record wall-clock latency in the output.
    pub timing: bool,
    pub needle_dim: usize,
    pub bench_queries: usize,
    pub bench_reps: usize,
    pub sweep: SweepGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            selection: SelectionConfig::default(),
            seed: 0,
            context_lengths: Vec::new(),
            mode: AttentionMode::Reattention,
            trials: 4,
            decode_steps: 32,
            warmup_steps: 8,
            timing: false,
            needle_dim: 64,
            bench_queries: 4,
            bench_reps: 5,
            sweep: SweepGrid::default(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults for each run kind when no lengths are given.
    pub fn default_lengths(kind: RunKind) -> Vec<usize> {
        match kind {
            RunKind::Equivalence => vec![512],
            RunKind::Niah => vec![65536],
            RunKind::Extrapolate => vec![16384],
            RunKind::Bench => vec![65536, 262144, 1048576],
            RunKind::Sweep => vec![],
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self, kind: RunKind) -> Result<()> {
        self.model.validate()?;
        if self.context_lengths.contains(&0) {
            return Err(Error::Config("context lengths must be positive".into()));
        }
        if kind != RunKind::Sweep && kind != RunKind::Bench && kind != RunKind::Niah {
            let check = match self.mode {
                AttentionMode::Window => SelectionConfig {
                    k_prime: 0,
                    ..self.selection.clone()
                },
                _ => self.selection.clone(),
            };
            check.validate(self.model.pretrain_window)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_secs(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            samples: samples.len(),
            mean_ms: 1e3 * samples.iter().sum::<f64>() / samples.len() as f64,
            p50_ms: 1e3 * sorted[sorted.len() / 2],
            max_ms: 1e3 * sorted[sorted.len() - 1],
        })
    }
}

/// One line of run output. Every field is always serialized; inapplicable
/// ones are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub kind: RunKind,
    pub mode: AttentionMode,
    pub context_len: usize,
    pub seed: u64,
    pub selection: SelectionConfig,
    pub scorer: Option<String>,
    pub latency: Option<LatencyStats>,
    pub peak_scratch_bytes: Option<usize>,
    pub baseline_scratch_bytes: Option<usize>,
    pub retrieval_hit_rate: Option<f64>,
    pub max_position: Option<usize>,
    pub max_entropy: Option<f64>,
    pub entropy_bound: Option<f64>,
    pub max_abs_logit_diff: Option<f64>,
    pub argmax_agreement: Option<f64>,
    pub logits_finite: Option<bool>,
    pub passed: bool,
}

impl MetricsRecord {
    fn new(run_id: String, kind: RunKind, cfg: &ExperimentConfig, context_len: usize) -> Self {
        Self {
            run_id,
            kind,
            mode: cfg.mode,
            context_len,
            seed: cfg.seed,
            selection: cfg.selection.clone(),
            scorer: None,
            latency: None,
            peak_scratch_bytes: None,
            baseline_scratch_bytes: None,
            retrieval_hit_rate: None,
            max_position: None,
            max_entropy: None,
            entropy_bound: None,
            max_abs_logit_diff: None,
            argmax_agreement: None,
            logits_finite: None,
            passed: true,
        }
    }
}

/// Records plus the messages of every in-run assertion that failed.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<String>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn check(&mut self, ok: bool, record: &mut MetricsRecord, msg: impl FnOnce() -> String) {
        if !ok {
            record.passed = false;
            self.failures.push(format!("{}: {}", record.run_id, msg()));
        }
    }
}

/// Appends records as JSON lines.
pub fn append_records(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn run(kind: RunKind, cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate(kind)?;
    match kind {
        RunKind::Equivalence => run_equivalence(cfg),
        RunKind::Niah => run_niah(cfg),
        RunKind::Extrapolate => run_extrapolate(cfg),
        RunKind::Bench => run_bench(cfg),
        RunKind::Sweep => run_sweep(cfg),
    }
}

fn lengths(cfg: &ExperimentConfig, kind: RunKind) -> Vec<usize> {
    if cfg.context_lengths.is_empty() {
        ExperimentConfig::default_lengths(kind)
    } else {
        cfg.context_lengths.clone()
    }
}

pub fn random_tokens(len: usize, vocab_size: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746f_6b65_6e73);
    (0..len).map(|_| rng.gen_range(0..vocab_size as u32)).collect()
}

// ---------------------------------------------------------------------------
// equivalence

/// Max-abs logit difference and argmax agreement between the engine's last
/// chunk and the dense reference over the same positions.
pub fn compare_with_full(
    weights: &Arc<ModelWeights>,
    selection: &SelectionConfig,
    mode: AttentionMode,
    tokens: &[u32],
) -> Result<EquivalenceResult> {
    let full = forward_full(tokens, weights)?;
    let mut engine = Engine::with_mode(Arc::clone(weights), selection.clone(), mode)?;
    let got = engine.prefill(tokens)?;
    let offset = full.rows() - got.rows();
    let mut max_diff = 0.0f64;
    let mut agree = 0usize;
    for i in 0..got.rows() {
        let (a, b) = (got.row(i), full.row(offset + i));
        for (x, y) in a.iter().zip(b) {
            max_diff = max_diff.max((x - y).abs() as f64);
        }
        agree += usize::from(argmax(a) == argmax(b));
    }
    let last = got.rows() - 1;
    Ok(EquivalenceResult {
        max_abs_diff: max_diff,
        argmax_agreement: agree as f64 / got.rows() as f64,
        last_argmax_equal: argmax(got.row(last)) == argmax(full.row(offset + last)),
        full_coverage: engine.stats().partial_coverage_steps == 0,
        max_middle_len: engine.stats().max_middle_len,
        logits_finite: got.is_finite(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceResult {
    pub max_abs_diff: f64,
    pub argmax_agreement: f64,
    pub last_argmax_equal: bool,
    /// No step left part of the middle segment unselected.
    pub full_coverage: bool,
    pub max_middle_len: usize,
    pub logits_finite: bool,
}

pub const EQUIVALENCE_TOL: f64 = 1e-4;

pub fn run_equivalence(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let mut out = RunOutcome::default();
    for (li, &len) in lengths(cfg, RunKind::Equivalence).iter().enumerate() {
        for t in 0..cfg.trials {
            let seed = cfg.seed + t as u64;
            let weights = Arc::new(init_random(&cfg.model, seed)?);
            let tokens = random_tokens(len, cfg.model.vocab_size, seed);
            let res = compare_with_full(&weights, &cfg.selection, cfg.mode, &tokens)?;
            let mut rec = MetricsRecord::new(format!("equivalence-{li}-{t}"), RunKind::Equivalence, cfg, len);
            rec.seed = seed;
            rec.max_abs_logit_diff = Some(res.max_abs_diff);
            rec.argmax_agreement = Some(res.argmax_agreement);
            rec.logits_finite = Some(res.logits_finite);
            // Equality is only promised where the bounded scope holds every token.
            let expected_equal = match cfg.mode {
                AttentionMode::Full => true,
                AttentionMode::Window => len <= cfg.selection.l_global + cfg.selection.l_local,
                AttentionMode::Reattention => res.full_coverage,
            };
            out.check(res.logits_finite, &mut rec, || "non-finite logits".into());
            if expected_equal {
                out.check(res.max_abs_diff <= EQUIVALENCE_TOL, &mut rec, || {
                    format!("max |logit diff| {:.3e} > {EQUIVALENCE_TOL:e}", res.max_abs_diff)
                });
                out.check(res.last_argmax_equal, &mut rec, || "greedy token differs".into());
            }
            out.records.push(rec);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// needle

/// Vector-level needle parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NeedleParams {
    pub haystack_len: usize,
    pub needle_pos: usize,
    pub seed: u64,
    pub vocab_size: usize,
    pub d_head: usize,
    /// Cosine of the needle key to the probe.
    pub needle_cos: f64,
    /// Noise keys are resampled until `|cos(key, probe)| < noise_cos_max`.
    pub noise_cos_max: f64,
}

impl NeedleParams {
    pub fn new(haystack_len: usize, needle_pos: usize, seed: u64) -> Self {
        Self {
            haystack_len,
            needle_pos,
            seed,
            vocab_size: 512,
            d_head: 64,
            needle_cos: 0.95,
            noise_cos_max: 0.3,
        }
    }
}

/// Keys planted for a vector-level retrieval test.
#[derive(Debug, Clone, PartialEq)]
pub struct NeedleInjection {
    pub d_head: usize,
    /// `haystack_len x d_head`, unit norm.
    pub keys: Vec<f32>,
    /// Unit-norm probe query.
    pub probe: Vec<f32>,
    pub needle_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleStream {
    /// Haystack token ids; the needle token sits at `needle_pos`.
    pub tokens: Vec<u32>,
    pub needle_pos: usize,
    pub needle_token: u32,
    pub injection: NeedleInjection,
}

impl NeedleStream {
    /// Ground-truth span: the aligned block holding the needle.
    pub fn ground_truth_block(&self, span_m: usize) -> std::ops::Range<usize> {
        aligned_block(self.needle_pos, span_m, self.tokens.len())
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn gen_needle_stream(haystack_len: usize, needle_pos: usize, seed: u64) -> Result<NeedleStream> {
    gen_needle_stream_with(&NeedleParams::new(haystack_len, needle_pos, seed))
}

pub fn gen_needle_stream_with(p: &NeedleParams) -> Result<NeedleStream> {
    if p.needle_pos >= p.haystack_len {
        return Err(Error::Config(format!(
            "needle position {} outside haystack of {}",
            p.needle_pos, p.haystack_len
        )));
    }
    if p.d_head < 2 || p.vocab_size < 2 {
        return Err(Error::Config("needle needs d_head >= 2 and vocab_size >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    // Token 0 is reserved for the needle.
    let mut tokens: Vec<u32> = (0..p.haystack_len)
        .map(|_| rng.gen_range(1..p.vocab_size as u32))
        .collect();
    tokens[p.needle_pos] = 0;

    let d = p.d_head;
    let probe = unit_gaussian(&mut rng, d);
    let mut keys = Vec::with_capacity(p.haystack_len * d);
    for i in 0..p.haystack_len {
        let key = if i == p.needle_pos {
            // probe * c + (component orthogonal to probe) * sqrt(1 - c^2)
            let r = unit_gaussian(&mut rng, d);
            let proj: f64 = r.iter().zip(&probe).map(|(a, b)| a * b).sum();
            let orth: Vec<f64> = r.iter().zip(&probe).map(|(a, b)| a - proj * b).collect();
            let on = orth.iter().map(|x| x * x).sum::<f64>().sqrt();
            let s = (1.0 - p.needle_cos * p.needle_cos).sqrt();
            probe
                .iter()
                .zip(&orth)
                .map(|(a, b)| p.needle_cos * a + s * b / on)
                .collect()
        } else {
            loop {
                let k = unit_gaussian(&mut rng, d);
                let cos: f64 = k.iter().zip(&probe).map(|(a, b)| a * b).sum();
                if cos.abs() < p.noise_cos_max {
                    break k;
                }
            }
        };
        keys.extend(key.into_iter().map(|x| x as f32));
    }
    Ok(NeedleStream {
        tokens,
        needle_pos: p.needle_pos,
        needle_token: 0,
        injection: NeedleInjection {
            d_head: d,
            keys,
            probe: probe.into_iter().map(|x| x as f32).collect(),
            needle_index: p.needle_pos,
        },
    })
}

/// Runs one selection pass of the probe against the planted keys and
/// reports whether the needle's entry was selected.
pub fn needle_selected(stream: &NeedleStream, selection: &SelectionConfig, meter: &mut ScratchMeter) -> Result<bool> {
    let inj = &stream.injection;
    let queries = QueryBlock::new(1, 1, inj.d_head, &inj.probe)?;
    let middle = MiddleKeys::new(stream.tokens.len(), inj.d_head, vec![&inj.keys])?;
    let sel = select_spans(queries, &middle, selection, meter)?;
    Ok(sel.spans.contains(inj.needle_index))
}

pub const NIAH_MIN_HIT_RATE: f64 = 0.99;

pub fn run_niah(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let mut out = RunOutcome::default();
    for (li, &len) in lengths(cfg, RunKind::Niah).iter().enumerate() {
        let (hits, peak) = needle_trials(cfg, &cfg.selection, len)?;
        let rate = hits as f64 / cfg.trials.max(1) as f64;
        let mut rec = MetricsRecord::new(format!("niah-{li}"), RunKind::Niah, cfg, len);
        rec.retrieval_hit_rate = Some(rate);
        rec.peak_scratch_bytes = Some(peak);
        out.check(rate >= NIAH_MIN_HIT_RATE, &mut rec, || {
            format!("needle hit rate {rate:.3} < {NIAH_MIN_HIT_RATE}")
        });
        out.records.push(rec);
    }
    Ok(out)
}

fn needle_trials(cfg: &ExperimentConfig, selection: &SelectionConfig, len: usize) -> Result<(usize, usize)> {
    let mut pos_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e65_6564_6c65);
    let mut meter = ScratchMeter::default();
    let mut hits = 0;
    for t in 0..cfg.trials {
        let pos = pos_rng.gen_range(0..len);
        let mut p = NeedleParams::new(len, pos, cfg.seed.wrapping_add(t as u64));
        p.d_head = cfg.needle_dim;
        let stream = gen_needle_stream_with(&p)?;
        hits += usize::from(needle_selected(&stream, selection, &mut meter)?);
    }
    Ok((hits, meter.peak()))
}

// ---------------------------------------------------------------------------
// extrapolation

/// Decode latency may drift by at most this factor between early and late steps.
pub const FLAT_LATENCY_RATIO: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct ExtrapolationResult {
    pub max_position: usize,
    pub max_entropy: f64,
    pub max_entropy_excess: f64,
    pub all_finite: bool,
    pub step_secs: Vec<f64>,
    pub generated: Vec<u32>,
}

/// Prefill `len` random tokens, then greedily decode `steps` tokens.
pub fn extrapolate_once(
    weights: &Arc<ModelWeights>,
    selection: &SelectionConfig,
    mode: AttentionMode,
    len: usize,
    steps: usize,
    seed: u64,
) -> Result<(Engine, ExtrapolationResult)> {
    let tokens = random_tokens(len, weights.config.vocab_size, seed);
    let mut engine = Engine::with_mode(Arc::clone(weights), selection.clone(), mode)?;
    engine.prefill(&tokens)?;
    let mut all_finite = engine.last_logits().is_some_and(|l| l.iter().all(|x| x.is_finite()));
    let mut tok = engine.next_token().expect("prefill produced logits");
    let mut step_secs = Vec::with_capacity(steps);
    let mut generated = Vec::with_capacity(steps);
    for _ in 0..steps {
        generated.push(tok);
        let t0 = Instant::now();
        tok = engine.decode_step(tok)?;
        step_secs.push(t0.elapsed().as_secs_f64());
        all_finite &= engine.last_logits().is_some_and(|l| l.iter().all(|x| x.is_finite()));
    }
    let stats = engine.stats().clone();
    Ok((
        engine,
        ExtrapolationResult {
            max_position: stats.max_position.unwrap_or(0),
            max_entropy: stats.max_entropy,
            max_entropy_excess: stats.max_entropy_excess.unwrap_or(0.0),
            all_finite,
            step_secs,
            generated,
        },
    ))
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

pub fn run_extrapolate(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_extrapolate_with(cfg, None)
}

/// As [`run_extrapolate`]; optionally dumps the last run's caches as an
/// `RKVC` snapshot.
pub fn run_extrapolate_with(cfg: &ExperimentConfig, dump_cache: Option<&Path>) -> Result<RunOutcome> {
    let mut out = RunOutcome::default();
    let weights = Arc::new(init_random(&cfg.model, cfg.seed)?);
    let window = cfg.model.pretrain_window;
    for (li, &len) in lengths(cfg, RunKind::Extrapolate).iter().enumerate() {
        let (engine, res) = extrapolate_once(&weights, &cfg.selection, cfg.mode, len, cfg.decode_steps, cfg.seed)?;
        if let Some(path) = dump_cache {
            crate::kv_cache::write_snapshot(path, engine.caches())?;
        }
        let mut rec = MetricsRecord::new(format!("extrapolate-{li}"), RunKind::Extrapolate, cfg, len);
        rec.max_position = Some(res.max_position);
        rec.max_entropy = Some(res.max_entropy);
        rec.entropy_bound = Some((window as f64).ln());
        rec.logits_finite = Some(res.all_finite);
        rec.peak_scratch_bytes = Some(engine.scratch_peak());
        if cfg.timing {
            rec.latency = LatencyStats::from_secs(&res.step_secs);
        }
        out.check(res.max_position < window, &mut rec, || {
            format!("rotary position {} >= window {window}", res.max_position)
        });
        out.check(res.all_finite, &mut rec, || "non-finite logits".into());
        out.check(
            res.max_entropy_excess <= 1e-9 && res.max_entropy <= (window as f64).ln() + 1e-9,
            &mut rec,
            || format!("attention entropy {} above its bound", res.max_entropy),
        );
        let w = cfg.warmup_steps;
        if cfg.timing && res.step_secs.len() >= 4 * w.max(1) {
            let body = &res.step_secs[w..];
            let q = body.len() / 4;
            let (early, late) = (median(&body[..q]), median(&body[body.len() - q..]));
            out.check(late <= FLAT_LATENCY_RATIO * early, &mut rec, || {
                format!("decode latency grew from {early:.2e}s to {late:.2e}s")
            });
        }
        out.records.push(rec);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// bench

/// Random scoring problem: `n_heads x n_q` queries against `len` middle keys.
pub struct ScoringProblem {
    pub n_heads: usize,
    pub n_q: usize,
    pub d: usize,
    pub queries: Vec<f32>,
    pub keys: Vec<Vec<f32>>,
}

impl ScoringProblem {
    pub fn random(n_heads: usize, n_q: usize, d: usize, len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect() };
        let queries = fill(n_heads * n_q * d);
        let keys = (0..n_heads).map(|_| fill(len * d)).collect();
        Self {
            n_heads,
            n_q,
            d,
            queries,
            keys,
        }
    }

    pub fn query_block(&self) -> QueryBlock<'_> {
        QueryBlock::new(self.n_heads, self.n_q, self.d, &self.queries).expect("sized at construction")
    }

    pub fn middle(&self) -> MiddleKeys<'_> {
        let len = self.keys[0].len() / self.d;
        MiddleKeys::new(len, self.d, self.keys.iter().map(Vec::as_slice).collect()).expect("sized at construction")
    }
}

#[derive(Debug, Clone)]
pub struct ScorerMeasurement {
    pub secs: f64,
    pub scratch_bytes: usize,
    pub result: TopkLists,
}

/// Best-of-`reps` wall time of the fused scorer.
pub fn measure_fused(problem: &ScoringProblem, k: usize, tile: usize, reps: usize) -> Result<ScorerMeasurement> {
    let mut best = f64::INFINITY;
    let mut last = None;
    let mut meter = ScratchMeter::default();
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        let r = fused_topk_scores(problem.query_block(), &problem.middle(), k, tile, &mut meter)?;
        best = best.min(t0.elapsed().as_secs_f64());
        last = Some(r);
    }
    Ok(ScorerMeasurement {
        secs: best,
        scratch_bytes: meter.peak(),
        result: last.expect("at least one rep"),
    })
}

pub fn measure_naive(problem: &ScoringProblem, k: usize, reps: usize) -> Result<ScorerMeasurement> {
    let mut best = f64::INFINITY;
    let mut last = None;
    let mut meter = ScratchMeter::default();
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        let r = naive_topk_scores(problem.query_block(), &problem.middle(), k, &mut meter)?;
        best = best.min(t0.elapsed().as_secs_f64());
        last = Some(r);
    }
    Ok(ScorerMeasurement {
        secs: best,
        scratch_bytes: meter.peak(),
        result: last.expect("at least one rep"),
    })
}

/// Fused scratch may vary by at most this fraction across middle lengths.
pub const SCRATCH_CONSTANCY_TOL: f64 = 0.10;

pub fn run_bench(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let mut out = RunOutcome::default();
    let lens = lengths(cfg, RunKind::Bench);
    let (k, tile) = (cfg.selection.k, cfg.selection.tile_size);
    let mut fused_scratch = Vec::new();
    for (li, &len) in lens.iter().enumerate() {
        let problem = ScoringProblem::random(
            cfg.model.n_kv_head,
            cfg.bench_queries,
            cfg.model.d_head,
            len,
            cfg.seed + li as u64,
        );
        let fused = measure_fused(&problem, k, tile, cfg.bench_reps)?;
        let naive = measure_naive(&problem, k, cfg.bench_reps.min(2))?;

        let mut rf = MetricsRecord::new(format!("bench-{li}-fused"), RunKind::Bench, cfg, len);
        rf.scorer = Some("fused".into());
        rf.peak_scratch_bytes = Some(fused.scratch_bytes);
        rf.baseline_scratch_bytes = Some(naive.scratch_bytes);
        let mut rn = MetricsRecord::new(format!("bench-{li}-naive"), RunKind::Bench, cfg, len);
        rn.scorer = Some("naive".into());
        rn.peak_scratch_bytes = Some(naive.scratch_bytes);
        if cfg.timing {
            rf.latency = LatencyStats::from_secs(&[fused.secs]);
            rn.latency = LatencyStats::from_secs(&[naive.secs]);
        }
        out.check(fused.result == naive.result, &mut rf, || {
            "fused and naive top-k differ".into()
        });
        if cfg.timing && len >= 65536 {
            out.check(fused.secs <= naive.secs, &mut rf, || {
                format!("fused {:.3e}s slower than naive {:.3e}s", fused.secs, naive.secs)
            });
        }
        if len >= tile {
            fused_scratch.push(fused.scratch_bytes);
        }
        out.records.push(rf);
        out.records.push(rn);
    }
    if let (Some(&lo), Some(&hi)) = (fused_scratch.iter().min(), fused_scratch.iter().max()) {
        if (hi - lo) as f64 > SCRATCH_CONSTANCY_TOL * lo as f64 {
            out.failures
                .push(format!("fused scratch varies from {lo} to {hi} bytes across lengths"));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// sweep

/// Cells of the sweep grid in deterministic order; cells whose chunk does not
/// fit in the local window, or whose budget leaves no room, are skipped.
pub fn sweep_cells(grid: &SweepGrid, base: &SelectionConfig) -> Vec<SelectionConfig> {
    let mut cells = Vec::new();
    for &chunk in &grid.chunk {
        for &span in &grid.span {
            for &k in &grid.k {
                for &local in &grid.local {
                    if chunk > local || span + local > grid.window || span == 0 {
                        continue;
                    }
                    cells.push(SelectionConfig {
                        k,
                        k_prime: (grid.window - span - local) / span,
                        span_m: span,
                        l_global: span,
                        l_local: local,
                        l_chunk: chunk,
                        ..base.clone()
                    });
                }
            }
        }
    }
    cells
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let mut out = RunOutcome::default();
    let model = ModelConfig {
        pretrain_window: cfg.sweep.window,
        ..cfg.model.clone()
    };
    for (ci, sel) in sweep_cells(&cfg.sweep, &cfg.selection).into_iter().enumerate() {
        // Two chunks past the first block, capped at the window for the dense reference.
        let len = (sel.l_global + sel.l_local + 2 * sel.l_chunk).min(model.pretrain_window);
        let weights = Arc::new(init_random(&model, cfg.seed)?);
        let tokens = random_tokens(len, model.vocab_size, cfg.seed);
        let eq = compare_with_full(&weights, &sel, AttentionMode::Reattention, &tokens)?;
        let cell_cfg = ExperimentConfig {
            selection: sel.clone(),
            ..cfg.clone()
        };
        let (hits, peak) = needle_trials(&cell_cfg, &sel, cfg.sweep.needle_haystack)?;
        let mut rec = MetricsRecord::new(format!("sweep-{ci}"), RunKind::Sweep, &cell_cfg, len);
        rec.mode = AttentionMode::Reattention;
        rec.max_abs_logit_diff = Some(eq.max_abs_diff);
        rec.argmax_agreement = Some(eq.argmax_agreement);
        rec.logits_finite = Some(eq.logits_finite);
        rec.retrieval_hit_rate = Some(hits as f64 / cfg.trials.max(1) as f64);
        rec.peak_scratch_bytes = Some(peak);
        out.check(eq.logits_finite, &mut rec, || "non-finite logits".into());
        if eq.full_coverage {
            out.check(eq.max_abs_diff <= EQUIVALENCE_TOL, &mut rec, || {
                format!("full coverage but |logit diff| {:.3e}", eq.max_abs_diff)
            });
        }
        out.records.push(rec);
    }
    Ok(out)
}
