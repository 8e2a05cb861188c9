//! C ABI over the reattention engine.
//!
//! Models and engines are opaque heap handles. Every fallible call returns a
//! [`RaStatus`]; on failure the message is kept per thread and can be copied
//! out with [`ra_last_error_message`]. The header `include/reattention.h` is
//! generated from this file by cbindgen at build time.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use reattention::model::{init_random, load_weights, save_weights};
use reattention::{AttentionMode, Engine, Error, ModelConfig, ModelWeights, SelectionConfig, SpanAlignment};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    InvalidArgument = 3,
    Io = 4,
    Format = 5,
    OutOfRange = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RaAttentionMode {
    Full = 0,
    Window = 1,
    Reattention = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RaSpanAlignment {
    Aligned = 0,
    Centered = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub n_kv_head: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub pretrain_window: usize,
    pub rope_base: f64,
    pub attention_mode: RaAttentionMode,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaSelectionConfig {
    pub k: usize,
    pub k_prime: usize,
    pub span_m: usize,
    pub tile_size: usize,
    pub l_global: usize,
    pub l_local: usize,
    pub l_chunk: usize,
    pub span_alignment: RaSpanAlignment,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaEngineStats {
    pub context_len: usize,
    pub attention_steps: usize,
    /// Largest rotary position used so far; -1 before the first step.
    pub max_position: i64,
    pub max_scope_len: usize,
    pub max_entropy: f64,
    pub partial_coverage_steps: usize,
    pub scratch_peak_bytes: usize,
}

/// Opaque model handle.
pub struct RaModel {
    weights: Arc<ModelWeights>,
}

/// Opaque engine handle; owns its KV caches.
pub struct RaEngine {
    engine: Engine,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> RaStatus {
    match err {
        Error::Config(_) => RaStatus::InvalidConfig,
        Error::Io { .. } => RaStatus::Io,
        Error::Format(_) | Error::Json(_) => RaStatus::Format,
        Error::PositionOutOfRange { .. }
        | Error::ScopeExceedsWindow { .. }
        | Error::SequenceTooLong { .. }
        | Error::TokenOutOfRange { .. } => RaStatus::OutOfRange,
        Error::Shape(_) | Error::EmptyInput | Error::EmptyLogits | Error::EmptyKeySet => RaStatus::InvalidArgument,
        Error::Assertion(_) => RaStatus::Internal,
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (RaStatus, String)>) -> RaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            RaStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RaStatus::Internal
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (RaStatus, String)>;
}

impl<T> IntoFfi<T> for reattention::Result<T> {
    fn ffi(self) -> Result<T, (RaStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (RaStatus, String) {
    (RaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, (RaStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (RaStatus::InvalidArgument, "path is not UTF-8".into()))
}

impl From<AttentionMode> for RaAttentionMode {
    fn from(m: AttentionMode) -> Self {
        match m {
            AttentionMode::Full => RaAttentionMode::Full,
            AttentionMode::Window => RaAttentionMode::Window,
            AttentionMode::Reattention => RaAttentionMode::Reattention,
        }
    }
}

impl From<RaAttentionMode> for AttentionMode {
    fn from(m: RaAttentionMode) -> Self {
        match m {
            RaAttentionMode::Full => AttentionMode::Full,
            RaAttentionMode::Window => AttentionMode::Window,
            RaAttentionMode::Reattention => AttentionMode::Reattention,
        }
    }
}

impl From<&ModelConfig> for RaModelConfig {
    fn from(c: &ModelConfig) -> Self {
        Self {
            n_layer: c.n_layer,
            n_head: c.n_head,
            n_kv_head: c.n_kv_head,
            d_model: c.d_model,
            d_head: c.d_head,
            d_ff: c.d_ff,
            vocab_size: c.vocab_size,
            pretrain_window: c.pretrain_window,
            rope_base: c.rope_base,
            attention_mode: c.attention_mode.into(),
        }
    }
}

impl From<&RaModelConfig> for ModelConfig {
    fn from(c: &RaModelConfig) -> Self {
        Self {
            n_layer: c.n_layer,
            n_head: c.n_head,
            n_kv_head: c.n_kv_head,
            d_model: c.d_model,
            d_head: c.d_head,
            d_ff: c.d_ff,
            vocab_size: c.vocab_size,
            pretrain_window: c.pretrain_window,
            rope_base: c.rope_base,
            attention_mode: c.attention_mode.into(),
        }
    }
}

impl From<&SelectionConfig> for RaSelectionConfig {
    fn from(c: &SelectionConfig) -> Self {
        Self {
            k: c.k,
            k_prime: c.k_prime,
            span_m: c.span_m,
            tile_size: c.tile_size,
            l_global: c.l_global,
            l_local: c.l_local,
            l_chunk: c.l_chunk,
            span_alignment: match c.span_alignment {
                SpanAlignment::Aligned => RaSpanAlignment::Aligned,
                SpanAlignment::Centered => RaSpanAlignment::Centered,
            },
        }
    }
}

impl From<&RaSelectionConfig> for SelectionConfig {
    fn from(c: &RaSelectionConfig) -> Self {
        Self {
            k: c.k,
            k_prime: c.k_prime,
            span_m: c.span_m,
            tile_size: c.tile_size,
            l_global: c.l_global,
            l_local: c.l_local,
            l_chunk: c.l_chunk,
            span_alignment: match c.span_alignment {
                RaSpanAlignment::Aligned => SpanAlignment::Aligned,
                RaSpanAlignment::Centered => SpanAlignment::Centered,
            },
        }
    }
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `capacity`). Returns the full message length in bytes.
#[no_mangle]
pub unsafe extern "C" fn ra_last_error_message(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && capacity > 0 {
            let n = msg.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

#[no_mangle]
pub unsafe extern "C" fn ra_model_config_default(out: *mut RaModelConfig) -> RaStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = (&ModelConfig::default()).into();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ra_selection_config_default(out: *mut RaSelectionConfig) -> RaStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = (&SelectionConfig::default()).into();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ra_model_init_random(
    config: *const RaModelConfig,
    seed: u64,
    out: *mut *mut RaModel,
) -> RaStatus {
    guard(|| {
        let config = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let weights = init_random(&config.into(), seed).ffi()?;
        *out = Box::into_raw(Box::new(RaModel {
            weights: Arc::new(weights),
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ra_model_load(path: *const c_char, out: *mut *mut RaModel) -> RaStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let weights = load_weights(&path).ffi()?;
        *out = Box::into_raw(Box::new(RaModel {
            weights: Arc::new(weights),
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ra_model_save(model: *const RaModel, path: *const c_char) -> RaStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path)?;
        save_weights(&model.weights, &path).ffi()
    })
}

#[no_mangle]
pub unsafe extern "C" fn ra_model_config(model: *const RaModel, out: *mut RaModelConfig) -> RaStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = (&model.weights.config).into();
        Ok(())
    })
}

/// Frees a model. Engines created from it stay valid.
#[no_mangle]
pub unsafe extern "C" fn ra_model_free(model: *mut RaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ra_engine_new(
    model: *const RaModel,
    selection: *const RaSelectionConfig,
    mode: RaAttentionMode,
    out: *mut *mut RaEngine,
) -> RaStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let selection = selection.as_ref().ok_or_else(|| null("selection"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let engine = Engine::with_mode(Arc::clone(&model.weights), selection.into(), mode.into()).ffi()?;
        *out = Box::into_raw(Box::new(RaEngine { engine }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ra_engine_free(engine: *mut RaEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Processes `len` prompt tokens and writes the greedy next token.
#[no_mangle]
pub unsafe extern "C" fn ra_engine_prefill(
    engine: *mut RaEngine,
    tokens: *const u32,
    len: usize,
    next_token: *mut u32,
) -> RaStatus {
    guard(|| {
        let engine = engine.as_mut().ok_or_else(|| null("engine"))?;
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        let next_token = next_token.as_mut().ok_or_else(|| null("next_token"))?;
        let tokens = std::slice::from_raw_parts(tokens, len);
        engine.engine.prefill(tokens).ffi()?;
        *next_token = engine.engine.next_token().expect("prefill produced logits");
        Ok(())
    })
}

/// Feeds `last_token` and writes the greedy next token.
#[no_mangle]
pub unsafe extern "C" fn ra_engine_decode(engine: *mut RaEngine, last_token: u32, next_token: *mut u32) -> RaStatus {
    guard(|| {
        let engine = engine.as_mut().ok_or_else(|| null("engine"))?;
        let next_token = next_token.as_mut().ok_or_else(|| null("next_token"))?;
        *next_token = engine.engine.decode_step(last_token).ffi()?;
        Ok(())
    })
}

/// Copies up to `capacity` logits of the most recent position into `out`;
/// `written` receives the vocabulary size.
#[no_mangle]
pub unsafe extern "C" fn ra_engine_last_logits(
    engine: *const RaEngine,
    out: *mut f32,
    capacity: usize,
    written: *mut usize,
) -> RaStatus {
    guard(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        let written = written.as_mut().ok_or_else(|| null("written"))?;
        let logits = engine
            .engine
            .last_logits()
            .ok_or((RaStatus::InvalidArgument, "no logits yet".to_string()))?;
        *written = logits.len();
        if !out.is_null() {
            let n = logits.len().min(capacity);
            std::ptr::copy_nonoverlapping(logits.as_ptr(), out, n);
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ra_engine_stats(engine: *const RaEngine, out: *mut RaEngineStats) -> RaStatus {
    guard(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s = engine.engine.stats();
        *out = RaEngineStats {
            context_len: engine.engine.context_len(),
            attention_steps: s.attention_steps,
            max_position: s.max_position.map_or(-1, |p| p as i64),
            max_scope_len: s.max_scope_len,
            max_entropy: s.max_entropy,
            partial_coverage_steps: s.partial_coverage_steps,
            scratch_peak_bytes: engine.engine.scratch_peak(),
        };
        Ok(())
    })
}

/// Writes the engine's KV caches as an RKVC snapshot.
#[no_mangle]
pub unsafe extern "C" fn ra_engine_dump_cache(engine: *const RaEngine, path: *const c_char) -> RaStatus {
    guard(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        let path = path_arg(path)?;
        reattention::kv_cache::write_snapshot(&path, engine.engine.caches()).ffi()
    })
}
