#ifndef REATTENTION_H
#define REATTENTION_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RaAttentionMode {
  RA_ATTENTION_MODE_FULL = 0,
  RA_ATTENTION_MODE_WINDOW = 1,
  RA_ATTENTION_MODE_REATTENTION = 2,
} RaAttentionMode;

typedef enum RaSpanAlignment {
  RA_SPAN_ALIGNMENT_ALIGNED = 0,
  RA_SPAN_ALIGNMENT_CENTERED = 1,
} RaSpanAlignment;

typedef enum RaStatus {
  RA_STATUS_OK = 0,
  RA_STATUS_NULL_POINTER = 1,
  RA_STATUS_INVALID_CONFIG = 2,
  RA_STATUS_INVALID_ARGUMENT = 3,
  RA_STATUS_IO = 4,
  RA_STATUS_FORMAT = 5,
  RA_STATUS_OUT_OF_RANGE = 6,
  RA_STATUS_INTERNAL = 7,
} RaStatus;

/**
 * Opaque engine handle; owns its KV caches.
 */
typedef struct RaEngine RaEngine;

/**
 * Opaque model handle.
 */
typedef struct RaModel RaModel;

typedef struct RaModelConfig {
  size_t n_layer;
  size_t n_head;
  size_t n_kv_head;
  size_t d_model;
  size_t d_head;
  size_t d_ff;
  size_t vocab_size;
  size_t pretrain_window;
  double rope_base;
  enum RaAttentionMode attention_mode;
} RaModelConfig;

typedef struct RaSelectionConfig {
  size_t k;
  size_t k_prime;
  size_t span_m;
  size_t tile_size;
  size_t l_global;
  size_t l_local;
  size_t l_chunk;
  enum RaSpanAlignment span_alignment;
} RaSelectionConfig;

typedef struct RaEngineStats {
  size_t context_len;
  size_t attention_steps;
  /**
   * Largest rotary position used so far; -1 before the first step.
   */
  int64_t max_position;
  size_t max_scope_len;
  double max_entropy;
  size_t partial_coverage_steps;
  size_t scratch_peak_bytes;
} RaEngineStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `capacity`). Returns the full message length in bytes.
 */
size_t ra_last_error_message(char *buf, size_t capacity);

enum RaStatus ra_model_config_default(struct RaModelConfig *out);

enum RaStatus ra_selection_config_default(struct RaSelectionConfig *out);

enum RaStatus ra_model_init_random(const struct RaModelConfig *config,
                                   uint64_t seed,
                                   struct RaModel **out);

enum RaStatus ra_model_load(const char *path, struct RaModel **out);

enum RaStatus ra_model_save(const struct RaModel *model, const char *path);

enum RaStatus ra_model_config(const struct RaModel *model, struct RaModelConfig *out);

/**
 * Frees a model. Engines created from it stay valid.
 */
void ra_model_free(struct RaModel *model);

enum RaStatus ra_engine_new(const struct RaModel *model,
                            const struct RaSelectionConfig *selection,
                            enum RaAttentionMode mode,
                            struct RaEngine **out);

void ra_engine_free(struct RaEngine *engine);

/**
 * Processes `len` prompt tokens and writes the greedy next token.
 */
enum RaStatus ra_engine_prefill(struct RaEngine *engine,
                                const uint32_t *tokens,
                                size_t len,
                                uint32_t *next_token);

/**
 * Feeds `last_token` and writes the greedy next token.
 */
enum RaStatus ra_engine_decode(struct RaEngine *engine, uint32_t last_token, uint32_t *next_token);

/**
 * Copies up to `capacity` logits of the most recent position into `out`;
 * `written` receives the vocabulary size.
 */
enum RaStatus ra_engine_last_logits(const struct RaEngine *engine,
                                    float *out,
                                    size_t capacity,
                                    size_t *written);

enum RaStatus ra_engine_stats(const struct RaEngine *engine, struct RaEngineStats *out);

/**
 * Writes the engine's KV caches as an RKVC snapshot.
 */
enum RaStatus ra_engine_dump_cache(const struct RaEngine *engine, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REATTENTION_H */
