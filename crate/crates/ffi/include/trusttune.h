#ifndef TRUSTTUNE_H
#define TRUSTTUNE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes. `2` and `3` match the CLI exit codes for configuration and
 invariant failures.
 */
typedef enum TtStatus {
  TT_STATUS_OK = 0,
  TT_STATUS_FAILED = 1,
  TT_STATUS_CONFIG = 2,
  TT_STATUS_INVARIANT = 3,
  TT_STATUS_NULL_POINTER = 4,
  TT_STATUS_INVALID_UTF8 = 5,
  TT_STATUS_BUFFER_TOO_SMALL = 6,
  TT_STATUS_IO = 7,
  TT_STATUS_CHECKPOINT = 8,
  TT_STATUS_INVALID_INPUT = 9,
  TT_STATUS_PANIC = 10,
} TtStatus;

/*
 Parsed experiment configuration.
 */
typedef struct TtConfig TtConfig;

/*
 Frozen encoder loaded from a checkpoint.
 */
typedef struct TtEncoder TtEncoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the calling thread's last error message (empty after a success).

 # Safety
 `buf` must point to `len` writable bytes.
 */
enum TtStatus tt_last_error_message(char *buf, size_t len);

/*
 Default configuration.

 # Safety
 `out` must be a valid pointer to a handle slot.
 */
enum TtStatus tt_config_default(struct TtConfig **out);

/*
 Parses a TOML document over the defaults; unknown keys are rejected with
 `TT_STATUS_CONFIG`.

 # Safety
 `toml` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum TtStatus tt_config_from_toml(const char *toml, struct TtConfig **out);

/*
 Writes the 64-character config hash plus NUL.

 # Safety
 `config` must come from this library; `buf` must hold `len` bytes.
 */
enum TtStatus tt_config_hash(const struct TtConfig *config, char *buf, size_t len);

/*
 Overrides `run.seeds`.

 # Safety
 `seeds` must point to `count` values.
 */
enum TtStatus tt_config_set_seeds(struct TtConfig *config, const uint64_t *seeds, size_t count);

/*
 # Safety
 `config` must come from this library (or be null) and not be used after.
 */
void tt_config_free(struct TtConfig *config);

/*
 Loads an encoder checkpoint written by `pretrain`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum TtStatus tt_encoder_load(const char *path, struct TtEncoder **out);

/*
 Hidden size of the encoder, i.e. the length `tt_encoder_encode` writes.

 # Safety
 `encoder` must come from this library.
 */
enum TtStatus tt_encoder_dim(const struct TtEncoder *encoder, size_t *out);

/*
 Pooled representation of one token sequence.

 # Safety
 `tokens` must hold `n_tokens` ids and `out` room for `out_len` doubles.
 */
enum TtStatus tt_encoder_encode(const struct TtEncoder *encoder,
                                const uint32_t *tokens,
                                size_t n_tokens,
                                double *out,
                                size_t out_len);

/*
 Content fingerprint of the encoder parameters (64 hex chars plus NUL).

 # Safety
 `encoder` must come from this library; `buf` must hold `len` bytes.
 */
enum TtStatus tt_encoder_fingerprint(const struct TtEncoder *encoder, char *buf, size_t len);

/*
 # Safety
 `encoder` must come from this library (or be null) and not be used after.
 */
void tt_encoder_free(struct TtEncoder *encoder);

/*
 Runs a CLI command (`pretrain`, `finetune`, `stability`, `chain`, `cycle`,
 `probe-matrix`, `theory`) into `out_dir`. Commands that need a pretrained
 encoder read it from `encoder`, or from `run.checkpoint` when `encoder`
 is null. A command whose runs all failed returns `TT_STATUS_FAILED`.

 # Safety
 Pointers must be valid; strings NUL-terminated.
 */
enum TtStatus tt_run(const struct TtConfig *config,
                     const char *command,
                     const struct TtEncoder *encoder,
                     const char *out_dir);

/*
 Symmetric KL divergence between two categorical distributions of length
 `n`.

 # Safety
 `p` and `q` must hold `n` doubles; `out` must be writable.
 */
enum TtStatus tt_symmetric_kl(const double *p, const double *q, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRUSTTUNE_H */
