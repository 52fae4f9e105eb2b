#ifndef PRISM_H
#define PRISM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define PRISM_FORMAT_FP16 0

#define PRISM_FORMAT_BF16 1

#define PRISM_FORMAT_FP8_E4M3 2

#define PRISM_FORMAT_FP8_E5M2 3

#define PRISM_BIT_FLIP 0

#define PRISM_BIT_STUCK0 1

#define PRISM_BIT_STUCK1 2

typedef enum PrismStatus {
  PRISM_STATUS_OK = 0,
  PRISM_STATUS_NULL_ARGUMENT = 1,
  PRISM_STATUS_INVALID_ARGUMENT = 2,
  PRISM_STATUS_CONFIG = 3,
  PRISM_STATUS_CONTRACT = 4,
  PRISM_STATUS_PARSE = 5,
  PRISM_STATUS_VALIDATION = 6,
  PRISM_STATUS_IO = 7,
  PRISM_STATUS_BASELINE = 8,
  PRISM_STATUS_PANIC = 9,
} PrismStatus;

typedef enum PrismPatternClass {
  PRISM_PATTERN_CLASS_ZERO = 0,
  PRISM_PATTERN_CLASS_SUBNORMAL = 1,
  PRISM_PATTERN_CLASS_NORMAL = 2,
  PRISM_PATTERN_CLASS_INFINITY = 3,
  PRISM_PATTERN_CLASS_NAN = 4,
} PrismPatternClass;

typedef enum PrismOutcome {
  PRISM_OUTCOME_UNCHANGED = 0,
  PRISM_OUTCOME_CHANGED = 1,
  PRISM_OUTCOME_CRASHED = 2,
} PrismOutcome;

typedef enum PrismMode {
  PRISM_MODE_BENIGN = 0,
  PRISM_MODE_SPIKE_RECOVER = 1,
  PRISM_MODE_SPIKE_DEGRADE = 2,
  PRISM_MODE_SILENT_DEGRADATION = 3,
  PRISM_MODE_GRADUAL_DRIFT = 4,
  PRISM_MODE_CRASHED = 5,
} PrismMode;

/**
 * A parsed campaign configuration.
 */
typedef struct PrismConfig PrismConfig;

/**
 * The record of one finished run.
 */
typedef struct PrismRun PrismRun;

/**
 * A pool of error signatures.
 */
typedef struct PrismSignatureSet PrismSignatureSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *prism_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *prism_version(void);

/**
 * Frees a string returned by this library. NULL is ignored.
 */
void prism_string_free(char *s);

/**
 * Rounds `value` to the nearest-even pattern of `fmt`, saturating finite
 * overflow to the largest finite value.
 */
enum PrismStatus prism_encode(double value, uint32_t fmt, uint32_t *out_bits);

enum PrismStatus prism_decode(uint32_t bits, uint32_t fmt, double *out_value);

enum PrismStatus prism_round_trip(double value, uint32_t fmt, double *out_value);

enum PrismStatus prism_classify_pattern(uint32_t bits,
                                        uint32_t fmt,
                                        enum PrismPatternClass *out_class);

/**
 * Applies one bit operation (`PRISM_BIT_*`) at position `bit` (0 = LSB).
 */
enum PrismStatus prism_apply_bit_op(uint32_t bits,
                                    uint32_t fmt,
                                    uint32_t bit,
                                    uint32_t mode,
                                    uint32_t *out_bits);

/**
 * Outcome of a run given its final PPL (`has_final_ppl == 0` when absent).
 */
enum PrismStatus prism_classify_outcome(double final_ppl,
                                        int32_t has_final_ppl,
                                        double baseline_ppl,
                                        enum PrismOutcome *out_outcome);

/**
 * `outcome` is a `PrismOutcome` value.
 */
enum PrismStatus prism_classify_mode(uint32_t outcome,
                                     size_t nan_events,
                                     double final_divergence,
                                     int32_t has_divergence,
                                     double baseline_weight_norm,
                                     enum PrismMode *out_mode);

/**
 * Loads a JSONL signature file.
 */
enum PrismStatus prism_signatures_load(const char *path, struct PrismSignatureSet **out_set);

/**
 * Synthesizes signatures for a comma-separated archetype list.
 */
enum PrismStatus prism_signatures_synth(const char *archetypes,
                                        uint64_t seed,
                                        struct PrismSignatureSet **out_set);

enum PrismStatus prism_signatures_len(const struct PrismSignatureSet *set, size_t *out_len);

enum PrismStatus prism_signatures_save(const struct PrismSignatureSet *set, const char *path);

void prism_signatures_free(struct PrismSignatureSet *set);

/**
 * Loads a TOML campaign file.
 */
enum PrismStatus prism_config_load(const char *path, struct PrismConfig **out_cfg);

/**
 * Parses campaign TOML from a string.
 */
enum PrismStatus prism_config_parse(const char *toml, struct PrismConfig **out_cfg);

void prism_config_free(struct PrismConfig *cfg);

/**
 * Trains (or reloads) the fault-free baseline for `format` (NULL: the
 * first configured format) and reports its validation PPL.
 */
enum PrismStatus prism_baseline(const struct PrismConfig *cfg,
                                const char *format,
                                uint64_t seed,
                                const char *out_dir,
                                double *out_ppl);

/**
 * Executes one fault run. `format` may be NULL (first configured format);
 * `rate <= 0` keeps the configured rate; `sigs` may be NULL to use the
 * configuration's signature source. The baseline is trained if missing.
 */
enum PrismStatus prism_run_execute(const struct PrismConfig *cfg,
                                   const struct PrismSignatureSet *sigs,
                                   const char *format,
                                   uint64_t seed,
                                   double rate,
                                   const char *out_dir,
                                   struct PrismRun **out_run);

enum PrismStatus prism_run_outcome(const struct PrismRun *run, enum PrismOutcome *out_outcome);

enum PrismStatus prism_run_mode(const struct PrismRun *run, enum PrismMode *out_mode);

/**
 * Final validation PPL; `*out_has` is 0 when the run produced none.
 */
enum PrismStatus prism_run_final_ppl(const struct PrismRun *run, double *out_ppl, int32_t *out_has);

enum PrismStatus prism_run_activations(const struct PrismRun *run, size_t *out_count);

/**
 * The run record as JSON; release with [`prism_string_free`].
 */
enum PrismStatus prism_run_to_json(const struct PrismRun *run, char **out_json);

void prism_run_free(struct PrismRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRISM_H */
