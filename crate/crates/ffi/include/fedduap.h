#ifndef FEDDUAP_H
#define FEDDUAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum FdStatus {
  FD_STATUS_OK = 0,
  FD_STATUS_NULL_POINTER = 1,
  FD_STATUS_INVALID_ARGUMENT = 2,
  FD_STATUS_SHAPE = 3,
  FD_STATUS_NUMERIC = 4,
  FD_STATUS_CONFIG = 5,
  FD_STATUS_IO = 6,
  FD_STATUS_PARSE = 7,
  FD_STATUS_PARTITION = 8,
  FD_STATUS_HESSIAN_CAP = 9,
  FD_STATUS_EMPTY = 10,
  FD_STATUS_PANIC = 99,
} FdStatus;

/*
 Opaque experiment configuration handle.
 */
typedef struct FdConfig FdConfig;

/*
 Opaque model handle.
 */
typedef struct FdModel FdModel;

/*
 Inputs of the server step-size rule, mirrored for C.
 */
typedef struct FdStepInputs {
  double accuracy;
  double div_selected;
  double div_server;
  size_t n_server;
  size_t n_selected;
  double server_scale;
  double decay;
  size_t round;
  size_t tau;
} FdStepInputs;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer
 stays valid until the next library call on the same thread.
 */
const char *fd_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *fd_version(void);

/*
 Releases a string returned by this library. NULL is ignored.

 # Safety
 `s` must come from this library and must not be freed twice.
 */
void fd_string_free(char *s);

/*
 Parses a model document.

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum FdStatus fd_model_from_json(const char *json, struct FdModel **out);

/*
 Loads a model document from a file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FdStatus fd_model_load(const char *path, struct FdModel **out);

/*
 Serializes a model; release the result with [`fd_string_free`].

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum FdStatus fd_model_to_json(const struct FdModel *model, char **out);

/*
 Releases a model handle. NULL is ignored.

 # Safety
 `model` must come from this library and must not be freed twice.
 */
void fd_model_free(struct FdModel *model);

/*
 Number of trainable parameters.

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum FdStatus fd_model_param_count(const struct FdModel *model, size_t *out);

/*
 Flattened input length (`C * H * W`).

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum FdStatus fd_model_input_len(const struct FdModel *model, size_t *out);

/*
 Number of logits.

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum FdStatus fd_model_output_len(const struct FdModel *model, size_t *out);

/*
 Forward cost of one sample in millions of FLOPs.

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum FdStatus fd_model_mflops(const struct FdModel *model, double *out);

/*
 Logits for one sample. Lengths must match the model exactly.

 # Safety
 `input` must hold `input_len` doubles and `logits` must have room for
 `logits_len` doubles.
 */
enum FdStatus fd_model_predict(const struct FdModel *model,
                               const double *input,
                               size_t input_len,
                               double *logits,
                               size_t logits_len);

/*
 `KL(p || q)` in nats; `+inf` when `q` misses support of `p`.

 # Safety
 `p` and `q` must each hold `len` doubles; `out` must be writable.
 */
enum FdStatus fd_kl_divergence(const double *p, const double *q, size_t len, double *out);

/*
 Jensen-Shannon non-IID degree of `p_k` against `p_bar`, in `[0, ln 2]`.

 # Safety
 `p_k` and `p_bar` must each hold `len` doubles; `out` must be writable.
 */
enum FdStatus fd_noniid_degree(const double *p_k, const double *p_bar, size_t len, double *out);

/*
 Effective server step count with the default `1 - acc` scale.

 # Safety
 `inputs` must point to a valid struct; `out` must be writable.
 */
enum FdStatus fd_effective_step(const struct FdStepInputs *inputs, double *out);

/*
 Divergence-weighted merge of per-party pruning rates.

 # Safety
 `rates`, `n` and `divergences` must each hold `len` elements; `out`
 must be writable.
 */
enum FdStatus fd_aggregate_rate(const double *rates,
                                const size_t *n,
                                const double *divergences,
                                size_t len,
                                double epsilon,
                                double *out);

/*
 Magnitude threshold below which a `p_star` share of values falls.

 # Safety
 `values` must hold `len` doubles; `out` must be writable.
 */
enum FdStatus fd_global_threshold(const double *values, size_t len, double p_star, double *out);

/*
 Parses and validates a TOML experiment configuration.

 # Safety
 `text` must be a NUL-terminated string; `out` must be writable.
 */
enum FdStatus fd_config_parse(const char *text, struct FdConfig **out);

/*
 Loads and validates a TOML experiment configuration file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FdStatus fd_config_load(const char *path, struct FdConfig **out);

/*
 Overrides the experiment seed.

 # Safety
 `config` must be a live handle.
 */
enum FdStatus fd_config_set_seed(struct FdConfig *config, uint64_t seed);

/*
 Effective configuration with defaults filled in, as TOML.

 # Safety
 `config` must be a live handle; `out` must be writable.
 */
enum FdStatus fd_config_to_toml(const struct FdConfig *config, char **out);

/*
 Releases a configuration handle. NULL is ignored.

 # Safety
 `config` must come from this library and must not be freed twice.
 */
void fd_config_free(struct FdConfig *config);

/*
 Runs a full experiment and returns its summary as JSON. `out_dir` may be
 NULL to skip writing artifacts; `workers == 0` uses every core.

 # Safety
 `config` must be a live handle; `out_dir` is NULL or a NUL-terminated
 string; `summary_json` must be writable.
 */
enum FdStatus fd_run_experiment(const struct FdConfig *config,
                                const char *out_dir,
                                size_t workers,
                                char **summary_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDDUAP_H */
