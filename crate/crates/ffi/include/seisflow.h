#ifndef SEISFLOW_H
#define SEISFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum SfStatus {
  SF_STATUS_OK = 0,
  SF_STATUS_NULL_POINTER = 1,
  SF_STATUS_INVALID_UTF8 = 2,
  SF_STATUS_INVALID_ARGUMENT = 3,
  SF_STATUS_GRAPH = 4,
  SF_STATUS_ENACTMENT = 5,
  SF_STATUS_PROVENANCE = 6,
  SF_STATUS_SEISMO = 7,
  SF_STATUS_IO = 8,
  SF_STATUS_BUFFER_TOO_SMALL = 9,
  SF_STATUS_OTHER = 10,
  SF_STATUS_PANIC = 11,
} SfStatus;

typedef enum SfBackend {
  SF_BACKEND_SEQUENTIAL = 0,
  SF_BACKEND_THREADED = 1,
  SF_BACKEND_MULTIPROCESS = 2,
} SfBackend;

typedef enum SfRunStatus {
  SF_RUN_STATUS_PENDING = 0,
  SF_RUN_STATUS_RUNNING = 1,
  SF_RUN_STATUS_COMPLETED = 2,
  SF_RUN_STATUS_FAILED = 3,
  SF_RUN_STATUS_CANCELLED = 4,
} SfRunStatus;

typedef enum SfMisfitKind {
  SF_MISFIT_KIND_L2 = 0,
  /**
   * Lag in seconds that maximises the normalised cross-correlation.
   */
  SF_MISFIT_KIND_CC_SHIFT = 1,
} SfMisfitKind;

/**
 * An enactor with its provenance store.
 */
typedef struct SfEngine SfEngine;

/**
 * A resolved workflow graph.
 */
typedef struct SfGraph SfGraph;

/**
 * A finished run: its record and the units that reached graph outputs.
 */
typedef struct SfRun SfRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static string.
 */
const char *sf_version(void);

/**
 * Message of the last failure on this thread, or null.
 */
const char *sf_last_error_message(void);

/**
 * Engine error code of the last failure on this thread (for example
 * `DanglingPort` or `DtMismatch`), or null.
 */
const char *sf_last_error_code(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void sf_string_free(char *s);

/**
 * An engine with in-memory provenance.
 *
 * # Safety
 * `out` must be valid for a write.
 */
enum SfStatus sf_engine_new(struct SfEngine **out);

/**
 * An engine persisting provenance, blobs and run events under `data_dir`.
 *
 * # Safety
 * `data_dir` must be a nul-terminated string and `out` valid for a write.
 */
enum SfStatus sf_engine_open(const char *data_dir, struct SfEngine **out);

/**
 * The `seisflow` executable used as the multiprocess worker. Without it the
 * `SEISFLOW_WORKER_EXE` environment variable is consulted.
 *
 * # Safety
 * `engine` must come from `sf_engine_new` or `sf_engine_open`; `path` must
 * be a nul-terminated string.
 */
enum SfStatus sf_engine_set_worker_exe(struct SfEngine *engine, const char *path);

/**
 * # Safety
 * `engine` must be null or an engine not yet freed.
 */
void sf_engine_free(struct SfEngine *engine);

/**
 * Parse a graph document and resolve its `builtin:` components.
 *
 * # Safety
 * `json` must be a nul-terminated string and `out` valid for a write.
 */
enum SfStatus sf_graph_parse(const char *json, struct SfGraph **out);

/**
 * Every validation issue of a graph document as a JSON report
 * (`{"ok": .., "issues": [..]}`). An invalid graph still returns `Ok`.
 *
 * # Safety
 * `json` must be a nul-terminated string and `report` valid for a write.
 */
enum SfStatus sf_graph_validate(const char *json, char **report);

/**
 * # Safety
 * `graph` must be a live graph and `count` valid for a write.
 */
enum SfStatus sf_graph_node_count(const struct SfGraph *graph, uintptr_t *count);

/**
 * # Safety
 * `graph` must be null or a graph not yet freed.
 */
void sf_graph_free(struct SfGraph *graph);

/**
 * Run `graph` to completion. `feeds_json` maps feed names to unit lists
 * and may be null for no input. A run that ends failed or cancelled is
 * still returned; inspect it with `sf_run_status`.
 *
 * # Safety
 * `engine` and `graph` must be live handles, `feeds_json` null or a
 * nul-terminated string, and `out` valid for a write.
 */
enum SfStatus sf_engine_run(const struct SfEngine *engine,
                            const struct SfGraph *graph,
                            enum SfBackend backend,
                            uint32_t workers,
                            const char *feeds_json,
                            struct SfRun **out);

/**
 * # Safety
 * `run` must be a live run and `status` valid for a write.
 */
enum SfStatus sf_run_status(const struct SfRun *run, enum SfRunStatus *status);

/**
 * The run id, owned by the run handle. Null if `run` is null.
 *
 * # Safety
 * `run` must be null or a live run.
 */
const char *sf_run_id(const struct SfRun *run);

/**
 * Output units keyed by `<node>.<port>`, as JSON.
 *
 * # Safety
 * `run` must be a live run and `json` valid for a write.
 */
enum SfStatus sf_run_outputs_json(const struct SfRun *run, char **json);

/**
 * The full run record (status, timings, error log) as JSON.
 *
 * # Safety
 * `run` must be a live run and `json` valid for a write.
 */
enum SfStatus sf_run_record_json(const struct SfRun *run, char **json);

/**
 * # Safety
 * `run` must be null or a run not yet freed.
 */
void sf_run_free(struct SfRun *run);

/**
 * The PROV-JSON document of one run, in the same canonical form the
 * gateway and the CLI emit.
 *
 * # Safety
 * `engine` must be live, `run_id` a nul-terminated string and `json` valid
 * for a write.
 */
enum SfStatus sf_engine_export_run(const struct SfEngine *engine, const char *run_id, char **json);

/**
 * Direct-sum cross-correlation of two traces sampled at `dt`:
 * `out[max_lag + l] = sum_t a[t] * b[t + l]` for `l` in `[-max_lag, max_lag]`.
 * `out_len` must be at least `2 * max_lag + 1`.
 *
 * # Safety
 * `a` and `b` must point to `na` and `nb` doubles, `out` to `out_len`.
 */
enum SfStatus sf_xcorr(const double *a,
                       uintptr_t na,
                       const double *b,
                       uintptr_t nb,
                       double dt,
                       uintptr_t max_lag,
                       double *out,
                       uintptr_t out_len);

/**
 * Misfit between an observed and a synthetic trace of `n` samples at `dt`.
 *
 * # Safety
 * `obs` and `syn` must point to `n` doubles and `value` be valid for a write.
 */
enum SfStatus sf_misfit(const double *obs,
                        const double *syn,
                        uintptr_t n,
                        double dt,
                        enum SfMisfitKind kind,
                        double *value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEISFLOW_H */
