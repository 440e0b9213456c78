#ifndef HALOBIT_H
#define HALOBIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum HbStatus {
  HB_STATUS_OK = 0,
  HB_STATUS_NULL_POINTER = 1,
  HB_STATUS_INVALID_ARGUMENT = 2,
  HB_STATUS_CONFIG = 3,
  HB_STATUS_LOAD = 4,
  HB_STATUS_SHAPE = 5,
  HB_STATUS_CODEC = 6,
  HB_STATUS_PROTOCOL = 7,
  HB_STATUS_NUMERIC = 8,
  HB_STATUS_IO = 9,
  HB_STATUS_PANIC = 10,
} HbStatus;

typedef enum HbStrategy {
  HB_STRATEGY_CONTIGUOUS = 0,
  HB_STRATEGY_BFS = 1,
  HB_STRATEGY_HASH = 2,
} HbStrategy;

typedef enum HbModel {
  HB_MODEL_GCN = 0,
  HB_MODEL_SAGE = 1,
} HbModel;

typedef enum HbMode {
  HB_MODE_SYNC = 0,
  HB_MODE_ASYNC = 1,
} HbMode;

// Opaque quantized block handle.
typedef struct HbBlock HbBlock;

// Opaque graph handle.
typedef struct HbGraph HbGraph;

// Opaque handle to a finished training run.
typedef struct HbRun HbRun;

typedef struct HbGraphInfo {
  uintptr_t num_nodes;
  // Directed edges, so each undirected edge counts twice.
  uintptr_t num_edges;
  uintptr_t feature_dim;
  uintptr_t num_classes;
} HbGraphInfo;

typedef struct HbBlockInfo {
  uintptr_t rows;
  uintptr_t dim;
  uint8_t bits;
  // Packed code bytes (main data).
  uintptr_t payload_bytes;
  // Per-row min and scale.
  uintptr_t metadata_bytes;
  // Full serialized size including the 12-byte header.
  uintptr_t wire_bytes;
} HbBlockInfo;

typedef struct HbRunConfig {
  uintptr_t parts;
  enum HbStrategy strategy;
  enum HbModel model;
  uintptr_t layers;
  uintptr_t hidden;
  uint8_t bits;
  enum HbMode mode;
  uintptr_t staleness;
  uintptr_t epochs;
  double lr;
  double dropout;
  uint64_t seed;
  uintptr_t warmup;
  bool degree_with_self_loops;
} HbRunConfig;

typedef struct HbEpochMetrics {
  uintptr_t epoch;
  // True when the epoch ran pipelined rather than synchronously.
  bool pipelined;
  double train_loss;
  double train_acc;
  double val_acc;
  double test_acc;
  uint64_t main_bytes;
  uint64_t meta_bytes;
  uint64_t header_bytes;
  uint64_t allreduce_bytes;
  uint64_t messages;
} HbEpochMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Owned by the
// library; valid until the next failing call on this thread.
const char *hb_last_error(void);

// Library version as a static NUL-terminated string.
const char *hb_version(void);

// # Safety
// `s` must come from this library and not have been freed.
void hb_string_free(char *s);

// Generates a stochastic block model graph from a spec such as
// `"sbm:k=4,n=125,p_in=0.15,p_out=0.01,d=32,noise=1,seed=0"`.
//
// # Safety
// `spec` must be a NUL-terminated string; `out` must be writable.
enum HbStatus hb_graph_sbm(const char *spec, struct HbGraph **out);

// Loads a dataset directory.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum HbStatus hb_graph_load(const char *path, struct HbGraph **out);

// # Safety
// `g` must come from this library and not have been freed.
void hb_graph_free(struct HbGraph *g);

// # Safety
// `g` must be a live graph handle and `out` writable.
enum HbStatus hb_graph_info(const struct HbGraph *g, struct HbGraphInfo *out);

// Quantizes a row-major `rows x dim` matrix with stochastic rounding drawn
// from the stream keyed by `seed`.
//
// # Safety
// `data` must point to `rows * dim` readable doubles; `out` must be
// writable.
enum HbStatus hb_block_quantize(const double *data,
                                uintptr_t rows,
                                uintptr_t dim,
                                uint8_t bits,
                                uint64_t seed,
                                struct HbBlock **out);

// Parses a block from its wire bytes.
//
// # Safety
// `bytes` must point to `len` readable bytes; `out` must be writable.
enum HbStatus hb_block_from_wire(const uint8_t *bytes, uintptr_t len, struct HbBlock **out);

// # Safety
// `b` must come from this library and not have been freed.
void hb_block_free(struct HbBlock *b);

// # Safety
// `b` must be a live block handle and `out` writable.
enum HbStatus hb_block_info(const struct HbBlock *b, struct HbBlockInfo *out);

// Writes the wire bytes into `buf`. `written` receives the wire length even
// when `cap` is too small, in which case nothing is written and
// `InvalidArgument` is returned.
//
// # Safety
// `buf` must point to `cap` writable bytes (may be NULL when `cap` is 0);
// `written` must be writable.
enum HbStatus hb_block_to_wire(const struct HbBlock *b,
                               uint8_t *buf,
                               uintptr_t cap,
                               uintptr_t *written);

// Dequantizes into a row-major buffer of `rows * dim` doubles.
//
// # Safety
// `out` must point to `cap` writable doubles.
enum HbStatus hb_block_dequantize(const struct HbBlock *b, double *out, uintptr_t cap);

// Fills `cfg` with the defaults used by the command-line tool.
//
// # Safety
// `cfg` must be writable.
enum HbStatus hb_run_config_default(struct HbRunConfig *cfg);

// Trains on `graph` and returns the finished run.
//
// # Safety
// `graph` must be a live graph handle, `cfg` readable and `out` writable.
enum HbStatus hb_run(const struct HbGraph *graph,
                     const struct HbRunConfig *cfg,
                     struct HbRun **out);

// # Safety
// `r` must come from this library and not have been freed.
void hb_run_free(struct HbRun *r);

// Number of recorded epochs.
//
// # Safety
// `r` must be a live run handle or NULL (returns 0).
uintptr_t hb_run_num_epochs(const struct HbRun *r);

// Metrics of the `index`-th epoch (0-based).
//
// # Safety
// `r` must be a live run handle and `out` writable.
enum HbStatus hb_run_epoch(const struct HbRun *r, uintptr_t index, struct HbEpochMetrics *out);

// The run's `summary.json` document; free with [`hb_string_free`].
//
// # Safety
// `r` must be a live run handle and `out` writable.
enum HbStatus hb_run_summary_json(const struct HbRun *r, char **out);

// The run's `metrics.csv` contents (wall time column zero); free with
// [`hb_string_free`].
//
// # Safety
// `r` must be a live run handle and `out` writable.
enum HbStatus hb_run_metrics_csv(const struct HbRun *r, char **out);

// Writes the final weights of layer `layer` (1-based) row-major into `buf`.
// `shape` receives `[rows, cols]` even when `cap` is too small.
//
// # Safety
// `buf` must point to `cap` writable doubles; `shape` must point to two
// writable `size_t`.
enum HbStatus hb_run_weights(const struct HbRun *r,
                             uintptr_t layer,
                             double *buf,
                             uintptr_t cap,
                             uintptr_t *shape);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HALOBIT_H */
