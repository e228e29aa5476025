#ifndef LOCALPAR_H
#define LOCALPAR_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum LpStatus {
  LP_STATUS_OK = 0,
  LP_STATUS_NULL_POINTER = 1,
  LP_STATUS_INVALID_ARGUMENT = 2,
  LP_STATUS_RUNTIME = 3,
  LP_STATUS_PANIC = 4,
} LpStatus;

typedef enum LpMethod {
  LP_METHOD_BACKPROP = 0,
  LP_METHOD_GREEDY = 1,
  LP_METHOD_OVERLAPPING = 2,
  // Uses the `k` argument as the number of blocks.
  LP_METHOD_CHUNKED = 3,
  // Uses the `k` argument as the number of trained layers.
  LP_METHOD_LAST_K = 4,
} LpMethod;

typedef enum LpPipelineMode {
  LP_PIPELINE_MODE_PIPELINED_BACKPROP = 0,
  LP_PIPELINE_MODE_CHUNKED_LOCAL = 1,
} LpPipelineMode;

// Opaque pipeline configuration.
typedef struct LpPipeline LpPipeline;

// Opaque simulation result.
typedef struct LpSimReport LpSimReport;

typedef struct LpCostConstants {
  uint64_t layers;
  double forward_cost;
  double aux_cost;
  double backward_multiplier;
  // Ignored unless `has_parameters` is true.
  uint64_t parameters;
  bool has_parameters;
} LpCostConstants;

typedef struct LpMethodCost {
  double cost_per_example;
  double cost;
  double time;
  double parallelism;
} LpMethodCost;

typedef struct LpCommunicationTotals {
  double local_total;
  double backprop_total;
} LpCommunicationTotals;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *lp_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *lp_version(void);

// Published constants of a named model (`mlp4096`, `resnet18`, ...).
//
// # Safety
// `model` must be a NUL-terminated string and `out` a writable pointer.
enum LpStatus lp_registry(const char *model, struct LpCostConstants *out);

// Constants of a dense ReLU network with `layers` hidden layers of width
// `hidden`.
//
// # Safety
// `out` must be a writable pointer.
enum LpStatus lp_mlp_constants(uint64_t hidden,
                               uint64_t layers,
                               uint64_t input,
                               uint64_t classes,
                               struct LpCostConstants *out);

// Total FLOPs and sequential FLOPs of `steps` updates at `batch`.
//
// # Safety
// `constants` must point to a valid struct and `out` must be writable.
enum LpStatus lp_method_cost(const struct LpCostConstants *constants,
                             enum LpMethod method,
                             uint64_t k,
                             uint64_t batch,
                             uint64_t steps,
                             struct LpMethodCost *out);

// Writes the indices of the non-dominated `(cost, time)` points, ordered by
// time, to `out_indices` and their count to `out_len`. `out_indices` must
// have room for `n` entries.
//
// # Safety
// `costs` and `times` must point to `n` readable doubles, `out_indices` to
// `n` writable entries and `out_len` must be writable.
enum LpStatus lp_pareto_frontier(const double *costs,
                                 const double *times,
                                 size_t n,
                                 size_t *out_indices,
                                 size_t *out_len);

// Pipeline with equal per-stage costs and unit byte sizes.
//
// # Safety
// `out` must be a writable pointer; the handle must be released with
// [`lp_pipeline_free`].
enum LpStatus lp_pipeline_uniform(enum LpPipelineMode mode,
                                  uint64_t stages,
                                  uint64_t microbatches,
                                  uint64_t forward,
                                  uint64_t backward,
                                  uint64_t aux,
                                  struct LpPipeline **out);

// Parses a pipeline from TOML text.
//
// # Safety
// `toml` must be NUL-terminated and `out` writable.
enum LpStatus lp_pipeline_from_toml(const char *toml, struct LpPipeline **out);

// Sets the number of minibatches (backprop) or steps (local) to simulate.
//
// # Safety
// `pipeline` must be a live handle.
enum LpStatus lp_pipeline_set_steps(struct LpPipeline *pipeline, uint64_t steps);

// Replaces the bytes crossing each of the `n = stages - 1` boundaries.
//
// # Safety
// `pipeline` must be a live handle and `bytes` must point to `n` doubles.
enum LpStatus lp_pipeline_set_boundary_bytes(struct LpPipeline *pipeline,
                                             const double *bytes,
                                             size_t n);

// # Safety
// `pipeline` must be null or a handle not yet freed.
void lp_pipeline_free(struct LpPipeline *pipeline);

// Runs the simulation.
//
// # Safety
// `pipeline` must be a live handle and `out` writable; the report must be
// released with [`lp_report_free`].
enum LpStatus lp_simulate(const struct LpPipeline *pipeline, struct LpSimReport **out);

// Makespan in cycles, or 0 for a null handle.
//
// # Safety
// `report` must be null or a live handle.
uint64_t lp_report_total_cycles(const struct LpSimReport *report);

// # Safety
// `report` must be null or a live handle.
uint64_t lp_report_num_stages(const struct LpSimReport *report);

// # Safety
// `report` must be null or a live handle.
double lp_report_steady_state_fraction(const struct LpSimReport *report);

// Busy fraction of one stage.
//
// # Safety
// `report` must be a live handle and `out` writable.
enum LpStatus lp_report_stage_utilization(const struct LpSimReport *report,
                                          uint64_t stage,
                                          double *out);

// Estimated memory of one stage in the configured byte unit.
//
// # Safety
// `report` must be a live handle and `out` writable.
enum LpStatus lp_report_stage_memory(const struct LpSimReport *report, uint64_t stage, double *out);

// The report as a JSON string, or null on failure. Release with
// [`lp_string_free`].
//
// # Safety
// `report` must be null or a live handle.
char *lp_report_to_json(const struct LpSimReport *report);

// # Safety
// `report` must be null or a handle not yet freed.
void lp_report_free(struct LpSimReport *report);

// # Safety
// `s` must be null or a string returned by this library and not yet freed.
void lp_string_free(char *s);

// Total bytes moved (sent plus received, summed over stages) for
// `microbatches` microbatches under both modes.
//
// # Safety
// `boundary_bytes` must point to `n` doubles and `out` must be writable.
enum LpStatus lp_communication_totals(const double *boundary_bytes,
                                      size_t n,
                                      uint64_t microbatches,
                                      struct LpCommunicationTotals *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOCALPAR_H */
