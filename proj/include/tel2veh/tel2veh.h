#ifndef TEL2VEH_TEL2VEH_H
#define TEL2VEH_TEL2VEH_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define T2V_API __declspec(dllexport)
#else
#define T2V_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum t2v_status {
  T2V_OK = 0,
  T2V_ERR_INVALID_ARGUMENT = 1,
  T2V_ERR_IO = 2,
  T2V_ERR_PARSE = 3,
  T2V_ERR_DATA = 4,
  T2V_ERR_CONFIG = 5,
  T2V_ERR_NUMERIC = 6,
  T2V_ERR_STATE = 7,
  T2V_ERR_INTERNAL = 8
} t2v_status;

T2V_API const char* t2v_version(void);
T2V_API const char* t2v_status_name(t2v_status status);
/* Message of the last failed call on this thread; "" after a success. */
T2V_API const char* t2v_last_error(void);

/* Receives warnings and progress lines. May be called from worker threads,
   never concurrently. */
typedef void (*t2v_message_fn)(const char* message, void* user);

/* ------------------------------------------------------------------------ */
/* Flow matrices */

typedef struct t2v_flow t2v_flow;

/* kind: 0 = GCT flows, 1 = vehicle flows. */
T2V_API t2v_status t2v_flow_load(const char* path, int kind, t2v_flow** out);
T2V_API void t2v_flow_free(t2v_flow* flow);
T2V_API size_t t2v_flow_rows(const t2v_flow* flow);
T2V_API size_t t2v_flow_nodes(const t2v_flow* flow);
/* Gaps read as NaN. */
T2V_API t2v_status t2v_flow_value(const t2v_flow* flow, size_t row, size_t node, double* out);
/* Seconds since 1970-01-01 00:00 local wall-clock time. */
T2V_API t2v_status t2v_flow_time(const t2v_flow* flow, size_t row, int64_t* out);
/* Valid until the flow is freed; NULL when out of range. */
T2V_API const char* t2v_flow_node_id(const t2v_flow* flow, size_t node);

typedef struct t2v_stats {
  size_t samples;
  size_t nodes;
  size_t gap_cells;
  double mean;
  double std;
  char max_node[64];
  double max_node_mean;
  char min_node[64];
  double min_node_mean;
} t2v_stats;

T2V_API t2v_status t2v_flow_stats(const t2v_flow* flow, t2v_stats* out);

/* ------------------------------------------------------------------------ */
/* Ingest and analysis */

typedef struct t2v_ingest_options {
  int interval_minutes; /* 0 means 5 */
  const char* day_start; /* "HH:MM", NULL means 06:00 */
  const char* day_end;   /* NULL means 19:00 */
  size_t shards;         /* 0 or 1: single thread */
  t2v_message_fn on_warning;
  void* user;
} t2v_ingest_options;

typedef struct t2v_ingest_summary {
  size_t records;
  size_t bad_lines;
  size_t outside_window;
  size_t outside_segments;
  size_t rows;
  size_t nodes;
} t2v_ingest_summary;

/* Raw records + segments -> gct_flows.csv. Bad lines are reported through
   on_warning and counted, never silently dropped. */
T2V_API t2v_status t2v_ingest(const char* records_csv, const char* segments_csv, const t2v_ingest_options* options,
                              const char* out_csv, t2v_ingest_summary* summary);

/* Daily Pearson r per (day, camera) into out_csv; undefined cells are NA. */
T2V_API t2v_status t2v_correlate(const char* gct_csv, const char* vehicle_csv, const char* map_csv,
                                 const char* out_csv, size_t* defined_cells, size_t* total_cells);

/* ------------------------------------------------------------------------ */
/* Configuration text: a key=value file (may be NULL) followed by `overrides`
   (newline-separated key=value, may be NULL) which win on conflict. */

/* Writes gct_flows.csv, vehicle_flows.csv, camera_map.csv, segments.csv. */
T2V_API t2v_status t2v_synth(const char* config_path, const char* overrides, const char* out_dir);

typedef struct t2v_train_summary {
  size_t epochs;
  size_t best_epoch;
  size_t steps;
  double best_val;       /* selection score */
  double reference_val;  /* stage 1: repeat-last-value MAE on validation */
  double lambda;         /* stage 2 */
  size_t n_horizons;     /* stage 2 with an excluded camera */
  size_t horizons[16];
  double test_mae[16];
  double test_rmse[16];
  double test_mape[16];
  char fingerprint[32];
} t2v_train_summary;

/* source: "gct" or "vehicle". exclude_camera (NULL or "none" for none) drops
   that camera from the vehicle extractor's training data. */
T2V_API t2v_status t2v_train_stage1(const char* data_dir, const char* config_path, const char* overrides,
                                    const char* source, uint64_t seed, const char* exclude_camera,
                                    const char* out_checkpoint, t2v_train_summary* summary);

/* loss_log_csv (may be NULL) receives step,loss_with,loss_without,lambda,total. */
T2V_API t2v_status t2v_train_stage2(const char* data_dir, const char* gct_checkpoint, const char* vehicle_checkpoint,
                                    const char* config_path, const char* overrides, uint64_t seed,
                                    const char* exclude_camera, const char* out_checkpoint,
                                    const char* loss_log_csv, t2v_train_summary* summary);

/* ------------------------------------------------------------------------ */
/* Leave-one-camera-out evaluation */

typedef struct t2v_loo_options {
  const char* data_dir;
  const char* config_path;
  const char* overrides;
  const uint64_t* seeds;
  size_t n_seeds;
  const char* horizons; /* "3,6,12"; NULL keeps the config */
  size_t workers;       /* 0 keeps the config */
  const char* out_dir;
  const char* plot_camera; /* NULL: first camera */
  const char* plot_day;    /* "YYYY-MM-DD"; NULL: last day */
  t2v_message_fn progress;
  void* user;
} t2v_loo_options;

typedef struct t2v_loo_summary {
  size_t folds;
  size_t completed;
  size_t scheduled_trainings;
  size_t n_horizons;
  size_t horizons[16];
  double mae_with[16];
  double mae_without[16];
  double ir_mae[16]; /* NaN when undefined */
  char fingerprint[32];
} t2v_loo_summary;

/* Writes report.txt, report_rows.csv and one plot_<node>_<day>.csv. */
T2V_API t2v_status t2v_evaluate_loo(const t2v_loo_options* options, t2v_loo_summary* summary);

/* Trainings the protocol schedules for M cameras and a seed count. */
T2V_API t2v_status t2v_loo_schedule(size_t cameras, size_t seeds, size_t* fusion_trainings,
                                    size_t* baseline_trainings);

/* (without - with) / without * 100; T2V_ERR_INVALID_ARGUMENT when without <= 0. */
T2V_API t2v_status t2v_improvement_ratio(double score_with, double score_without, double* out);

#ifdef __cplusplus
}
#endif

#endif
