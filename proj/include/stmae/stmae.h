/* SPDX-License-Identifier: Apache-2.0 */
/*
 * C interface to the stmae library.
 *
 * All functions returning stmae_status report failures through the status
 * value; stmae_last_error() then describes the most recent failure on the
 * calling thread. Strings returned through char** out-parameters are owned by
 * the caller and released with stmae_free_string().
 */
#ifndef STMAE_H
#define STMAE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define STMAE_API __declspec(dllexport)
#else
#define STMAE_API __attribute__((visibility("default")))
#endif

typedef enum {
  STMAE_OK = 0,
  STMAE_ERR_USAGE = 1,   /* bad arguments */
  STMAE_ERR_DATA = 2,    /* malformed input or inconsistent configuration */
  STMAE_ERR_RUNTIME = 3  /* numeric failure or other runtime fault */
} stmae_status;

typedef enum { STMAE_TASK_CLASSIFY = 0, STMAE_TASK_REGRESS = 1 } stmae_task;

typedef struct stmae_config stmae_config;
typedef struct stmae_dataset stmae_dataset;
typedef struct stmae_checkpoint stmae_checkpoint;

typedef void (*stmae_log_fn)(const char* line, void* user);

STMAE_API const char* stmae_version(void);
STMAE_API const char* stmae_last_error(void);
STMAE_API void stmae_free_string(char* s);

/* ---- configuration ---- */
STMAE_API stmae_status stmae_config_create(stmae_config** out);
STMAE_API void stmae_config_destroy(stmae_config* cfg);
STMAE_API stmae_status stmae_config_set(stmae_config* cfg, const char* key, const char* value);
STMAE_API stmae_status stmae_config_get(const stmae_config* cfg, const char* key, char** out);
/* Newline-separated list of every option key. */
STMAE_API stmae_status stmae_config_keys(char** out);
STMAE_API stmae_status stmae_config_load(stmae_config* cfg, const char* path);
STMAE_API stmae_status stmae_config_preset(stmae_config* cfg, const char* name);
STMAE_API stmae_status stmae_config_to_json(const stmae_config* cfg, char** out);
STMAE_API stmae_status stmae_config_from_json(stmae_config* cfg, const char* json);

/* ---- data ---- */
typedef struct {
  int communities;
  int smooth_width;
  double contrast;
  double target_coupling;
  double noise;
  int window;
} stmae_synth_spec;

STMAE_API void stmae_synth_spec_default(stmae_synth_spec* spec);
STMAE_API stmae_status stmae_synth(int n_subjects, int n_rois, int n_timepoints, uint64_t seed,
                                   const stmae_synth_spec* spec, const char* out_dir);

/* `path` is a manifest file or a directory containing manifest.jsonl. */
STMAE_API stmae_status stmae_dataset_open(const char* path, stmae_dataset** out);
STMAE_API size_t stmae_dataset_size(const stmae_dataset* ds);
STMAE_API int stmae_dataset_rois(const stmae_dataset* ds);
STMAE_API void stmae_dataset_destroy(stmae_dataset* ds);

/* ---- graphs ---- */
typedef struct {
  long n_graphs;
  double n_nodes_avg;
  double n_edges_avg;
  double d_max;
  double d_avg;
  double clustering;
  long zero_wedge_graphs;
  long empty_snapshots;
  long degenerate_rois;
} stmae_graph_stats;

/* Writes <out_dir>/<subject_id>.stdg per subject. */
STMAE_API stmae_status stmae_build_graphs(const stmae_dataset* ds, const stmae_config* cfg, const char* out_dir,
                                          size_t* n_written);
STMAE_API stmae_status stmae_graph_stats_dir(const char* graphs_dir, stmae_graph_stats* out);

/* ---- training ---- */
STMAE_API stmae_status stmae_pretrain(const stmae_dataset* ds, const stmae_config* cfg, const char* out_dir,
                                      stmae_log_fn log, void* user, stmae_checkpoint** out);
STMAE_API stmae_status stmae_checkpoint_load(const char* path, stmae_checkpoint** out);
STMAE_API stmae_status stmae_checkpoint_save(const stmae_checkpoint* ck, const char* path);
STMAE_API stmae_status stmae_checkpoint_config(const stmae_checkpoint* ck, stmae_config** out);
STMAE_API void stmae_checkpoint_destroy(stmae_checkpoint* ck);

typedef struct {
  int folds;
  int has_auroc, has_accuracy, has_mae;
  double auroc_mean, auroc_std;
  double accuracy_mean, accuracy_std;
  double mae_mean, mae_std;
} stmae_metrics;

/* `ck` may be NULL to fine-tune from a random initialisation. */
STMAE_API stmae_status stmae_finetune(const stmae_dataset* ds, const stmae_checkpoint* ck, const stmae_config* cfg,
                                      stmae_task task, const char* out_dir, stmae_log_fn log, void* user,
                                      stmae_metrics* out);

/* grid: mask_ratio | criterion | ssl_fraction | label_fraction | recon_target.
 * values may be NULL (n_values = 0) for the default sweep. */
STMAE_API stmae_status stmae_ablate(const stmae_dataset* ds, const stmae_config* cfg, const char* grid,
                                    const double* values, size_t n_values, stmae_task task, const char* out_dir,
                                    stmae_log_fn log, void* user);

typedef struct {
  double max_rel_err;
  double tolerance;
  int n_checked;
  int n_zero;
  int passed;
} stmae_grad_report;

/* report_path may be NULL; otherwise a JSON report is written there. */
STMAE_API stmae_status stmae_grad_check(const stmae_config* cfg, uint64_t seed, const char* report_path,
                                        stmae_grad_report* out);

/* kind: "line" or "bar". */
STMAE_API stmae_status stmae_plot(const char* csv_path, const char* svg_path, const char* kind);

#ifdef __cplusplus
}
#endif

#endif /* STMAE_H */
