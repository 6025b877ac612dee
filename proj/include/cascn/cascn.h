#ifndef CASCN_CASCN_H
#define CASCN_CASCN_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CASCN_API __declspec(dllexport)
#else
#define CASCN_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cascn_status {
  CASCN_OK = 0,
  CASCN_ERR_INVALID_ARGUMENT = 1, /* null handle, bad argument */
  CASCN_ERR_CONFIG = 2,           /* bad config key or value */
  CASCN_ERR_IO = 3,               /* missing path, unreadable or non-image file */
  CASCN_ERR_DATA = 4,             /* empty dataset, impossible split */
  CASCN_ERR_DIMENSION = 5,
  CASCN_ERR_LOAD = 6,             /* corrupt or incompatible checkpoint */
  CASCN_ERR_NUMERICAL = 7,        /* non-finite loss or activation */
  CASCN_ERR_VERIFY_FAILED = 8,    /* at least one invariant check failed */
  CASCN_ERR_INTERNAL = 9
} cascn_status;

/* Receives text output (CSV rows, log lines). `data` is not NUL-terminated. */
typedef void (*cascn_write_fn)(const char* data, size_t len, void* user);

/* Message of the last failing call on this thread; empty after success. */
CASCN_API const char* cascn_last_error(void);
CASCN_API const char* cascn_status_name(cascn_status status);

/* Runtime switches. */
CASCN_API cascn_status cascn_set_threads(int threads);
CASCN_API void cascn_set_deterministic(int enabled);
/* Test hook: names a fault to inject; NULL or "" clears it. */
CASCN_API cascn_status cascn_set_fault(const char* name);

/* Run configuration (key=value text). */
typedef struct cascn_config cascn_config;
/* scale: "paper" or "desk". */
CASCN_API cascn_status cascn_config_new(const char* scale, cascn_config** out);
CASCN_API cascn_status cascn_config_load(cascn_config* cfg, const char* path);
CASCN_API cascn_status cascn_config_set(cascn_config* cfg, const char* key, const char* value);
CASCN_API cascn_status cascn_config_serialize(const cascn_config* cfg, cascn_write_fn write, void* user);
CASCN_API void cascn_config_free(cascn_config* cfg);

/* Trained model loaded from a checkpoint. */
typedef struct cascn_model cascn_model;
CASCN_API cascn_status cascn_model_load(const char* checkpoint, cascn_model** out);
CASCN_API cascn_status cascn_model_input_size(const cascn_model* model, int* height, int* width);
/* Binary 0/255 PNG mask at the input image's own size. */
CASCN_API cascn_status cascn_model_predict_file(cascn_model* model, const char* image_path, const char* out_path);
CASCN_API void cascn_model_free(cascn_model* model);

/* Writes n synthetic samples (images/, masks/) under out_root. */
CASCN_API cascn_status cascn_synth(const char* out_root, int n, int height, int width, uint64_t seed);

/* Trains on data_root split per config. out_dir receives best.ckpt,
   last.ckpt, train_log.tsv, report.csv (test split) and config.txt. Each
   epoch's log line is also passed to `log` when non-NULL. */
CASCN_API cascn_status cascn_train(const cascn_config* cfg, const char* data_root, const char* out_dir,
                                   cascn_write_fn log, void* user);

/* Per-image metric CSV with a MEAN row for every sample under data_root. */
CASCN_API cascn_status cascn_eval(const char* checkpoint, const char* data_root, cascn_write_fn csv, void* user);

/* Trains and evaluates each ablation variant under one seed and writes
   `variant,SE,SP,AC,DI,JA` rows. out_dir (optional) gets per-variant runs
   and ablation.csv. */
CASCN_API cascn_status cascn_ablate(const cascn_config* cfg, const char* data_root, const char* out_dir,
                                    cascn_write_fn csv, void* user);

/* Runs the invariant suite, one line per check. Returns
   CASCN_ERR_VERIFY_FAILED when any check fails. */
CASCN_API cascn_status cascn_verify(cascn_write_fn line, void* user);

/* Per-layer multiply-accumulate counts of the configured model as CSV. */
CASCN_API cascn_status cascn_flops(const cascn_config* cfg, cascn_write_fn csv, void* user);

#ifdef __cplusplus
}
#endif

#endif
