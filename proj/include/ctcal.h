/*
 * ctcal — segmentation-prior extraction, pixel-wise conformal calibration,
 * and evaluation metrics for CBCT-to-CT translation pipelines.
 *
 * C API over the C++ core: opaque handles, status codes, thread-local error
 * messages. Every object returned through an out-parameter is owned by the
 * caller and must be released with the matching *_free function.
 */
#ifndef CTCAL_H
#define CTCAL_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ctcal_status {
  CTCAL_OK = 0,
  CTCAL_ERR_INVALID_ARG = 1,
  CTCAL_ERR_IO = 2,
  CTCAL_ERR_FORMAT = 3,
  CTCAL_ERR_EMPTY_BODY = 4,
  CTCAL_ERR_EMPTY_MASK = 5,
  CTCAL_ERR_SATURATED = 6,
  CTCAL_ERR_INFEASIBLE = 7,
  CTCAL_ERR_DIGEST_MISMATCH = 8,
  CTCAL_ERR_SHAPE_MISMATCH = 9,
  CTCAL_ERR_MODE_INPUT_MISSING = 10,
  CTCAL_ERR_CONFIG = 11,
  CTCAL_ERR_UNKNOWN = 12,
} ctcal_status;

typedef enum ctcal_units {
  CTCAL_UNITS_NORMALIZED = 0,
  CTCAL_UNITS_HU = 1,
} ctcal_units;

/* Message describing the most recent failure on this thread. */
const char* ctcal_last_error(void);

/* Frees strings returned through char** out-parameters. */
void ctcal_string_free(char* s);

/* ---- grids and masks -------------------------------------------------- */

typedef struct ctcal_grid ctcal_grid;
typedef struct ctcal_mask ctcal_mask;

ctcal_status ctcal_grid_create(int height, int width, ctcal_units units,
                               const float* values, ctcal_grid** out);
ctcal_status ctcal_grid_load(const char* path, ctcal_grid** out);
ctcal_status ctcal_grid_save(const ctcal_grid* grid, const char* path);
int ctcal_grid_height(const ctcal_grid* grid);
int ctcal_grid_width(const ctcal_grid* grid);
ctcal_units ctcal_grid_units(const ctcal_grid* grid);
const float* ctcal_grid_data(const ctcal_grid* grid);
void ctcal_grid_free(ctcal_grid* grid);

ctcal_status ctcal_mask_create(int height, int width, const uint8_t* bits,
                               ctcal_mask** out);
ctcal_status ctcal_mask_load(const char* path, ctcal_mask** out);
ctcal_status ctcal_mask_save(const ctcal_mask* mask, const char* path);
int ctcal_mask_height(const ctcal_mask* mask);
int ctcal_mask_width(const ctcal_mask* mask);
const uint8_t* ctcal_mask_data(const ctcal_mask* mask);
size_t ctcal_mask_count(const ctcal_mask* mask);
void ctcal_mask_free(ctcal_mask* mask);

/* ---- configuration ----------------------------------------------------- */

typedef struct ctcal_config ctcal_config;

ctcal_status ctcal_config_default(ctcal_config** out);
ctcal_status ctcal_config_load(const char* path, ctcal_config** out);
/* Dotted-path override, e.g. ("sampler.k", "32") or ("mode", "seg"). */
ctcal_status ctcal_config_set(ctcal_config* cfg, const char* key, const char* value);
ctcal_status ctcal_config_dump(const ctcal_config* cfg, char** json_out);
/* 64 hex characters plus terminator. */
ctcal_status ctcal_config_digest(const ctcal_config* cfg, char out_hex[65]);
void ctcal_config_free(ctcal_config* cfg);

/* ---- core operations -------------------------------------------------- */

ctcal_status ctcal_normalize(const ctcal_grid* grid, float hu_min, float hu_max,
                             ctcal_grid** out);
ctcal_status ctcal_denormalize(const ctcal_grid* grid, float hu_min, float hu_max,
                               ctcal_grid** out);
ctcal_status ctcal_crop_center(const ctcal_grid* grid, int out_h, int out_w,
                               ctcal_grid** out);

ctcal_status ctcal_extract_body_mask(const ctcal_grid* pct, const ctcal_config* cfg,
                                     ctcal_mask** out);
ctcal_status ctcal_extract_bone_mask(const ctcal_grid* pct, const ctcal_mask* body,
                                     const ctcal_config* cfg, ctcal_mask** out);

ctcal_status ctcal_phantom_generate(const ctcal_config* cfg, uint64_t seed,
                                    ctcal_grid** ct, ctcal_mask** body_truth,
                                    ctcal_mask** bone_truth);
ctcal_status ctcal_degrade_to_cbct(const ctcal_grid* ct, const ctcal_config* cfg,
                                   uint64_t seed, ctcal_grid** out);

ctcal_status ctcal_perturb_mask(const ctcal_mask* mask, int level, uint64_t seed,
                                ctcal_mask** out);

ctcal_status ctcal_dice(const ctcal_mask* p, const ctcal_mask* q, double* out);
ctcal_status ctcal_masked_mae(const ctcal_grid* sct, const ctcal_grid* ct,
                              const ctcal_mask* mask, double* out);

/* ---- conformal calibration --------------------------------------------- */

typedef struct ctcal_scp_calibration ctcal_scp_calibration;
typedef struct ctcal_crc_calibration ctcal_crc_calibration;

/* rank out-parameter is 1-based; *saturated set when rank exceeds n_c. */
ctcal_status ctcal_scp_rank(int n_c, double n_p, double alpha, int adjusted,
                            int* rank, int* saturated);

/* scts/cts: arrays of n normalized grids. */
ctcal_status ctcal_scp_calibrate(const ctcal_grid* const* scts,
                                 const ctcal_grid* const* cts, int n, double alpha,
                                 int adjusted, int patients,
                                 ctcal_scp_calibration** out);
ctcal_status ctcal_scp_save(const ctcal_scp_calibration* cal, const char* path);
ctcal_status ctcal_scp_load(const char* path, ctcal_scp_calibration** out);
ctcal_status ctcal_scp_qhat(const ctcal_scp_calibration* cal, ctcal_grid** out);
ctcal_status ctcal_scp_predict(const ctcal_scp_calibration* cal,
                               const ctcal_grid* sct, ctcal_grid** lower,
                               ctcal_grid** upper);
void ctcal_scp_free(ctcal_scp_calibration* cal);

/* samples: array of k normalized grids; per-pixel quantile bounds. */
ctcal_status ctcal_heuristic_bounds(const ctcal_grid* const* samples, int k,
                                    double q_lo, double q_hi, ctcal_grid** lower,
                                    ctcal_grid** upper);

ctcal_status ctcal_crc_calibrate(const ctcal_grid* const* lowers,
                                 const ctcal_grid* const* uppers,
                                 const ctcal_grid* const* cts,
                                 const ctcal_mask* const* masks, int n,
                                 double alpha, double b, int adjusted, int patients,
                                 ctcal_crc_calibration** out);
ctcal_status ctcal_crc_lambda(const ctcal_crc_calibration* cal, double* out);
ctcal_status ctcal_crc_save(const ctcal_crc_calibration* cal, const char* path);
ctcal_status ctcal_crc_load(const char* path, ctcal_crc_calibration** out);
ctcal_status ctcal_crc_predict(const ctcal_crc_calibration* cal,
                               const ctcal_grid* lower_in, const ctcal_grid* upper_in,
                               ctcal_grid** lower, ctcal_grid** upper);
void ctcal_crc_free(ctcal_crc_calibration* cal);

/* ---- pipeline commands -------------------------------------------------- */
/* Each command mirrors one CLI subcommand, writes its outputs to disk, and
 * returns a JSON summary through summary_out (free with ctcal_string_free). */

ctcal_status ctcal_cmd_phantom_gen(const ctcal_config* cfg, int patients,
                                   int slices, uint64_t seed, const char* out_dir,
                                   char** summary_out);
ctcal_status ctcal_cmd_segment(const ctcal_config* cfg, const char* input,
                               const char* out_body, const char* out_bone,
                               const char* truth_dir /* nullable */,
                               char** summary_out);
ctcal_status ctcal_cmd_translate(const ctcal_config* cfg, const char* manifest,
                                 const char* fit_manifest /* nullable */,
                                 const char* mode, const char* out_dir, int samples,
                                 uint64_t seed, char** summary_out);
ctcal_status ctcal_cmd_calibrate(const ctcal_config* cfg, const char* manifest,
                                 const char* method, double alpha,
                                 const char* out_path, char** summary_out);
ctcal_status ctcal_cmd_predict(const ctcal_config* cfg, const char* calib,
                               const char* manifest, const char* out_dir,
                               const char* map_dir /* nullable */,
                               char** summary_out);
ctcal_status ctcal_cmd_evaluate(const ctcal_config* cfg, const char* manifest,
                                const char* calib,
                                const char* calib_adj /* nullable */,
                                const char* out_csv, char** summary_out);
ctcal_status ctcal_cmd_perturb(const ctcal_config* cfg, const char* manifest,
                               int level, uint64_t seed, const char* out_dir,
                               char** summary_out);
ctcal_status ctcal_cmd_bench(const ctcal_config* cfg, const char* experiment,
                             const char* out_dir, uint64_t seed, int dry_run,
                             char** summary_out);

#ifdef __cplusplus
}
#endif

#endif /* CTCAL_H */
