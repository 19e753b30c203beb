/* C ABI for the gem forecasting engine. */

#ifndef GEM_FFI_H
#define GEM_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define GEM_OK 0

#define GEM_ERR_USAGE 1

#define GEM_ERR_DATA 2

#define GEM_ERR_NUMERIC 3

/**
 * Opaque ensemble forecast.
 */
typedef struct GemForecast GemForecast;

/**
 * Opaque loaded model checkpoint plus its precomputed geometry.
 */
typedef struct GemModel GemModel;

/**
 * Opaque sequence of gridded fields (one GEMF file).
 */
typedef struct GemSeries GemSeries;

typedef struct GemSeriesInfo {
  uint32_t nlat;
  uint32_t nlon;
  uint32_t nchan;
  uint32_t ntime;
} GemSeriesInfo;

typedef struct GemModelInfo {
  uint32_t nlat;
  uint32_t nlon;
  uint32_t prognostic_channels;
  uint32_t diagnostic_channels;
  uint32_t noise_dim;
  uint64_t param_count;
} GemModelInfo;

typedef struct GemForecastInfo {
  uint32_t members;
  uint32_t leads;
  uint32_t nlat;
  uint32_t nlon;
  uint32_t prognostic_channels;
  uint32_t diagnostic_channels;
  int64_t init_time_hours;
} GemForecastInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version string of the library, static storage.
 */
const char *gem_version(void);

/**
 * Retrieve the last error message on this thread. Returns the message
 * length; writes a NUL-terminated (possibly truncated) copy into `buf`.
 */
uintptr_t gem_last_error(char *buf, uintptr_t len);

/**
 * Open a GEMF field file. Returns NULL on failure.
 */
struct GemSeries *gem_series_open(const char *path);

/**
 * # Safety
 * `handle` must come from [`gem_series_open`] and not be used after.
 */
void gem_series_close(struct GemSeries *handle);

/**
 * # Safety
 * `handle` must be a live series handle; `info` must be writable.
 */
int32_t gem_series_info(const struct GemSeries *handle, struct GemSeriesInfo *info);

/**
 * # Safety
 * `handle` must be a live series handle; `buf` must hold `len` bytes.
 */
int32_t gem_series_channel_name(const struct GemSeries *handle,
                                uint32_t index,
                                char *buf,
                                uintptr_t len);

/**
 * # Safety
 * `handle` must be a live series handle; `out` must be writable.
 */
int32_t gem_series_time_tag(const struct GemSeries *handle, uint32_t time_index, int64_t *out);

/**
 * Copy one `[nlat x nlon]` frame into `buf` (row-major, north first).
 *
 * # Safety
 * `handle` must be a live series handle; `buf` must hold `len` floats.
 */
int32_t gem_series_frame(const struct GemSeries *handle,
                         uint32_t time_index,
                         uint32_t channel,
                         float *buf,
                         uintptr_t len);

/**
 * Load a GEMW checkpoint. Returns NULL on failure.
 */
struct GemModel *gem_model_load(const char *path);

/**
 * # Safety
 * `handle` must come from [`gem_model_load`] and not be used after.
 */
void gem_model_free(struct GemModel *handle);

/**
 * # Safety
 * `handle` must be a live model handle; `info` must be writable.
 */
int32_t gem_model_info(const struct GemModel *handle, struct GemModelInfo *info);

/**
 * Run an ensemble forecast from the series snapshot tagged
 * `init_time_hours`. Returns NULL on failure.
 *
 * # Safety
 * `model` and `series` must be live handles from this library.
 */
struct GemForecast *gem_forecast_run(const struct GemModel *model,
                                     const struct GemSeries *series,
                                     int64_t init_time_hours,
                                     uint32_t leads,
                                     uint32_t members,
                                     uint64_t seed,
                                     int32_t sst_smooth);

/**
 * # Safety
 * `handle` must come from [`gem_forecast_run`] and not be used after.
 */
void gem_forecast_free(struct GemForecast *handle);

/**
 * # Safety
 * `handle` must be a live forecast handle; `info` must be writable.
 */
int32_t gem_forecast_info(const struct GemForecast *handle, struct GemForecastInfo *info);

/**
 * Copy one prognostic frame (1-based lead) into `buf`.
 *
 * # Safety
 * `handle` must be a live forecast handle; `buf` must hold `len` floats.
 */
int32_t gem_forecast_prog(const struct GemForecast *handle,
                          uint32_t member,
                          uint32_t lead,
                          uint32_t channel,
                          float *buf,
                          uintptr_t len);

/**
 * Copy one diagnostic frame (1-based lead) into `buf`.
 *
 * # Safety
 * `handle` must be a live forecast handle; `buf` must hold `len` floats.
 */
int32_t gem_forecast_diag(const struct GemForecast *handle,
                          uint32_t member,
                          uint32_t lead,
                          uint32_t channel,
                          float *buf,
                          uintptr_t len);

/**
 * Fair CRPS of an ensemble against one observation.
 *
 * # Safety
 * `samples` must point to `n` doubles; `out` must be writable.
 */
int32_t gem_fair_crps(const double *samples, uintptr_t n, double obs, double *out);

/**
 * Pinball loss of a predicted tau-quantile.
 *
 * # Safety
 * `out` must be writable.
 */
int32_t gem_quantile_score(double q, double obs, double tau, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEM_FFI_H */
