#ifndef EVPOOL_H
#define EVPOOL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum EvpStatus {
  EVP_STATUS_OK = 0,
  EVP_STATUS_NULL_POINTER = 1,
  EVP_STATUS_INVALID_ARGUMENT = 2,
  EVP_STATUS_IO = 3,
  EVP_STATUS_DATA = 4,
  EVP_STATUS_INVARIANT = 5,
  EVP_STATUS_PANIC = 6,
} EvpStatus;

/**
 * Built-in vehicle types.
 */
typedef enum EvpVehicleType {
  EVP_VEHICLE_TYPE_LEAF = 0,
  EVP_VEHICLE_TYPE_MODEL3 = 1,
  EVP_VEHICLE_TYPE_ENV200 = 2,
} EvpVehicleType;

/**
 * Opaque simulation handle.
 */
typedef struct EvpSimulation EvpSimulation;

/**
 * End-of-run figures. Money in cents.
 */
typedef struct EvpSummary {
  int64_t minute;
  bool done;
  uint64_t vehicles;
  uint64_t stations;
  uint64_t chargers;
  int64_t reward_cents;
  int64_t share_cents;
  int64_t op_cents;
  int64_t charge_cents;
  int64_t tow_cents;
  uint64_t served;
  uint64_t ontime;
  uint64_t rejected;
  double ontime_rate;
  double mean_delay_s;
  double customers_per_vehicle;
  double consumed_kwh;
  double charged_kwh;
  double peak_grid_mw;
  uint64_t strandings;
  uint64_t tows;
  uint64_t charge_decisions;
} EvpSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *evp_last_error(void);

/**
 * Library version as a static string.
 */
const char *evp_version(void);

/**
 * Load a scenario config and build a simulation. `events_path` may be null;
 * otherwise the event log is written there.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum EvpStatus evp_simulation_new(const char *config_path,
                                  const char *events_path,
                                  struct EvpSimulation **out);

/**
 * Release a simulation. Null is ignored.
 *
 * # Safety
 * `sim` must come from `evp_simulation_new` and not be used afterwards.
 */
void evp_simulation_free(struct EvpSimulation *sim);

/**
 * Advance one minute. `advanced` (may be null) receives false once the run
 * window is exhausted.
 *
 * # Safety
 * `sim` must be a live handle.
 */
enum EvpStatus evp_simulation_step(struct EvpSimulation *sim, bool *advanced);

/**
 * Run to the end of the window.
 *
 * # Safety
 * `sim` must be a live handle.
 */
enum EvpStatus evp_simulation_run(struct EvpSimulation *sim);

/**
 * Current totals of a simulation.
 *
 * # Safety
 * `sim` must be a live handle and `out` writable.
 */
enum EvpStatus evp_simulation_summary(const struct EvpSimulation *sim, struct EvpSummary *out);

/**
 * Run a config to completion and write the run directory to `out_dir`.
 * `summary` may be null.
 *
 * # Safety
 * String arguments must be NUL-terminated.
 */
enum EvpStatus evp_simulate(const char *config_path,
                            const char *out_dir,
                            struct EvpSummary *summary);

/**
 * Maximum-weight matching on a row-major `rows x cols` matrix. Non-finite
 * entries are forbidden pairs. `row_to_col` receives `rows` entries, -1 for
 * an unmatched row; `value` (may be null) the matched total.
 *
 * # Safety
 * `values` must hold `rows * cols` doubles and `row_to_col` `rows` slots.
 */
enum EvpStatus evp_max_weight_matching(const double *values,
                                       size_t rows,
                                       size_t cols,
                                       int64_t *row_to_col,
                                       double *value);

/**
 * Expected charging time of a vehicle-station pair, seconds.
 *
 * # Safety
 * `out` must be writable.
 */
enum EvpStatus evp_pect(double t_idle,
                        double t_travel,
                        double t_queue,
                        double t_idle_after,
                        double *out);

/**
 * Fare in cents for a direct trip.
 *
 * # Safety
 * `out` must be writable.
 */
enum EvpStatus evp_fare_cents(double direct_travel_min, double direct_km, int64_t *out);

/**
 * Tractive power in watts of a built-in vehicle type.
 *
 * # Safety
 * `out` must be writable.
 */
enum EvpStatus evp_drive_power(enum EvpVehicleType kind,
                               double speed_mps,
                               uint32_t passengers,
                               double *out);

/**
 * Charger supply in kW of a built-in vehicle type at a state of charge.
 *
 * # Safety
 * `out` must be writable.
 */
enum EvpStatus evp_charge_power(enum EvpVehicleType kind,
                                double soc,
                                double station_limit_kw,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVPOOL_H */
