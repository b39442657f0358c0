#ifndef PROMOD_H
#define PROMOD_H

/* Generated by cbindgen at build time; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Lap state reported by the simulator.
 */
typedef enum PromodLapState {
  PROMOD_LAP_STATE_RUNNING = 0,
  PROMOD_LAP_STATE_FINISHED = 1,
  PROMOD_LAP_STATE_OFF_TRACK = 2,
  PROMOD_LAP_STATE_TIMEOUT = 3,
  PROMOD_LAP_STATE_FAILED = 4,
} PromodLapState;

/**
 * Result code of every fallible call.
 */
typedef enum PromodStatus {
  PROMOD_STATUS_OK = 0,
  PROMOD_STATUS_NULL_POINTER = 1,
  PROMOD_STATUS_INVALID_ARGUMENT = 2,
  PROMOD_STATUS_IO = 3,
  PROMOD_STATUS_MALFORMED = 4,
  PROMOD_STATUS_NUMERICAL = 5,
  PROMOD_STATUS_UNKNOWN_TRACK = 6,
  PROMOD_STATUS_PANIC = 7,
} PromodStatus;

typedef struct PromodModel PromodModel;

typedef struct PromodProMp PromodProMp;

typedef struct PromodSim PromodSim;

typedef struct PromodTrack PromodTrack;

typedef struct PromodLocalization {
  double s;
  double d;
  double heading;
} PromodLocalization;

typedef struct PromodVehicleState {
  double x;
  double y;
  double psi;
  double vx;
  double vy;
  double psidot;
} PromodVehicleState;

typedef struct PromodLapResult {
  enum PromodLapState state;
  /**
   * Lap time in seconds, NaN unless finished.
   */
  double lap_time;
  size_t steps;
} PromodLapResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *promod_last_error(void);

/**
 * Generates a track from `seed` with default parameters.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
enum PromodStatus promod_track_generate(uint64_t seed, struct PromodTrack **out);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum PromodStatus promod_track_load(const char *path, struct PromodTrack **out);

/**
 * # Safety
 * `track` must come from this library (or be null) and not be used again.
 */
void promod_track_free(struct PromodTrack *track);

/**
 * # Safety
 * Pointers must be valid.
 */
enum PromodStatus promod_track_length(const struct PromodTrack *track, double *out);

/**
 * Projects a world point onto the centerline.
 *
 * # Safety
 * Pointers must be valid.
 */
enum PromodStatus promod_track_localize(const struct PromodTrack *track,
                                        double x,
                                        double y,
                                        struct PromodLocalization *out);

/**
 * Creates a simulator at the start line of `track` with the grip scaled by
 * `grip`. The track is copied.
 *
 * # Safety
 * Pointers must be valid.
 */
enum PromodStatus promod_sim_new(const struct PromodTrack *track,
                                 double grip,
                                 struct PromodSim **out);

/**
 * # Safety
 * `sim` must come from this library (or be null) and not be used again.
 */
void promod_sim_free(struct PromodSim *sim);

/**
 * Puts the car back at rest on the start line.
 *
 * # Safety
 * `sim` must be valid.
 */
enum PromodStatus promod_sim_reset(struct PromodSim *sim);

/**
 * Fixed simulation step in seconds.
 *
 * # Safety
 * Pointers must be valid.
 */
enum PromodStatus promod_sim_dt(const struct PromodSim *sim, double *out);

/**
 * # Safety
 * Pointers must be valid.
 */
enum PromodStatus promod_sim_state(const struct PromodSim *sim, struct PromodVehicleState *out);

/**
 * Advances one step with handwheel angle `delta` (degrees), throttle and
 * brake in `[0, 1]`. Inputs are clamped to the vehicle limits. After the lap
 * ends the state is frozen and further steps only report the lap state.
 *
 * # Safety
 * `sim` must be valid; `lap` may be null.
 */
enum PromodStatus promod_sim_step(struct PromodSim *sim,
                                  double delta,
                                  double gas,
                                  double brake,
                                  enum PromodLapState *lap);

/**
 * Lap time of a finished lap, NaN otherwise.
 *
 * # Safety
 * Pointers must be valid.
 */
enum PromodStatus promod_sim_lap_time(const struct PromodSim *sim, double *out);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum PromodStatus promod_promp_load(const char *path, struct PromodProMp **out);

/**
 * # Safety
 * `promp` must come from this library (or be null) and not be used again.
 */
void promod_promp_free(struct PromodProMp *promp);

/**
 * Number of output channels (x, ẋ, y, ẏ).
 */
size_t promod_promp_channels(void);

/**
 * Mean trajectory at phase `z ∈ [0, 1]`; writes `promod_promp_channels()`
 * values to `out`.
 *
 * # Safety
 * `out` must hold `promod_promp_channels()` doubles.
 */
enum PromodStatus promod_promp_mean(const struct PromodProMp *promp, double z, double *out);

/**
 * Draws one trajectory with `seed` and evaluates it at `n` phases `zs`;
 * writes `n * promod_promp_channels()` values, row-major, to `out`.
 *
 * # Safety
 * `zs` must hold `n` doubles and `out` `n * promod_promp_channels()`.
 */
enum PromodStatus promod_promp_sample(const struct PromodProMp *promp,
                                      uint64_t seed,
                                      const double *zs,
                                      size_t n,
                                      double *out);

/**
 * Loads a model bundle directory (ProMoD or baseline).
 *
 * # Safety
 * `dir` must be a nul-terminated string and `out` writable.
 */
enum PromodStatus promod_model_load(const char *dir, struct PromodModel **out);

/**
 * # Safety
 * `model` must come from this library (or be null) and not be used again.
 */
void promod_model_free(struct PromodModel *model);

/**
 * Drives one closed-loop lap. `seed` selects the sampled target trajectory
 * and is ignored by baseline models.
 *
 * # Safety
 * Pointers must be valid.
 */
enum PromodStatus promod_model_rollout(const struct PromodModel *model,
                                       const struct PromodTrack *track,
                                       double grip,
                                       uint64_t seed,
                                       double max_time,
                                       struct PromodLapResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROMOD_H */
