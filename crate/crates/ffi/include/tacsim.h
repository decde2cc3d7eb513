#ifndef TACSIM_H
#define TACSIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TacsimStatus {
  TACSIM_STATUS_OK = 0,
  TACSIM_STATUS_NULL_POINTER = 1,
  TACSIM_STATUS_INVALID_ARGUMENT = 2,
  TACSIM_STATUS_INVALID_CONFIG = 3,
  TACSIM_STATUS_SESSION_ENDED = 4,
  TACSIM_STATUS_IO = 5,
  TACSIM_STATUS_INTERNAL = 6,
} TacsimStatus;

// Task phase codes used in [`TacsimSnapshot::phase`].
typedef enum TacsimPhase {
  TACSIM_PHASE_MOVING_TO_PICK = 0,
  TACSIM_PHASE_AWAIT_CONFIRM_PICK = 1,
  TACSIM_PHASE_AUTO_PICK = 2,
  TACSIM_PHASE_MOVING_TO_PLACE = 3,
  TACSIM_PHASE_AWAIT_CONFIRM_PLACE = 4,
  TACSIM_PHASE_AUTO_PLACE = 5,
  TACSIM_PHASE_DONE = 6,
} TacsimPhase;

// Opaque simulation session.
typedef struct TacsimSession TacsimSession;

// Operator input for one tick. `joystick_edge`: 0 none, 1 up, -1 down.
typedef struct TacsimControlFrame {
  double hand_delta[3];
  double hand_pos_abs[3];
  double joystick_y;
  int32_t joystick_edge;
  bool confirm_pressed;
  bool clutch_held;
} TacsimControlFrame;

// Fixed-size view of the robot and task state. The full state, including
// events and container positions, is available as JSON.
typedef struct TacsimSnapshot {
  double t;
  uint64_t tick;
  // Torso position (m) followed by the seven arm joints (rad).
  double joints[8];
  double ee_position[3];
  // Quaternion x, y, z, w.
  double ee_orientation[4];
  double torso_command;
  enum TacsimPhase phase;
  uint32_t task_index;
  bool has_cue;
  uint32_t cue_target_id;
  double cue_position[3];
  bool out_of_reach;
  bool ended;
} TacsimSnapshot;

typedef struct TacsimMetrics {
  double total_time;
  double short_range_time;
  double long_range_time;
  double manipulability_mean;
  double manipulability_min;
  double torso_motion_time;
  double torso_motion_fraction;
  uint32_t wrong_selections;
  uint32_t completed_subtasks;
  bool done;
} TacsimMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread. Valid until
// the next failing call on the same thread.
const char *tacsim_last_error(void);

// Library version as a static NUL-terminated string.
const char *tacsim_version(void);

// Create an interactive session with the built-in robot and task.
// `mode` is one of "V", "PH", "P", "S", "C", "TB", "RIK"; `tick_hz` 50 or 100.
//
// # Safety
// `mode` must be a valid NUL-terminated string and `out` a valid pointer.
enum TacsimStatus tacsim_session_new(const char *mode,
                                     uint64_t seed,
                                     uint32_t tick_hz,
                                     struct TacsimSession **out);

// Release a session. Null is ignored.
//
// # Safety
// `session` must come from [`tacsim_session_new`] and not be used afterwards.
void tacsim_session_free(struct TacsimSession *session);

// Advance one tick with `frame`; `snapshot` may be null.
//
// # Safety
// Pointers must be valid; `snapshot` may be null.
enum TacsimStatus tacsim_session_tick(struct TacsimSession *session,
                                      const struct TacsimControlFrame *frame,
                                      struct TacsimSnapshot *snapshot);

// Current state without advancing.
//
// # Safety
// Pointers must be valid.
enum TacsimStatus tacsim_session_snapshot(struct TacsimSession *session,
                                          struct TacsimSnapshot *snapshot);

// Full current state as JSON. Free the string with [`tacsim_string_free`].
//
// # Safety
// Pointers must be valid.
enum TacsimStatus tacsim_session_snapshot_json(struct TacsimSession *session, char **out);

// Switch coordination mode; applies from the next tick and is logged.
//
// # Safety
// Pointers must be valid.
enum TacsimStatus tacsim_session_switch_mode(struct TacsimSession *session, const char *mode);

// Metrics of the trial so far (partial until the task is done).
//
// # Safety
// Pointers must be valid.
enum TacsimStatus tacsim_session_metrics(struct TacsimSession *session, struct TacsimMetrics *out);

// Write the trial log (gzip when the path ends in `.gz`) and, if
// `trace_path` is not null, the input trace.
//
// # Safety
// `session` and `log_path` must be valid; `trace_path` may be null.
enum TacsimStatus tacsim_session_save(struct TacsimSession *session,
                                      const char *log_path,
                                      const char *trace_path);

// Run one headless trial with the reference synthetic operator.
//
// # Safety
// `mode` must be a valid string and `out` a valid pointer.
enum TacsimStatus tacsim_run_trial(const char *mode,
                                   uint64_t seed,
                                   uint32_t tick_hz,
                                   struct TacsimMetrics *out);

// Kruskal-Wallis test. `values` holds the groups back to back;
// `group_sizes[i]` is the length of group `i`.
//
// # Safety
// `values` must hold the sum of `group_sizes` doubles; outputs must be valid.
enum TacsimStatus tacsim_kruskal_wallis(const double *values,
                                        const size_t *group_sizes,
                                        size_t n_groups,
                                        double *h,
                                        double *p);

// Free a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void tacsim_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TACSIM_H */
