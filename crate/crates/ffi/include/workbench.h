#ifndef WORKBENCH_H
#define WORKBENCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum {
  WB_STATUS_OK = 0,
  WB_STATUS_NULL_POINTER = 1,
  WB_STATUS_INVALID_ARGUMENT = 2,
  WB_STATUS_MODEL = 3,
  WB_STATUS_FRAME = 4,
  WB_STATUS_NETWORK = 5,
  WB_STATUS_BUFFER_TOO_SMALL = 6,
  WB_STATUS_PANIC = 7,
} WbStatus;

// Simulated servo bus handle.
typedef struct WbBus WbBus;

// Robot model handle.
typedef struct WbModel WbModel;

// Trained policy network handle.
typedef struct WbNetwork WbNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *wb_last_error(void);

// Creates the built-in 17-joint model.
//
// # Safety
// `out` must be writable.
WbStatus wb_model_default(WbModel **out);

// Loads a model description file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
WbStatus wb_model_load(const char *path, WbModel **out);

// # Safety
// `model` must be null or a handle from this library, not yet freed.
void wb_model_free(WbModel *model);

// Number of joints in the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t wb_model_joint_count(const WbModel *model);

// Tip pose of `chain` at `angles`: position in metres into `out_position[3]`
// and orientation as `w, x, y, z` into `out_orientation[4]`.
//
// # Safety
// `model` must be a live handle, `chain` a NUL-terminated string, `angles`
// readable for `n_angles` values, and both outputs writable.
WbStatus wb_model_forward_kinematics(const WbModel *model,
                                     const char *chain,
                                     const double *angles,
                                     size_t n_angles,
                                     double *out_position,
                                     double *out_orientation);

// Encodes one bus frame. `out_len` receives the encoded size even when the
// buffer is too small.
//
// # Safety
// `payload` must be readable for `payload_len` bytes, `out` writable for
// `out_cap` bytes, `out_len` writable.
WbStatus wb_frame_encode(uint8_t id,
                         uint8_t opcode,
                         const uint8_t *payload,
                         size_t payload_len,
                         uint8_t *out,
                         size_t out_cap,
                         size_t *out_len);

// Decodes the first frame in `bytes`. `out_consumed` receives the number of
// bytes the frame occupied.
//
// # Safety
// `bytes` must be readable for `len` bytes; every output pointer writable,
// `out_payload` for `payload_cap` bytes.
WbStatus wb_frame_decode(const uint8_t *bytes,
                         size_t len,
                         uint8_t *out_id,
                         uint8_t *out_opcode,
                         uint8_t *out_payload,
                         size_t payload_cap,
                         size_t *out_payload_len,
                         size_t *out_consumed);

// Creates a simulated bus with one servo per model joint, torque on.
//
// # Safety
// `model` must be a live handle and `out` writable.
WbStatus wb_bus_new(const WbModel *model, WbBus **out);

// # Safety
// `bus` must be null or a live handle.
void wb_bus_free(WbBus *bus);

// Sends one encoded frame, advances the simulation by `dt` seconds and
// copies any reply frame into `reply`. `reply_len` is 0 when nothing answers.
//
// # Safety
// `bus` must be a live handle, `bytes` readable for `len` bytes, `reply`
// writable for `reply_cap` bytes, `reply_len` writable.
WbStatus wb_bus_transact(WbBus *bus,
                         const uint8_t *bytes,
                         size_t len,
                         double dt,
                         uint8_t *reply,
                         size_t reply_cap,
                         size_t *reply_len);

// Moves a joint from outside. Only limp (torque-off) joints follow;
// `out_moved` reports whether this one did.
//
// # Safety
// `bus` must be a live handle; `out_moved` null or writable.
WbStatus wb_bus_apply_external(WbBus *bus, uint8_t id, double position, bool *out_moved);

// Advances the simulation without bus traffic.
//
// # Safety
// `bus` must be a live handle.
WbStatus wb_bus_tick(WbBus *bus, double dt);

// Loads a trained network checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
WbStatus wb_network_load(const char *path, WbNetwork **out);

// # Safety
// `net` must be null or a live handle.
void wb_network_free(WbNetwork *net);

// Width of one input/output vector, or 0 for a null handle.
//
// # Safety
// `net` must be null or a live handle.
size_t wb_network_io_size(const WbNetwork *net);

// Number of trained sequences, or 0 for a null handle.
//
// # Safety
// `net` must be null or a live handle.
size_t wb_network_sequence_count(const WbNetwork *net);

// Closed-loop generation from trained sequence `sequence`'s initial context
// and `posture` (io_size values in [-1, 1]). Writes `steps * io_size`
// values, row by row, into `out`.
//
// # Safety
// `net` must be a live handle, `posture` readable for `posture_len` values,
// `out` writable for `out_cap` values, `out_len` null or writable.
WbStatus wb_network_generate(const WbNetwork *net,
                             size_t sequence,
                             const double *posture,
                             size_t posture_len,
                             size_t steps,
                             double *out,
                             size_t out_cap,
                             size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WORKBENCH_H */
