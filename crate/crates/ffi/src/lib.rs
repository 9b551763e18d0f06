//! C ABI over the workbench core.
//!
//! Objects are opaque handles created by `*_new`/`*_load`/`*_default` and
//! released with the matching `*_free`. Every fallible call returns a
//! [`WbStatus`]; on failure a message is available from [`wb_last_error`]
//! on the same thread until the next failing call.
//!
//! Output buffers are caller-owned. Calls that fill a buffer take its
//! capacity and report the length they needed, so a too-small buffer yields
//! `WB_STATUS_BUFFER_TOO_SMALL` with the required size written out.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use workbench::bus::{decode_frame, encode_frame, BusFrame, Opcode, SimBus};
use workbench::mtrnn::{ContextSource, MtrnnNetwork};
use workbench::robot::{default_model, forward_kinematics, RobotModel};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Model = 3,
    Frame = 4,
    Network = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Robot model handle.
pub struct WbModel(RobotModel);

/// Simulated servo bus handle.
pub struct WbBus(SimBus);

/// Trained policy network handle.
pub struct WbNetwork(MtrnnNetwork);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    let c = CString::new(text).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: WbStatus, message: impl Into<String>) -> WbStatus {
    set_error(message);
    status
}

/// Runs `f`, converting panics into `WB_STATUS_PANIC`.
fn guard(f: impl FnOnce() -> WbStatus) -> WbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(WbStatus::Panic, message)
        }
    }
}

/// # Safety
/// `ptr` must be null or point to `len` readable elements.
unsafe fn slice<'a, T>(ptr: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string.
unsafe fn string<'a>(ptr: *const c_char) -> Result<&'a str, WbStatus> {
    if ptr.is_null() {
        return Err(fail(WbStatus::NullPointer, "string argument is null"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|e| fail(WbStatus::InvalidArgument, format!("string is not UTF-8: {e}")))
}

/// Copies `data` into a caller buffer, always reporting the needed length.
///
/// # Safety
/// `out` must be null or point to `cap` writable elements; `out_len` must be
/// null or writable.
unsafe fn fill<T: Copy>(data: &[T], out: *mut T, cap: usize, out_len: *mut usize) -> WbStatus {
    if !out_len.is_null() {
        *out_len = data.len();
    }
    if data.len() > cap {
        return fail(
            WbStatus::BufferTooSmall,
            format!("buffer holds {cap} elements, {} needed", data.len()),
        );
    }
    if !data.is_empty() {
        if out.is_null() {
            return fail(WbStatus::NullPointer, "output buffer is null");
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    }
    WbStatus::Ok
}

/// Message describing the last failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates the built-in 17-joint model.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wb_model_default(out: *mut *mut WbModel) -> WbStatus {
    guard(|| {
        if out.is_null() {
            return fail(WbStatus::NullPointer, "out is null");
        }
        *out = Box::into_raw(Box::new(WbModel(default_model())));
        WbStatus::Ok
    })
}

/// Loads a model description file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wb_model_load(path: *const c_char, out: *mut *mut WbModel) -> WbStatus {
    guard(|| {
        if out.is_null() {
            return fail(WbStatus::NullPointer, "out is null");
        }
        let path = match string(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match RobotModel::load(path) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(WbModel(m)));
                WbStatus::Ok
            }
            Err(e) => fail(WbStatus::Model, e.to_string()),
        }
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn wb_model_free(model: *mut WbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of joints in the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wb_model_joint_count(model: *const WbModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.joints().len())
}

/// Tip pose of `chain` at `angles`: position in metres into `out_position[3]`
/// and orientation as `w, x, y, z` into `out_orientation[4]`.
///
/// # Safety
/// `model` must be a live handle, `chain` a NUL-terminated string, `angles`
/// readable for `n_angles` values, and both outputs writable.
#[no_mangle]
pub unsafe extern "C" fn wb_model_forward_kinematics(
    model: *const WbModel,
    chain: *const c_char,
    angles: *const f64,
    n_angles: usize,
    out_position: *mut f64,
    out_orientation: *mut f64,
) -> WbStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            return fail(WbStatus::NullPointer, "model is null");
        };
        let chain = match string(chain) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let Some(angles) = slice(angles, n_angles) else {
            return fail(WbStatus::NullPointer, "angles is null");
        };
        if out_position.is_null() || out_orientation.is_null() {
            return fail(WbStatus::NullPointer, "output is null");
        }
        match forward_kinematics(&model.0, chain, angles) {
            Ok(pose) => {
                let p = pose.position;
                let q = pose.orientation.quaternion();
                ptr::copy_nonoverlapping([p.x, p.y, p.z].as_ptr(), out_position, 3);
                ptr::copy_nonoverlapping([q.w, q.i, q.j, q.k].as_ptr(), out_orientation, 4);
                WbStatus::Ok
            }
            Err(e) => fail(WbStatus::Model, e.to_string()),
        }
    })
}

/// Encodes one bus frame. `out_len` receives the encoded size even when the
/// buffer is too small.
///
/// # Safety
/// `payload` must be readable for `payload_len` bytes, `out` writable for
/// `out_cap` bytes, `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn wb_frame_encode(
    id: u8,
    opcode: u8,
    payload: *const u8,
    payload_len: usize,
    out: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
) -> WbStatus {
    guard(|| {
        let Some(payload) = slice(payload, payload_len) else {
            return fail(WbStatus::NullPointer, "payload is null");
        };
        let frame = BusFrame::new(id, Opcode::from_byte(opcode), payload.to_vec());
        match encode_frame(&frame) {
            Ok(bytes) => fill(&bytes, out, out_cap, out_len),
            Err(e) => fail(WbStatus::Frame, e.to_string()),
        }
    })
}

/// Decodes the first frame in `bytes`. `out_consumed` receives the number of
/// bytes the frame occupied.
///
/// # Safety
/// `bytes` must be readable for `len` bytes; every output pointer writable,
/// `out_payload` for `payload_cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn wb_frame_decode(
    bytes: *const u8,
    len: usize,
    out_id: *mut u8,
    out_opcode: *mut u8,
    out_payload: *mut u8,
    payload_cap: usize,
    out_payload_len: *mut usize,
    out_consumed: *mut usize,
) -> WbStatus {
    guard(|| {
        let Some(input) = slice(bytes, len) else {
            return fail(WbStatus::NullPointer, "bytes is null");
        };
        if out_id.is_null() || out_opcode.is_null() || out_consumed.is_null() {
            return fail(WbStatus::NullPointer, "output is null");
        }
        match decode_frame(input) {
            Ok((frame, rest)) => {
                *out_id = frame.id;
                *out_opcode = frame.opcode.to_byte();
                *out_consumed = input.len() - rest.len();
                fill(&frame.payload, out_payload, payload_cap, out_payload_len)
            }
            Err(e) => fail(WbStatus::Frame, e.to_string()),
        }
    })
}

/// Creates a simulated bus with one servo per model joint, torque on.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wb_bus_new(model: *const WbModel, out: *mut *mut WbBus) -> WbStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            return fail(WbStatus::NullPointer, "model is null");
        };
        if out.is_null() {
            return fail(WbStatus::NullPointer, "out is null");
        }
        *out = Box::into_raw(Box::new(WbBus(SimBus::new(&model.0))));
        WbStatus::Ok
    })
}

/// # Safety
/// `bus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wb_bus_free(bus: *mut WbBus) {
    if !bus.is_null() {
        drop(Box::from_raw(bus));
    }
}

/// Sends one encoded frame, advances the simulation by `dt` seconds and
/// copies any reply frame into `reply`. `reply_len` is 0 when nothing answers.
///
/// # Safety
/// `bus` must be a live handle, `bytes` readable for `len` bytes, `reply`
/// writable for `reply_cap` bytes, `reply_len` writable.
#[no_mangle]
pub unsafe extern "C" fn wb_bus_transact(
    bus: *mut WbBus,
    bytes: *const u8,
    len: usize,
    dt: f64,
    reply: *mut u8,
    reply_cap: usize,
    reply_len: *mut usize,
) -> WbStatus {
    guard(|| {
        let Some(bus) = bus.as_mut() else {
            return fail(WbStatus::NullPointer, "bus is null");
        };
        let Some(input) = slice(bytes, len) else {
            return fail(WbStatus::NullPointer, "bytes is null");
        };
        if !(dt >= 0.0 && dt.is_finite()) {
            return fail(WbStatus::InvalidArgument, format!("dt must be finite and non-negative, got {dt}"));
        }
        match bus.0.transact_bytes(input, dt) {
            Ok(Some(answer)) => fill(&answer, reply, reply_cap, reply_len),
            Ok(None) => fill(&[], reply, reply_cap, reply_len),
            Err(e) => fail(WbStatus::Frame, e.to_string()),
        }
    })
}

/// Moves a joint from outside. Only limp (torque-off) joints follow;
/// `out_moved` reports whether this one did.
///
/// # Safety
/// `bus` must be a live handle; `out_moved` null or writable.
#[no_mangle]
pub unsafe extern "C" fn wb_bus_apply_external(bus: *mut WbBus, id: u8, position: f64, out_moved: *mut bool) -> WbStatus {
    guard(|| {
        let Some(bus) = bus.as_mut() else {
            return fail(WbStatus::NullPointer, "bus is null");
        };
        if bus.0.state(id).is_none() {
            return fail(WbStatus::InvalidArgument, format!("no servo with id {id}"));
        }
        let moved = bus.0.apply_external(id, position);
        if !out_moved.is_null() {
            *out_moved = moved;
        }
        WbStatus::Ok
    })
}

/// Advances the simulation without bus traffic.
///
/// # Safety
/// `bus` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wb_bus_tick(bus: *mut WbBus, dt: f64) -> WbStatus {
    guard(|| {
        let Some(bus) = bus.as_mut() else {
            return fail(WbStatus::NullPointer, "bus is null");
        };
        if !(dt >= 0.0 && dt.is_finite()) {
            return fail(WbStatus::InvalidArgument, format!("dt must be finite and non-negative, got {dt}"));
        }
        bus.0.tick(dt);
        WbStatus::Ok
    })
}

/// Loads a trained network checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wb_network_load(path: *const c_char, out: *mut *mut WbNetwork) -> WbStatus {
    guard(|| {
        if out.is_null() {
            return fail(WbStatus::NullPointer, "out is null");
        }
        let path = match string(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match MtrnnNetwork::load(path) {
            Ok(n) => {
                *out = Box::into_raw(Box::new(WbNetwork(n)));
                WbStatus::Ok
            }
            Err(e) => fail(WbStatus::Network, e.to_string()),
        }
    })
}

/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wb_network_free(net: *mut WbNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Width of one input/output vector, or 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wb_network_io_size(net: *const WbNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.0.config.n_io)
}

/// Number of trained sequences, or 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wb_network_sequence_count(net: *const WbNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.0.sequence_count())
}

/// Closed-loop generation from trained sequence `sequence`'s initial context
/// and `posture` (io_size values in [-1, 1]). Writes `steps * io_size`
/// values, row by row, into `out`.
///
/// # Safety
/// `net` must be a live handle, `posture` readable for `posture_len` values,
/// `out` writable for `out_cap` values, `out_len` null or writable.
#[no_mangle]
pub unsafe extern "C" fn wb_network_generate(
    net: *const WbNetwork,
    sequence: usize,
    posture: *const f64,
    posture_len: usize,
    steps: usize,
    out: *mut f64,
    out_cap: usize,
    out_len: *mut usize,
) -> WbStatus {
    guard(|| {
        let Some(net) = net.as_ref() else {
            return fail(WbStatus::NullPointer, "network is null");
        };
        let Some(posture) = slice(posture, posture_len) else {
            return fail(WbStatus::NullPointer, "posture is null");
        };
        let needed = steps.saturating_mul(net.0.config.n_io);
        if needed > out_cap {
            if !out_len.is_null() {
                *out_len = needed;
            }
            return fail(WbStatus::BufferTooSmall, format!("buffer holds {out_cap} values, {needed} needed"));
        }
        match net.0.generate(&ContextSource::Sequence(sequence), posture, steps) {
            Ok(rows) => {
                let flat: Vec<f64> = rows.into_iter().flatten().collect();
                fill(&flat, out, out_cap, out_len)
            }
            Err(e) => fail(WbStatus::Network, e.to_string()),
        }
    })
}
