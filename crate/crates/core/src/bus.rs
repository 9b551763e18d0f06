//! Byte-level simulated servo bus.
//!
//! Frame layout: `[0xA5][id][length][opcode][payload..][crc_hi][crc_lo]` where
//! `length = payload.len() + 1` and the CRC-16/CCITT-FALSE covers
//! `id..payload` inclusive.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::robot::{step_servo, JointSpec, RobotModel, ServoState};

pub const SYNC: u8 = 0xA5;
pub const BROADCAST_ID: u8 = 0xFE;
pub const MAX_PAYLOAD: usize = 250;

/// Bytes outside the payload: sync, id, length, opcode, crc(2).
pub const FRAME_OVERHEAD: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Ping,
    ReadPos,
    WriteGoal,
    Torque,
    ReadCurrent,
    SyncWrite,
    Reply,
    Error,
    /// Any byte not assigned above. Kept so that decode stays lossless.
    Other(u8),
}

impl Opcode {
    pub fn to_byte(self) -> u8 {
        match self {
            Opcode::Ping => 0x01,
            Opcode::ReadPos => 0x02,
            Opcode::WriteGoal => 0x03,
            Opcode::Torque => 0x04,
            Opcode::ReadCurrent => 0x05,
            Opcode::SyncWrite => 0x06,
            Opcode::Reply => 0x81,
            Opcode::Error => 0xFF,
            Opcode::Other(b) => b,
        }
    }

    pub fn from_byte(b: u8) -> Self {
        match b {
            0x01 => Opcode::Ping,
            0x02 => Opcode::ReadPos,
            0x03 => Opcode::WriteGoal,
            0x04 => Opcode::Torque,
            0x05 => Opcode::ReadCurrent,
            0x06 => Opcode::SyncWrite,
            0x81 => Opcode::Reply,
            0xFF => Opcode::Error,
            other => Opcode::Other(other),
        }
    }
}

/// Error codes carried in the payload of an `ERROR` reply.
pub mod error_code {
    pub const UNKNOWN_OPCODE: u8 = 0x01;
    pub const BAD_PAYLOAD: u8 = 0x02;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusFrame {
    pub id: u8,
    pub opcode: Opcode,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    PayloadTooLong(usize),
    #[error("bad sync byte 0x{0:02X}")]
    BadSync(u8),
    #[error("length mismatch: frame needs {needed} bytes, {available} available")]
    LengthMismatch { needed: usize, available: usize },
    #[error("crc mismatch: computed 0x{computed:04X}, frame carries 0x{received:04X}")]
    CrcMismatch { computed: u16, received: u16 },
}

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no final xor.
pub fn crc16_ccitt_false(bytes: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &b in bytes {
        crc ^= (b as u16) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ 0x1021
            } else {
                crc << 1
            };
        }
    }
    crc
}

impl BusFrame {
    pub fn new(id: u8, opcode: Opcode, payload: Vec<u8>) -> Self {
        Self { id, opcode, payload }
    }

    pub fn ping(id: u8) -> Self {
        Self::new(id, Opcode::Ping, vec![])
    }

    pub fn read_pos(id: u8) -> Self {
        Self::new(id, Opcode::ReadPos, vec![])
    }

    pub fn read_current(id: u8) -> Self {
        Self::new(id, Opcode::ReadCurrent, vec![])
    }

    pub fn write_goal(id: u8, radians: f64) -> Self {
        Self::new(id, Opcode::WriteGoal, encode_angle(radians).to_vec())
    }

    pub fn torque(id: u8, enabled: bool) -> Self {
        Self::new(id, Opcode::Torque, vec![enabled as u8])
    }

    /// Broadcast goal update for several servos at once.
    pub fn sync_write(goals: &[(u8, f64)]) -> Self {
        let mut payload = Vec::with_capacity(goals.len() * 3);
        for &(id, radians) in goals {
            payload.push(id);
            payload.extend_from_slice(&encode_angle(radians));
        }
        Self::new(BROADCAST_ID, Opcode::SyncWrite, payload)
    }

    pub fn is_broadcast(&self) -> bool {
        self.id == BROADCAST_ID
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        encode_frame(self)
    }
}

pub fn encode_frame(frame: &BusFrame) -> Result<Vec<u8>, FrameError> {
    if frame.payload.len() > MAX_PAYLOAD {
        return Err(FrameError::PayloadTooLong(frame.payload.len()));
    }
    let mut out = Vec::with_capacity(frame.payload.len() + FRAME_OVERHEAD);
    out.push(SYNC);
    out.push(frame.id);
    out.push(frame.payload.len() as u8 + 1);
    out.push(frame.opcode.to_byte());
    out.extend_from_slice(&frame.payload);
    let crc = crc16_ccitt_false(&out[1..]);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

/// Parses one frame from the front of `bytes`, returning it with the unread remainder.
pub fn decode_frame(bytes: &[u8]) -> Result<(BusFrame, &[u8]), FrameError> {
    let header = 3;
    if bytes.is_empty() {
        return Err(FrameError::LengthMismatch {
            needed: FRAME_OVERHEAD,
            available: 0,
        });
    }
    if bytes[0] != SYNC {
        return Err(FrameError::BadSync(bytes[0]));
    }
    if bytes.len() < header {
        return Err(FrameError::LengthMismatch {
            needed: FRAME_OVERHEAD,
            available: bytes.len(),
        });
    }
    let length = bytes[2] as usize;
    if length == 0 || length > MAX_PAYLOAD + 1 {
        return Err(FrameError::LengthMismatch {
            needed: header + length.max(1) + 2,
            available: bytes.len(),
        });
    }
    let total = header + length + 2;
    if bytes.len() < total {
        return Err(FrameError::LengthMismatch {
            needed: total,
            available: bytes.len(),
        });
    }
    let body = &bytes[1..header + length];
    let computed = crc16_ccitt_false(body);
    let received = u16::from_be_bytes([bytes[total - 2], bytes[total - 1]]);
    if computed != received {
        return Err(FrameError::CrcMismatch { computed, received });
    }
    let frame = BusFrame {
        id: bytes[1],
        opcode: Opcode::from_byte(bytes[3]),
        payload: bytes[4..header + length].to_vec(),
    };
    Ok((frame, &bytes[total..]))
}

/// Radians to the wire's signed 16-bit millirad, little-endian. Saturates.
pub fn encode_angle(radians: f64) -> [u8; 2] {
    let milli = (radians * 1000.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
    milli.to_le_bytes()
}

pub fn decode_angle(bytes: [u8; 2]) -> f64 {
    i16::from_le_bytes(bytes) as f64 / 1000.0
}

pub fn quantize_angle(radians: f64) -> f64 {
    decode_angle(encode_angle(radians))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Tx,
    Rx,
}

impl Direction {
    fn as_str(self) -> &'static str {
        match self {
            Direction::Tx => "tx",
            Direction::Rx => "rx",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub time: f64,
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

impl LogEntry {
    /// `<t> <dir> <hex>`
    pub fn hex_line(&self) -> String {
        let mut hex = String::with_capacity(self.bytes.len() * 3);
        for (i, b) in self.bytes.iter().enumerate() {
            if i > 0 {
                hex.push(' ');
            }
            let _ = write!(hex, "{b:02X}");
        }
        format!("{:.4} {} {}", self.time, self.direction.as_str(), hex)
    }
}

#[derive(Debug, Clone)]
struct Servo {
    spec: JointSpec,
    state: ServoState,
}

/// Daisy chain of simulated servos. Every `transact` is one bus tick.
#[derive(Debug, Clone)]
pub struct SimBus {
    servos: BTreeMap<u8, Servo>,
    log: Vec<LogEntry>,
    logging: bool,
    time: f64,
}

impl SimBus {
    /// All servos of `model`, holding their home pose with torque on.
    pub fn new(model: &RobotModel) -> Self {
        Self::from_joints(model.joints().iter().cloned())
    }

    pub fn from_joints(joints: impl IntoIterator<Item = JointSpec>) -> Self {
        let servos = joints
            .into_iter()
            .map(|spec| {
                let state = ServoState::holding(spec.clamp(0.0));
                (spec.id, Servo { spec, state })
            })
            .collect();
        Self {
            servos,
            log: Vec::new(),
            logging: true,
            time: 0.0,
        }
    }

    pub fn set_logging(&mut self, on: bool) {
        self.logging = on;
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn ids(&self) -> impl Iterator<Item = u8> + '_ {
        self.servos.keys().copied()
    }

    pub fn state(&self, id: u8) -> Option<ServoState> {
        self.servos.get(&id).map(|s| s.state)
    }

    pub fn spec(&self, id: u8) -> Option<&JointSpec> {
        self.servos.get(&id).map(|s| &s.spec)
    }

    pub fn torque_enabled(&self, id: u8) -> Option<bool> {
        self.servos.get(&id).map(|s| s.state.torque_enabled)
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn clear_log(&mut self) {
        self.log.clear();
    }

    pub fn hex_dump(&self) -> String {
        let mut out = String::new();
        for entry in &self.log {
            out.push_str(&entry.hex_line());
            out.push('\n');
        }
        out
    }

    /// Puppet interface: an external hand moves a limp joint. Ignored while the
    /// servo holds torque. Returns whether the shaft moved.
    pub fn apply_external(&mut self, id: u8, position: f64) -> bool {
        match self.servos.get_mut(&id) {
            Some(servo) if !servo.state.torque_enabled => {
                servo.state.position = servo.spec.clamp(position);
                true
            }
            _ => false,
        }
    }

    /// Advances every servo without bus traffic.
    pub fn tick(&mut self, dt: f64) {
        if dt <= 0.0 {
            return;
        }
        for servo in self.servos.values_mut() {
            servo.state = step_servo(&servo.spec, &servo.state, dt);
        }
        self.time += dt;
    }

    /// Sends `frame`, executes it, advances the bus by `dt`, and returns the
    /// reply if the addressed servo answers.
    pub fn transact(&mut self, frame: &BusFrame, dt: f64) -> Option<BusFrame> {
        if self.logging {
            if let Ok(bytes) = encode_frame(frame) {
                self.log.push(LogEntry {
                    time: self.time,
                    direction: Direction::Tx,
                    bytes,
                });
            }
        }
        let reply = self.execute(frame);
        if let (true, Some(reply)) = (self.logging, &reply) {
            self.log.push(LogEntry {
                time: self.time,
                direction: Direction::Rx,
                bytes: encode_frame(reply).expect("replies are short"),
            });
        }
        self.tick(dt);
        reply
    }

    /// Wire-level entry: decode, transact, encode the reply.
    pub fn transact_bytes(&mut self, bytes: &[u8], dt: f64) -> Result<Option<Vec<u8>>, FrameError> {
        let (frame, _) = decode_frame(bytes)?;
        Ok(self
            .transact(&frame, dt)
            .map(|reply| encode_frame(&reply).expect("replies are short")))
    }

    fn execute(&mut self, frame: &BusFrame) -> Option<BusFrame> {
        if frame.is_broadcast() {
            match frame.opcode {
                Opcode::Torque if frame.payload.len() == 1 => {
                    let on = frame.payload[0] != 0;
                    for servo in self.servos.values_mut() {
                        set_torque(servo, on);
                    }
                }
                Opcode::WriteGoal if frame.payload.len() == 2 => {
                    let goal = decode_angle([frame.payload[0], frame.payload[1]]);
                    for servo in self.servos.values_mut() {
                        servo.state.goal = servo.spec.clamp(goal);
                    }
                }
                Opcode::SyncWrite => self.apply_sync_write(&frame.payload),
                _ => {}
            }
            return None;
        }

        let id = frame.id;
        let servo = self.servos.get_mut(&id)?;
        let reply = |payload: Vec<u8>| Some(BusFrame::new(id, Opcode::Reply, payload));
        let error = |code: u8| Some(BusFrame::new(id, Opcode::Error, vec![code]));
        match frame.opcode {
            Opcode::Ping => reply(vec![]),
            Opcode::ReadPos => reply(encode_angle(servo.state.position).to_vec()),
            Opcode::ReadCurrent => {
                let milliamps = (servo.state.current_estimate * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16;
                reply(milliamps.to_le_bytes().to_vec())
            }
            Opcode::WriteGoal => match frame.payload.as_slice() {
                &[lo, hi] => {
                    servo.state.goal = servo.spec.clamp(decode_angle([lo, hi]));
                    reply(vec![])
                }
                _ => error(error_code::BAD_PAYLOAD),
            },
            Opcode::Torque => match frame.payload.as_slice() {
                &[flag] if flag <= 1 => {
                    set_torque(servo, flag == 1);
                    reply(vec![])
                }
                _ => error(error_code::BAD_PAYLOAD),
            },
            Opcode::SyncWrite => {
                self.apply_sync_write(&frame.payload);
                None
            }
            Opcode::Reply | Opcode::Error | Opcode::Other(_) => error(error_code::UNKNOWN_OPCODE),
        }
    }

    fn apply_sync_write(&mut self, payload: &[u8]) {
        if payload.len() % 3 != 0 {
            return;
        }
        for chunk in payload.chunks_exact(3) {
            if let Some(servo) = self.servos.get_mut(&chunk[0]) {
                servo.state.goal = servo.spec.clamp(decode_angle([chunk[1], chunk[2]]));
            }
        }
    }
}

fn set_torque(servo: &mut Servo, on: bool) {
    if on && !servo.state.torque_enabled {
        // Re-engaging holds wherever the limb was left.
        servo.state.goal = servo.state.position;
    }
    servo.state.torque_enabled = on;
    if !on {
        servo.state.current_estimate = 0.0;
    }
}

/// Reads a joint position over the wire. `None` means the servo timed out.
pub fn read_position(bus: &mut SimBus, id: u8, dt: f64) -> Option<f64> {
    let reply = bus.transact(&BusFrame::read_pos(id), dt)?;
    match (reply.opcode, reply.payload.as_slice()) {
        (Opcode::Reply, &[lo, hi]) => Some(decode_angle([lo, hi])),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot::default_model;
    use proptest::prelude::*;

    #[test]
    fn crc_check_value() {
        assert_eq!(crc16_ccitt_false(b"123456789"), 0x29B1);
    }

    #[test]
    fn ping_layout() {
        let bytes = encode_frame(&BusFrame::ping(3)).unwrap();
        let crc = crc16_ccitt_false(&[0x03, 0x01, 0x01]);
        assert_eq!(bytes, vec![0xA5, 0x03, 0x01, 0x01, (crc >> 8) as u8, crc as u8]);
    }

    #[test]
    fn write_goal_layout() {
        // 1.234 rad -> 1234 millirad = 0x04D2, little-endian D2 04
        let bytes = encode_frame(&BusFrame::write_goal(5, 1.234)).unwrap();
        assert_eq!(&bytes[..6], &[0xA5, 0x05, 0x03, 0x03, 0xD2, 0x04]);
        let crc = crc16_ccitt_false(&[0x05, 0x03, 0x03, 0xD2, 0x04]);
        assert_eq!(&bytes[6..], &crc.to_be_bytes());
        let neg = encode_frame(&BusFrame::write_goal(5, -0.001)).unwrap();
        assert_eq!(&neg[4..6], &[0xFF, 0xFF]);
    }

    #[test]
    fn decode_reports_remainder() {
        let mut bytes = encode_frame(&BusFrame::ping(9)).unwrap();
        bytes.extend_from_slice(&[1, 2, 3]);
        let (frame, rest) = decode_frame(&bytes).unwrap();
        assert_eq!(frame, BusFrame::ping(9));
        assert_eq!(rest, &[1, 2, 3]);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let good = encode_frame(&BusFrame::write_goal(5, 0.5)).unwrap();
        let mut bad_sync = good.clone();
        bad_sync[0] = 0x5A;
        assert_eq!(decode_frame(&bad_sync).unwrap_err(), FrameError::BadSync(0x5A));
        for cut in 0..good.len() {
            match decode_frame(&good[..cut]) {
                Err(FrameError::LengthMismatch { .. }) => {}
                other => panic!("truncation at {cut}: {other:?}"),
            }
        }
        let mut bad_crc = good.clone();
        *bad_crc.last_mut().unwrap() ^= 1;
        assert!(matches!(decode_frame(&bad_crc), Err(FrameError::CrcMismatch { .. })));
        assert_eq!(
            encode_frame(&BusFrame::new(1, Opcode::SyncWrite, vec![0; 251])),
            Err(FrameError::PayloadTooLong(251))
        );
    }

    #[test]
    fn single_bit_flips_in_body_are_detected() {
        let frame = BusFrame::new(0x11, Opcode::SyncWrite, (0u8..30).collect());
        let good = encode_frame(&frame).unwrap();
        for byte in 1..good.len() - 2 {
            for bit in 0..8 {
                let mut corrupt = good.clone();
                corrupt[byte] ^= 1 << bit;
                let result = decode_frame(&corrupt);
                if byte == 2 {
                    // A corrupted length byte either overruns the buffer or shifts the crc.
                    assert!(matches!(
                        result,
                        Err(FrameError::LengthMismatch { .. } | FrameError::CrcMismatch { .. })
                    ));
                } else {
                    assert!(
                        matches!(result, Err(FrameError::CrcMismatch { .. })),
                        "flip byte {byte} bit {bit}: {result:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn angle_quantization_bound() {
        for i in 0..2000 {
            let a = -3.0 + i as f64 * 0.003_001;
            assert!((quantize_angle(a) - a).abs() <= 0.0005 + 1e-12);
        }
    }

    #[test]
    fn torque_off_then_puppet_moves_are_read_back() {
        let model = default_model();
        let mut bus = SimBus::new(&model);
        assert_eq!(bus.transact(&BusFrame::torque(BROADCAST_ID, false), 0.01), None);
        for id in 1..=17u8 {
            assert!(bus.apply_external(id, 0.3));
        }
        for _ in 0..10 {
            bus.tick(0.02);
        }
        for id in 1..=17u8 {
            let spec = model.joint_by_id(id).unwrap();
            let read = read_position(&mut bus, id, 0.01).unwrap();
            assert!((read - spec.clamp(0.3)).abs() <= 0.0005);
        }
    }

    #[test]
    fn torque_on_ignores_puppet() {
        let model = default_model();
        let mut bus = SimBus::new(&model);
        assert!(!bus.apply_external(1, 0.5));
        assert_eq!(read_position(&mut bus, 1, 0.01), Some(0.0));
    }

    #[test]
    fn write_goal_converges() {
        let model = default_model();
        let mut bus = SimBus::new(&model);
        let reply = bus.transact(&BusFrame::write_goal(7, -1.0), 0.02).unwrap();
        assert_eq!(reply.opcode, Opcode::Reply);
        for _ in 0..200 {
            bus.transact(&BusFrame::ping(7), 0.02);
        }
        assert!((read_position(&mut bus, 7, 0.02).unwrap() + 1.0).abs() <= 0.0005);
        let current = bus.transact(&BusFrame::read_current(7), 0.02).unwrap();
        assert_eq!(current.payload, vec![0, 0]);
    }

    #[test]
    fn current_reflects_tracking_error() {
        let model = default_model();
        let mut bus = SimBus::new(&model);
        bus.transact(&BusFrame::write_goal(1, 1.0), 0.02);
        let reply = bus.transact(&BusFrame::read_current(1), 0.0001).unwrap();
        let milliamps = u16::from_le_bytes([reply.payload[0], reply.payload[1]]);
        let position = bus.state(1).unwrap().position;
        let expected = (0.5 * (1.0 - position)).min(2.3);
        assert!((milliamps as f64 / 1000.0 - expected).abs() < 0.002);
    }

    #[test]
    fn unknown_id_times_out_and_unknown_opcode_errors() {
        let model = default_model();
        let mut bus = SimBus::new(&model);
        assert_eq!(bus.transact(&BusFrame::read_pos(0x77), 0.01), None);
        let reply = bus.transact(&BusFrame::new(2, Opcode::Other(0x42), vec![]), 0.01).unwrap();
        assert_eq!(reply.opcode, Opcode::Error);
        assert_eq!(reply.payload, vec![error_code::UNKNOWN_OPCODE]);
        assert_eq!(bus.transact(&BusFrame::new(BROADCAST_ID, Opcode::Other(0x42), vec![]), 0.01), None);
        let bad = bus.transact(&BusFrame::new(2, Opcode::WriteGoal, vec![1]), 0.01).unwrap();
        assert_eq!(bad.payload, vec![error_code::BAD_PAYLOAD]);
    }

    #[test]
    fn sync_write_matches_individual_writes() {
        let model = default_model();
        let goals: Vec<(u8, f64)> = (1..=17u8).map(|id| (id, 0.05 * id as f64 - 0.4)).collect();
        let mut a = SimBus::new(&model);
        let mut b = SimBus::new(&model);
        assert_eq!(a.transact(&BusFrame::sync_write(&goals), 0.02), None);
        for &(id, goal) in &goals {
            let frame = BusFrame::write_goal(id, goal);
            b.execute(&frame);
        }
        b.tick(0.02);
        for id in 1..=17u8 {
            assert_eq!(a.state(id), b.state(id));
        }
    }

    #[test]
    fn hex_log_lines() {
        let model = default_model();
        let mut bus = SimBus::new(&model);
        bus.transact(&BusFrame::ping(3), 0.02);
        let dump = bus.hex_dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("0.0000 tx A5 03 01 01 "));
        assert!(lines[1].starts_with("0.0000 rx A5 03 01 81 "));
    }

    fn arb_frame() -> impl Strategy<Value = BusFrame> {
        (any::<u8>(), any::<u8>(), proptest::collection::vec(any::<u8>(), 0..=MAX_PAYLOAD))
            .prop_map(|(id, op, payload)| BusFrame::new(id, Opcode::from_byte(op), payload))
    }

    proptest! {
        #[test]
        fn round_trip(frame in arb_frame()) {
            let bytes = encode_frame(&frame).unwrap();
            let (back, rest) = decode_frame(&bytes).unwrap();
            prop_assert_eq!(back, frame);
            prop_assert!(rest.is_empty());
        }

        #[test]
        fn opcode_byte_round_trip(b in any::<u8>()) {
            prop_assert_eq!(Opcode::from_byte(b).to_byte(), b);
        }
    }
}
