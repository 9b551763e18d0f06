//! Demonstration capture.
//!
//! Kinesthetic teaching drops servo torque and polls encoders over the bus
//! while a [`PuppetSource`] moves the limp joints. End-effector recording
//! streams tip targets through the IK solver, warm-starting each tick from the
//! previous solution.

use std::path::Path;
use std::sync::mpsc::{Receiver, SyncSender, TryRecvError};

use log::warn;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionError, ActionSequence, CommandEvent, CommandKind, CommandVocabulary, JointFrame};
use crate::bus::{read_position, BusFrame, SimBus, BROADCAST_ID};
use crate::ik::{solve, IkConfig, IkError, IkObjective};
use crate::robot::{KinematicChain, ModelError, RobotModel, JOINT_COUNT};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("bus timeout reading joint `{joint}` (id {id}) at tick {tick}")]
    Timeout { joint: String, id: u8, tick: usize },
    #[error("invalid recording config: {0}")]
    Config(String),
    #[error("unknown joint `{0}`")]
    UnknownJoint(String),
    #[error("no end-effector targets given")]
    NoTargets,
    #[error("event at {time} s falls outside the recording (0..{duration} s)")]
    TimeOutOfRange { time: f64, duration: f64 },
    #[error("puppet file {path}: {message}")]
    PuppetFile { path: String, message: String },
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Ik(#[from] IkError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Externally imposed joint positions, indexed like the model's joints.
pub type PuppetPose = [Option<f64>; JOINT_COUNT];

/// Anything that moves the robot's limbs while torque is off.
pub trait PuppetSource {
    fn pose(&mut self, tick: usize, time: f64) -> PuppetPose;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "waveform", rename_all = "snake_case")]
pub enum Waveform {
    Const {
        value: f64,
    },
    Sine {
        #[serde(default)]
        offset: f64,
        amplitude: f64,
        freq_hz: f64,
        #[serde(default)]
        phase: f64,
    },
    Ramp {
        from: f64,
        to: f64,
        start_s: f64,
        end_s: f64,
    },
}

impl Waveform {
    pub fn sample(&self, t: f64) -> f64 {
        match *self {
            Waveform::Const { value } => value,
            Waveform::Sine {
                offset,
                amplitude,
                freq_hz,
                phase,
            } => offset + amplitude * (2.0 * std::f64::consts::PI * freq_hz * t + phase).sin(),
            Waveform::Ramp { from, to, start_s, end_s } => {
                if t <= start_s {
                    from
                } else if t >= end_s {
                    to
                } else {
                    from + (to - from) * (t - start_s) / (end_s - start_s)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuppetChannel {
    pub joint: String,
    #[serde(flatten)]
    pub waveform: Waveform,
}

/// Puppet definition file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PuppetScript {
    /// Starting pose for joints without a channel, by name. Missing joints hold home.
    #[serde(default)]
    pub base: std::collections::BTreeMap<String, f64>,
    pub channels: Vec<PuppetChannel>,
}

impl PuppetScript {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RecordError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RecordError::PuppetFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| RecordError::PuppetFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Scripted puppet: fixed base pose plus per-joint waveforms, clipped to limits.
#[derive(Debug, Clone)]
pub struct ScriptedPuppet {
    limits: Vec<(f64, f64)>,
    base: JointFrame,
    channels: Vec<(usize, Waveform)>,
}

impl ScriptedPuppet {
    pub fn new(model: &RobotModel, script: &PuppetScript) -> Result<Self, RecordError> {
        let index = |name: &str| model.joint_index(name).ok_or_else(|| RecordError::UnknownJoint(name.to_string()));
        let mut base: JointFrame = model.home_pose().try_into().expect("model has JOINT_COUNT joints");
        for (name, &value) in &script.base {
            base[index(name)?] = value;
        }
        let channels = script
            .channels
            .iter()
            .map(|c| Ok((index(&c.joint)?, c.waveform.clone())))
            .collect::<Result<Vec<_>, RecordError>>()?;
        Ok(Self {
            limits: model.joints().iter().map(|j| (j.min_angle, j.max_angle)).collect(),
            base,
            channels,
        })
    }

    /// Pose at time `t`, within limits.
    pub fn sample(&self, t: f64) -> JointFrame {
        let mut pose = self.base;
        for (j, w) in &self.channels {
            pose[*j] = w.sample(t);
        }
        for (q, &(lo, hi)) in pose.iter_mut().zip(&self.limits) {
            *q = q.clamp(lo, hi);
        }
        pose
    }
}

impl PuppetSource for ScriptedPuppet {
    fn pose(&mut self, _tick: usize, time: f64) -> PuppetPose {
        self.sample(time).map(Some)
    }
}

/// Replays the frames of a recorded sequence, holding the last one.
#[derive(Debug, Clone)]
pub struct ReplayPuppet {
    frames: Vec<JointFrame>,
}

impl ReplayPuppet {
    pub fn new(seq: &ActionSequence) -> Self {
        Self {
            frames: seq.frames.clone(),
        }
    }
}

impl PuppetSource for ReplayPuppet {
    fn pose(&mut self, tick: usize, _time: f64) -> PuppetPose {
        match self.frames.get(tick).or(self.frames.last()) {
            Some(f) => f.map(Some),
            None => [None; JOINT_COUNT],
        }
    }
}

/// Live puppet fed from another thread through a bounded queue. Each tick
/// takes the newest queued pose and drops older ones; with nothing queued the
/// previous pose is held.
#[derive(Debug)]
pub struct StreamPuppet {
    rx: Receiver<PuppetPose>,
    latest: PuppetPose,
}

impl StreamPuppet {
    pub fn channel(capacity: usize) -> (SyncSender<PuppetPose>, Self) {
        let (tx, rx) = std::sync::mpsc::sync_channel(capacity);
        (
            tx,
            Self {
                rx,
                latest: [None; JOINT_COUNT],
            },
        )
    }
}

impl PuppetSource for StreamPuppet {
    fn pose(&mut self, _tick: usize, _time: f64) -> PuppetPose {
        loop {
            match self.rx.try_recv() {
                Ok(p) => self.latest = p,
                Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => break,
            }
        }
        self.latest
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingConfig {
    pub name: String,
    pub rate_hz: f64,
    pub duration: f64,
    /// Joints polled every tick; `None` polls all. Others are read once at the start.
    pub joints: Option<Vec<String>>,
}

impl RecordingConfig {
    pub fn new(name: impl Into<String>, duration: f64) -> Self {
        Self {
            name: name.into(),
            rate_hz: 50.0,
            duration,
            joints: None,
        }
    }

    pub fn frame_count(&self) -> usize {
        (self.rate_hz * self.duration).round() as usize
    }

    fn validate(&self) -> Result<(), RecordError> {
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(RecordError::Config("rate_hz must be positive".into()));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(RecordError::Config("duration must be positive".into()));
        }
        Ok(())
    }
}

/// Records a demonstration with torque off. Torque flags are restored to
/// their previous values before returning, also on failure.
pub fn kinesthetic_record(
    bus: &mut SimBus,
    model: &RobotModel,
    puppet: &mut dyn PuppetSource,
    cfg: &RecordingConfig,
) -> Result<ActionSequence, RecordError> {
    cfg.validate()?;
    let polled: Vec<usize> = match &cfg.joints {
        None => (0..JOINT_COUNT).collect(),
        Some(names) => names
            .iter()
            .map(|n| model.joint_index(n).ok_or_else(|| RecordError::UnknownJoint(n.clone())))
            .collect::<Result<_, _>>()?,
    };
    let period = 1.0 / cfg.rate_hz;
    let dt = period / (JOINT_COUNT + 1) as f64;
    let held = release_torque(bus, model, dt);
    let result = poll_frames(bus, model, puppet, cfg, &polled, dt);
    restore_torque(bus, &held, dt);

    let frames = result?;
    Ok(ActionSequence::new(cfg.name.clone(), cfg.rate_hz, model, frames))
}

/// Drops torque on every joint and returns the previous flags.
fn release_torque(bus: &mut SimBus, model: &RobotModel, dt: f64) -> Vec<(u8, bool)> {
    let before = model
        .joints()
        .iter()
        .map(|j| (j.id, bus.torque_enabled(j.id).unwrap_or(true)))
        .collect();
    bus.transact(&BusFrame::torque(BROADCAST_ID, false), dt);
    before
}

fn restore_torque(bus: &mut SimBus, before: &[(u8, bool)], dt: f64) {
    if before.iter().all(|&(_, on)| on) {
        bus.transact(&BusFrame::torque(BROADCAST_ID, true), dt);
    } else {
        for &(id, on) in before {
            if on {
                bus.transact(&BusFrame::torque(id, true), dt);
            }
        }
    }
}

fn read_joint(bus: &mut SimBus, model: &RobotModel, j: usize, tick: usize, dt: f64) -> Result<f64, RecordError> {
    let joint = &model.joints()[j];
    read_position(bus, joint.id, dt)
        .map(|q| joint.clamp(q))
        .ok_or_else(|| RecordError::Timeout {
            joint: joint.name.clone(),
            id: joint.id,
            tick,
        })
}

/// Kinesthetic recording advanced one frame per externally supplied pose,
/// for live puppeteering where poses arrive at the operator's pace.
#[derive(Debug)]
pub struct LiveRecording {
    name: String,
    rate_hz: f64,
    dt: f64,
    held: Vec<(u8, bool)>,
    frame: JointFrame,
    frames: Vec<JointFrame>,
}

impl LiveRecording {
    /// Releases torque and reads the starting posture.
    pub fn start(bus: &mut SimBus, model: &RobotModel, name: impl Into<String>, rate_hz: f64) -> Result<Self, RecordError> {
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(RecordError::Config("rate_hz must be positive".into()));
        }
        let dt = 1.0 / rate_hz / (JOINT_COUNT + 1) as f64;
        let held = release_torque(bus, model, dt);
        let mut frame = [0.0; JOINT_COUNT];
        for (j, slot) in frame.iter_mut().enumerate() {
            match read_joint(bus, model, j, 0, dt) {
                Ok(q) => *slot = q,
                Err(e) => {
                    restore_torque(bus, &held, dt);
                    return Err(e);
                }
            }
        }
        Ok(Self {
            name: name.into(),
            rate_hz,
            dt,
            held,
            frame,
            frames: Vec::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Moves the limp joints to `pose`, polls every encoder and appends a
    /// frame. Returns the new frame's index.
    pub fn push(&mut self, bus: &mut SimBus, model: &RobotModel, pose: &PuppetPose) -> Result<usize, RecordError> {
        let tick = self.frames.len();
        for (joint, target) in model.joints().iter().zip(pose) {
            if let Some(q) = target {
                bus.apply_external(joint.id, *q);
            }
        }
        for j in 0..JOINT_COUNT {
            self.frame[j] = read_joint(bus, model, j, tick, self.dt)?;
        }
        self.frames.push(self.frame);
        Ok(tick)
    }

    /// Restores torque and returns the recording.
    pub fn finish(self, bus: &mut SimBus, model: &RobotModel) -> ActionSequence {
        restore_torque(bus, &self.held, self.dt);
        ActionSequence::new(self.name, self.rate_hz, model, self.frames)
    }
}

fn poll_frames(
    bus: &mut SimBus,
    model: &RobotModel,
    puppet: &mut dyn PuppetSource,
    cfg: &RecordingConfig,
    polled: &[usize],
    dt: f64,
) -> Result<Vec<JointFrame>, RecordError> {
    let joints = model.joints();
    let mut frame: JointFrame = [0.0; JOINT_COUNT];
    for j in 0..JOINT_COUNT {
        frame[j] = read_joint(bus, model, j, 0, dt)?;
    }
    let count = cfg.frame_count();
    let mut frames = Vec::with_capacity(count);
    for tick in 0..count {
        let time = tick as f64 / cfg.rate_hz;
        for (j, target) in puppet.pose(tick, time).iter().enumerate() {
            if let Some(q) = target {
                bus.apply_external(joints[j].id, *q);
            }
        }
        for &j in polled {
            frame[j] = read_joint(bus, model, j, tick, dt)?;
        }
        frames.push(frame);
    }
    Ok(frames)
}

/// A tip target valid from `time` until the next one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedTarget {
    pub time: f64,
    pub position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndEffectorConfig {
    pub rate_hz: f64,
    pub duration: f64,
    pub position_weight: f64,
    pub orientation_weight: f64,
    /// Pull toward the previous tick's solution.
    pub displacement_weight: f64,
}

impl Default for EndEffectorConfig {
    fn default() -> Self {
        Self {
            rate_hz: 50.0,
            duration: 1.0,
            position_weight: 1.0,
            orientation_weight: 0.01,
            displacement_weight: 1e-6,
        }
    }
}

/// Joint traces (one vector per tick) following `targets` on a bare chain.
pub fn endeffector_record_chain(
    chain: &KinematicChain,
    targets: &[TimedTarget],
    seed_pose: &[f64],
    ik_cfg: &IkConfig,
    cfg: &EndEffectorConfig,
) -> Result<Vec<Vec<f64>>, RecordError> {
    if targets.is_empty() {
        return Err(RecordError::NoTargets);
    }
    if !(cfg.rate_hz > 0.0) || !(cfg.duration > 0.0) {
        return Err(RecordError::Config("rate_hz and duration must be positive".into()));
    }
    chain.check_angles(seed_pose)?;
    let count = (cfg.rate_hz * cfg.duration).round() as usize;
    let mut previous = seed_pose.to_vec();
    let mut traces = Vec::with_capacity(count);
    let mut cursor = 0;
    for tick in 0..count {
        let time = tick as f64 / cfg.rate_hz;
        while cursor + 1 < targets.len() && targets[cursor + 1].time <= time {
            cursor += 1;
        }
        let target = &targets[cursor];
        let goal = Vector3::from(target.position);
        let mut objectives = vec![IkObjective::position(goal, cfg.position_weight)];
        if let Some([w, x, y, z]) = target.orientation {
            let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
            objectives.push(IkObjective::orientation(q, cfg.orientation_weight));
        }
        if cfg.displacement_weight > 0.0 {
            objectives.push(IkObjective::displacement(cfg.displacement_weight));
        }
        let tick_cfg = IkConfig {
            seed: ik_cfg.seed.wrapping_add(tick as u64),
            ..ik_cfg.clone()
        };
        let solution = solve(chain, &objectives, &previous, &tick_cfg)?;
        let held_error = (chain.forward_unchecked(&previous).position - goal).norm();
        if !solution.converged && solution.tip_error > held_error {
            warn!("ik made no progress at tick {tick}; holding previous pose");
        } else {
            previous = solution.angles;
        }
        traces.push(previous.clone());
    }
    Ok(traces)
}

/// End-effector recording on a named chain of the model. Joints outside the
/// chain hold their home pose.
pub fn endeffector_record(
    model: &RobotModel,
    chain: &str,
    targets: &[TimedTarget],
    ik_cfg: &IkConfig,
    cfg: &EndEffectorConfig,
    name: impl Into<String>,
) -> Result<ActionSequence, RecordError> {
    let kinematic = model.chain(chain)?;
    let indices = model.chain_indices(chain)?;
    let home = model.home_pose();
    let seed: Vec<f64> = indices.iter().map(|&i| home[i]).collect();
    let traces = endeffector_record_chain(&kinematic, targets, &seed, ik_cfg, cfg)?;
    let frames = traces
        .into_iter()
        .map(|angles| {
            let mut frame: JointFrame = home.clone().try_into().expect("model has JOINT_COUNT joints");
            for (&i, q) in indices.iter().zip(angles) {
                frame[i] = q;
            }
            frame
        })
        .collect();
    Ok(ActionSequence::new(name, cfg.rate_hz, model, frames))
}

/// A timed expression or audio cue to merge into a recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedCommand {
    pub time: f64,
    pub kind: CommandKind,
    pub command: String,
}

impl TimedCommand {
    pub fn new(time: f64, kind: CommandKind, command: impl Into<String>) -> Self {
        Self {
            time,
            kind,
            command: command.into(),
        }
    }
}

/// Merges timed commands into `seq` at the nearest tick. A new command
/// replaces an existing one of the same kind on the same tick; commands that
/// would not change the active one are dropped.
pub fn annotate(
    seq: &ActionSequence,
    events: &[TimedCommand],
    vocab: &CommandVocabulary,
) -> Result<ActionSequence, RecordError> {
    let mut out = seq.clone();
    if events.is_empty() {
        return Ok(out);
    }
    for e in events {
        let index = vocab.index_of(e.kind, &e.command)?;
        let frame = (e.time * seq.rate_hz).round();
        if !(e.time >= 0.0) || frame >= seq.len() as f64 {
            return Err(RecordError::TimeOutOfRange {
                time: e.time,
                duration: seq.duration(),
            });
        }
        let frame = frame as usize;
        let list = out.events_mut(e.kind);
        list.retain(|x| x.frame != frame);
        list.push(CommandEvent { frame, command: index });
        list.sort_by_key(|x| x.frame);
    }
    out.canonicalize_events();
    Ok(out)
}
