//! Demonstration data: joint trajectories with synced expression and audio
//! commands, their [-1, 1] encoding, and the JSON interchange files.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::robot::{RobotModel, JOINT_COUNT};

pub const FORMAT_VERSION: u32 = 1;

pub type JointFrame = [f64; JOINT_COUNT];

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("frame {frame}: joint `{joint}` value {value} outside [{min}, {max}]")]
    JointOutOfLimits {
        frame: usize,
        joint: String,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("{kind} event #{event} uses unknown command index {index}")]
    UnknownCommand {
        kind: CommandKind,
        event: usize,
        index: usize,
    },
    #[error("unknown {kind} command `{0}`", kind = .1)]
    UnknownCommandName(String, CommandKind),
    #[error("{kind} event #{event} at frame {frame} is beyond the last frame ({frames} frames)")]
    EventOutOfRange {
        kind: CommandKind,
        event: usize,
        frame: usize,
        frames: usize,
    },
    #[error("{kind} event #{event} is out of order or shares a frame with the previous one")]
    EventsUnsorted { kind: CommandKind, event: usize },
    #[error("joint names do not match model `{model}`: {detail}")]
    JointNames { model: String, detail: String },
    #[error("vector dimension {got} does not match expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("invalid sequence: {0}")]
    Invalid(String),
    #[error("unsupported format_version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("malformed file {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Facial,
    Audio,
}

impl std::fmt::Display for CommandKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CommandKind::Facial => "facial",
            CommandKind::Audio => "audio",
        })
    }
}

impl std::str::FromStr for CommandKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "facial" => Ok(CommandKind::Facial),
            "audio" => Ok(CommandKind::Audio),
            other => Err(format!("unknown command kind `{other}` (facial|audio)")),
        }
    }
}

/// Facial and audio command names. Index 0 of each list is the resting
/// command ("neutral" / "silent").
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandVocabulary {
    pub facial: Vec<String>,
    pub audio: Vec<String>,
}

impl CommandVocabulary {
    pub fn new(facial: Vec<String>, audio: Vec<String>) -> Result<Self, ActionError> {
        let vocab = Self { facial, audio };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn validate(&self) -> Result<(), ActionError> {
        for (list, reserved) in [(&self.facial, "neutral"), (&self.audio, "silent")] {
            if list.first().map(String::as_str) != Some(reserved) {
                return Err(ActionError::Vocabulary(format!("index 0 must be `{reserved}`")));
            }
            let mut seen = HashSet::new();
            for name in list {
                if !seen.insert(name) {
                    return Err(ActionError::Vocabulary(format!("duplicate command `{name}`")));
                }
            }
        }
        Ok(())
    }

    pub fn list(&self, kind: CommandKind) -> &[String] {
        match kind {
            CommandKind::Facial => &self.facial,
            CommandKind::Audio => &self.audio,
        }
    }

    pub fn index_of(&self, kind: CommandKind, name: &str) -> Result<usize, ActionError> {
        self.list(kind)
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| ActionError::UnknownCommandName(name.to_string(), kind))
    }

    pub fn layout(&self) -> ChannelLayout {
        ChannelLayout {
            joints: JOINT_COUNT,
            facial: self.facial.len(),
            audio: self.audio.len(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ActionError> {
        let vocab: Self = read_json(path.as_ref())?;
        vocab.validate()?;
        Ok(vocab)
    }
}

impl Default for CommandVocabulary {
    fn default() -> Self {
        let owned = |names: &[&str]| names.iter().map(|s| s.to_string()).collect();
        Self {
            facial: owned(&["neutral", "smile", "angry", "sad", "surprised", "troubled"]),
            audio: owned(&["silent", "greeting", "huh", "no", "yay", "sigh", "agree"]),
        }
    }
}

/// Offsets of the three blocks inside a normalized vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub joints: usize,
    pub facial: usize,
    pub audio: usize,
}

impl ChannelLayout {
    pub fn dim(&self) -> usize {
        self.joints + self.facial + self.audio
    }

    pub fn joint_range(&self) -> std::ops::Range<usize> {
        0..self.joints
    }

    pub fn facial_range(&self) -> std::ops::Range<usize> {
        self.joints..self.joints + self.facial
    }

    pub fn audio_range(&self) -> std::ops::Range<usize> {
        self.joints + self.facial..self.dim()
    }

    pub fn block(&self, kind: CommandKind) -> std::ops::Range<usize> {
        match kind {
            CommandKind::Facial => self.facial_range(),
            CommandKind::Audio => self.audio_range(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandEvent {
    pub frame: usize,
    pub command: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSequence {
    pub name: String,
    pub rate_hz: f64,
    pub joint_names: Vec<String>,
    pub frames: Vec<JointFrame>,
    pub facial_events: Vec<CommandEvent>,
    pub audio_events: Vec<CommandEvent>,
}

impl ActionSequence {
    pub fn new(name: impl Into<String>, rate_hz: f64, model: &RobotModel, frames: Vec<JointFrame>) -> Self {
        Self {
            name: name.into(),
            rate_hz,
            joint_names: model.joint_names(),
            frames,
            facial_events: Vec::new(),
            audio_events: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.rate_hz
    }

    pub fn events(&self, kind: CommandKind) -> &[CommandEvent] {
        match kind {
            CommandKind::Facial => &self.facial_events,
            CommandKind::Audio => &self.audio_events,
        }
    }

    pub fn events_mut(&mut self, kind: CommandKind) -> &mut Vec<CommandEvent> {
        match kind {
            CommandKind::Facial => &mut self.facial_events,
            CommandKind::Audio => &mut self.audio_events,
        }
    }

    /// Structural checks that need neither model nor vocabulary.
    pub fn validate_structure(&self) -> Result<(), ActionError> {
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(ActionError::Invalid(format!("rate_hz must be positive, got {}", self.rate_hz)));
        }
        if self.joint_names.len() != JOINT_COUNT {
            return Err(ActionError::DimensionMismatch {
                expected: JOINT_COUNT,
                got: self.joint_names.len(),
            });
        }
        for kind in [CommandKind::Facial, CommandKind::Audio] {
            let mut previous: Option<usize> = None;
            for (event, e) in self.events(kind).iter().enumerate() {
                if e.frame >= self.frames.len() {
                    return Err(ActionError::EventOutOfRange {
                        kind,
                        event,
                        frame: e.frame,
                        frames: self.frames.len(),
                    });
                }
                if previous.is_some_and(|p| e.frame <= p) {
                    return Err(ActionError::EventsUnsorted { kind, event });
                }
                previous = Some(e.frame);
            }
        }
        Ok(())
    }

    pub fn validate(&self, model: &RobotModel, vocab: &CommandVocabulary) -> Result<(), ActionError> {
        self.validate_structure()?;
        let expected = model.joint_names();
        if self.joint_names != expected {
            let detail = self
                .joint_names
                .iter()
                .zip(&expected)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("found `{a}` where `{b}` was expected"))
                .unwrap_or_default();
            return Err(ActionError::JointNames {
                model: model.name.clone(),
                detail,
            });
        }
        for (f, frame) in self.frames.iter().enumerate() {
            for (joint, &value) in model.joints().iter().zip(frame) {
                if !joint.contains(value) {
                    return Err(ActionError::JointOutOfLimits {
                        frame: f,
                        joint: joint.name.clone(),
                        value,
                        min: joint.min_angle,
                        max: joint.max_angle,
                    });
                }
            }
        }
        for kind in [CommandKind::Facial, CommandKind::Audio] {
            let n = vocab.list(kind).len();
            for (event, e) in self.events(kind).iter().enumerate() {
                if e.command >= n {
                    return Err(ActionError::UnknownCommand {
                        kind,
                        event,
                        index: e.command,
                    });
                }
            }
        }
        Ok(())
    }

    /// Drops events that do not change the active command.
    pub fn canonicalize_events(&mut self) {
        for kind in [CommandKind::Facial, CommandKind::Audio] {
            let mut active = 0;
            self.events_mut(kind).retain(|e| {
                let keep = e.command != active;
                active = e.command;
                keep
            });
        }
    }

    /// Active command of `kind` at every frame under step-function semantics.
    pub fn command_track(&self, kind: CommandKind) -> Vec<usize> {
        let mut track = vec![0; self.frames.len()];
        let mut events = self.events(kind).iter().peekable();
        let mut active = 0;
        for (f, slot) in track.iter_mut().enumerate() {
            while let Some(e) = events.next_if(|e| e.frame <= f) {
                active = e.command;
            }
            *slot = active;
        }
        track
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ActionError> {
        write_json(path.as_ref(), &ActionFile::from(self))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ActionError> {
        let file: ActionFile = read_json(path.as_ref())?;
        if file.format_version != FORMAT_VERSION {
            return Err(ActionError::VersionMismatch {
                found: file.format_version,
            });
        }
        let seq = file.into_sequence();
        seq.validate_structure()?;
        Ok(seq)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ActionFile::from(self)).expect("action serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct ActionFile {
    format_version: u32,
    name: String,
    rate_hz: f64,
    joint_names: Vec<String>,
    frames: Vec<JointFrame>,
    facial_events: Vec<CommandEvent>,
    audio_events: Vec<CommandEvent>,
}

impl From<&ActionSequence> for ActionFile {
    fn from(seq: &ActionSequence) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            name: seq.name.clone(),
            rate_hz: seq.rate_hz,
            joint_names: seq.joint_names.clone(),
            frames: seq.frames.clone(),
            facial_events: seq.facial_events.clone(),
            audio_events: seq.audio_events.clone(),
        }
    }
}

impl ActionFile {
    fn into_sequence(self) -> ActionSequence {
        ActionSequence {
            name: self.name,
            rate_hz: self.rate_hz,
            joint_names: self.joint_names,
            frames: self.frames,
            facial_events: self.facial_events,
            audio_events: self.audio_events,
        }
    }
}

/// Per-step vectors: scaled joints followed by the facial and audio one-hot blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSequence {
    pub name: String,
    pub rate_hz: f64,
    pub vectors: Vec<Vec<f64>>,
}

impl NormalizedSequence {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

pub fn scale_joint(value: f64, min: f64, max: f64) -> f64 {
    2.0 * (value - min) / (max - min) - 1.0
}

pub fn unscale_joint(value: f64, min: f64, max: f64) -> f64 {
    (min + (value + 1.0) * 0.5 * (max - min)).clamp(min, max)
}

pub fn normalize(
    seq: &ActionSequence,
    model: &RobotModel,
    vocab: &CommandVocabulary,
) -> Result<NormalizedSequence, ActionError> {
    seq.validate(model, vocab)?;
    let layout = vocab.layout();
    let facial = seq.command_track(CommandKind::Facial);
    let audio = seq.command_track(CommandKind::Audio);
    let vectors = seq
        .frames
        .iter()
        .enumerate()
        .map(|(f, frame)| {
            let mut v = vec![-1.0; layout.dim()];
            for (slot, (joint, &value)) in v.iter_mut().zip(model.joints().iter().zip(frame)) {
                *slot = scale_joint(value, joint.min_angle, joint.max_angle);
            }
            v[layout.facial_range().start + facial[f]] = 1.0;
            v[layout.audio_range().start + audio[f]] = 1.0;
            v
        })
        .collect();
    Ok(NormalizedSequence {
        name: seq.name.clone(),
        rate_hz: seq.rate_hz,
        vectors,
    })
}

/// Lowest index among the maxima.
pub fn argmax(block: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in block.iter().enumerate() {
        if v > block[best] {
            best = i;
        }
    }
    best
}

pub fn denormalize(
    nseq: &NormalizedSequence,
    model: &RobotModel,
    vocab: &CommandVocabulary,
) -> Result<ActionSequence, ActionError> {
    let layout = vocab.layout();
    if let Some(bad) = nseq.vectors.iter().find(|v| v.len() != layout.dim()) {
        return Err(ActionError::DimensionMismatch {
            expected: layout.dim(),
            got: bad.len(),
        });
    }
    let frames = nseq
        .vectors
        .iter()
        .map(|v| {
            let mut frame = [0.0; JOINT_COUNT];
            for (slot, (joint, &x)) in frame.iter_mut().zip(model.joints().iter().zip(v)) {
                *slot = unscale_joint(x, joint.min_angle, joint.max_angle);
            }
            frame
        })
        .collect();
    let mut seq = ActionSequence::new(nseq.name.clone(), nseq.rate_hz, model, frames);
    for kind in [CommandKind::Facial, CommandKind::Audio] {
        let block = layout.block(kind);
        let mut active = 0;
        let events = seq.events_mut(kind);
        for (f, v) in nseq.vectors.iter().enumerate() {
            let now = argmax(&v[block.clone()]);
            if now != active {
                events.push(CommandEvent { frame: f, command: now });
                active = now;
            }
        }
    }
    Ok(seq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub vocabulary: CommandVocabulary,
    pub sequences: Vec<NormalizedSequence>,
    pub model_id: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format_version: u32,
    model_id: String,
    vocabulary: CommandVocabulary,
    sequences: Vec<NormalizedSequence>,
}

impl Dataset {
    pub fn from_actions(
        actions: &[ActionSequence],
        model: &RobotModel,
        vocab: &CommandVocabulary,
    ) -> Result<Self, ActionError> {
        let sequences = actions
            .iter()
            .map(|a| normalize(a, model, vocab))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            vocabulary: vocab.clone(),
            sequences,
            model_id: model.name.clone(),
        })
    }

    pub fn layout(&self) -> ChannelLayout {
        self.vocabulary.layout()
    }

    pub fn dim(&self) -> usize {
        self.layout().dim()
    }

    pub fn validate(&self) -> Result<(), ActionError> {
        self.vocabulary.validate()?;
        let d = self.dim();
        for seq in &self.sequences {
            if let Some(bad) = seq.vectors.iter().find(|v| v.len() != d) {
                return Err(ActionError::DimensionMismatch {
                    expected: d,
                    got: bad.len(),
                });
            }
            if seq.vectors.iter().flatten().any(|x| !(-1.0..=1.0).contains(x)) {
                return Err(ActionError::Invalid(format!(
                    "sequence `{}` has components outside [-1, 1]",
                    seq.name
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ActionError> {
        write_json(
            path.as_ref(),
            &DatasetFile {
                format_version: FORMAT_VERSION,
                model_id: self.model_id.clone(),
                vocabulary: self.vocabulary.clone(),
                sequences: self.sequences.clone(),
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ActionError> {
        let file: DatasetFile = read_json(path.as_ref())?;
        if file.format_version != FORMAT_VERSION {
            return Err(ActionError::VersionMismatch {
                found: file.format_version,
            });
        }
        let dataset = Self {
            vocabulary: file.vocabulary,
            sequences: file.sequences,
            model_id: file.model_id,
        };
        dataset.validate()?;
        Ok(dataset)
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ActionError> {
    let text = std::fs::read_to_string(path).map_err(|source| ActionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ActionError::Malformed {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ActionError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| ActionError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot::default_model;
    use proptest::prelude::*;

    fn toy(model: &RobotModel, frames: usize) -> ActionSequence {
        ActionSequence::new("toy", 50.0, model, vec![model.home_pose().try_into().unwrap(); frames])
    }

    #[test]
    fn joint_endpoints_and_midpoint() {
        let model = default_model();
        let vocab = CommandVocabulary::default();
        let mut seq = toy(&model, 3);
        for (j, joint) in model.joints().iter().enumerate() {
            seq.frames[0][j] = joint.min_angle;
            seq.frames[1][j] = joint.max_angle;
            seq.frames[2][j] = joint.midpoint();
        }
        let n = normalize(&seq, &model, &vocab).unwrap();
        for j in 0..JOINT_COUNT {
            assert_eq!(n.vectors[0][j], -1.0);
            assert_eq!(n.vectors[1][j], 1.0);
            assert!(n.vectors[2][j].abs() < 1e-12);
        }
    }

    #[test]
    fn facial_step_function() {
        let model = default_model();
        let vocab = CommandVocabulary::default();
        let mut seq = toy(&model, 20);
        seq.facial_events.push(CommandEvent { frame: 10, command: 2 });
        let n = normalize(&seq, &model, &vocab).unwrap();
        let block = vocab.layout().facial_range();
        for (f, v) in n.vectors.iter().enumerate() {
            let expected = if f < 10 { 0 } else { 2 };
            for (i, &x) in v[block.clone()].iter().enumerate() {
                assert_eq!(x, if i == expected { 1.0 } else { -1.0 }, "frame {f} slot {i}");
            }
        }
    }

    #[test]
    fn zero_joint_block_decodes_to_midpoints() {
        let model = default_model();
        let vocab = CommandVocabulary::default();
        let layout = vocab.layout();
        let mut v = vec![0.0; layout.dim()];
        for r in [layout.facial_range(), layout.audio_range()] {
            v[r.clone()].fill(-1.0);
            v[r.start] = 1.0;
        }
        let nseq = NormalizedSequence {
            name: "z".into(),
            rate_hz: 50.0,
            vectors: vec![v; 5],
        };
        let seq = denormalize(&nseq, &model, &vocab).unwrap();
        for frame in &seq.frames {
            for (j, joint) in model.joints().iter().enumerate() {
                assert!((frame[j] - joint.midpoint()).abs() < 1e-12);
            }
        }
        assert!(seq.facial_events.is_empty());
        assert!(seq.audio_events.is_empty());
    }

    #[test]
    fn noisy_one_hot_decodes_like_clean() {
        let model = default_model();
        let vocab = CommandVocabulary::default();
        let mut seq = toy(&model, 12);
        seq.facial_events = vec![CommandEvent { frame: 0, command: 3 }, CommandEvent { frame: 6, command: 1 }];
        seq.audio_events = vec![CommandEvent { frame: 4, command: 5 }];
        let clean = normalize(&seq, &model, &vocab).unwrap();
        let mut noisy = clean.clone();
        for (f, v) in noisy.vectors.iter_mut().enumerate() {
            for (i, x) in v.iter_mut().enumerate().skip(JOINT_COUNT) {
                let wobble = 0.05 * (((f * 31 + i * 7) % 5) as f64 / 4.0);
                *x = if *x > 0.0 { 0.8 } else { -0.9 - wobble };
            }
        }
        let a = denormalize(&clean, &model, &vocab).unwrap();
        let b = denormalize(&noisy, &model, &vocab).unwrap();
        assert_eq!(a.facial_events, b.facial_events);
        assert_eq!(a.audio_events, b.audio_events);
        assert_eq!(b.facial_events, seq.facial_events);
    }

    #[test]
    fn dimension_mismatch() {
        let model = default_model();
        let vocab = CommandVocabulary::default();
        let nseq = NormalizedSequence {
            name: "x".into(),
            rate_hz: 50.0,
            vectors: vec![vec![0.0; 5]],
        };
        assert!(matches!(
            denormalize(&nseq, &model, &vocab),
            Err(ActionError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn normalize_rejects_bad_input() {
        let model = default_model();
        let vocab = CommandVocabulary::default();
        let mut seq = toy(&model, 4);
        seq.frames[2][0] = 5.0;
        assert!(matches!(normalize(&seq, &model, &vocab), Err(ActionError::JointOutOfLimits { frame: 2, .. })));
        let mut seq = toy(&model, 4);
        seq.audio_events.push(CommandEvent { frame: 1, command: 42 });
        assert!(matches!(normalize(&seq, &model, &vocab), Err(ActionError::UnknownCommand { .. })));
    }

    #[test]
    fn event_beyond_frames_is_named_on_load() {
        let model = default_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.act");
        let mut seq = toy(&model, 5);
        seq.facial_events.push(CommandEvent { frame: 1, command: 1 });
        seq.facial_events.push(CommandEvent { frame: 5, command: 2 });
        std::fs::write(&path, seq.to_json()).unwrap();
        let err = ActionSequence::load(&path).unwrap_err();
        assert!(matches!(
            err,
            ActionError::EventOutOfRange {
                kind: CommandKind::Facial,
                event: 1,
                frame: 5,
                ..
            }
        ));
        assert!(err.to_string().contains("facial event #1"));
    }

    #[test]
    fn version_and_malformed_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.act");
        let model = default_model();
        let text = toy(&model, 2).to_json().replace("\"format_version\": 1", "\"format_version\": 9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(ActionSequence::load(&path), Err(ActionError::VersionMismatch { found: 9 })));
        std::fs::write(&path, "{ not json").unwrap();
        assert!(matches!(ActionSequence::load(&path), Err(ActionError::Malformed { .. })));
    }

    #[test]
    fn vocabulary_rules() {
        assert!(CommandVocabulary::new(vec!["smile".into()], vec!["silent".into()]).is_err());
        assert!(CommandVocabulary::new(vec!["neutral".into(), "a".into(), "a".into()], vec!["silent".into()]).is_err());
        assert!(CommandVocabulary::default().validate().is_ok());
    }

    #[test]
    fn command_track_steps() {
        let model = default_model();
        let mut seq = toy(&model, 6);
        seq.audio_events = vec![CommandEvent { frame: 0, command: 2 }, CommandEvent { frame: 3, command: 0 }];
        assert_eq!(seq.command_track(CommandKind::Audio), vec![2, 2, 2, 0, 0, 0]);
        assert_eq!(seq.command_track(CommandKind::Facial), vec![0; 6]);
    }

    fn arb_sequence() -> impl Strategy<Value = ActionSequence> {
        let model = default_model();
        let limits: Vec<(f64, f64)> = model.joints().iter().map(|j| (j.min_angle, j.max_angle)).collect();
        (2usize..40, any::<u64>()).prop_map(move |(len, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let frames = (0..len)
                .map(|_| {
                    let mut f = [0.0; JOINT_COUNT];
                    for (slot, &(lo, hi)) in f.iter_mut().zip(&limits) {
                        *slot = rng.random_range(lo..=hi);
                    }
                    f
                })
                .collect();
            let mut seq = ActionSequence::new("p", 50.0, &default_model(), frames);
            for (kind, n) in [(CommandKind::Facial, 6), (CommandKind::Audio, 7)] {
                let mut frame = 0;
                while frame < len {
                    if rng.random_bool(0.2) {
                        seq.events_mut(kind).push(CommandEvent { frame, command: rng.random_range(0..n) });
                    }
                    frame += 1;
                }
            }
            seq.canonicalize_events();
            seq
        })
    }

    proptest! {
        #[test]
        fn normalize_round_trip(seq in arb_sequence()) {
            let model = default_model();
            let vocab = CommandVocabulary::default();
            let n = normalize(&seq, &model, &vocab).unwrap();
            let layout = vocab.layout();
            for v in &n.vectors {
                prop_assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
                for block in [layout.facial_range(), layout.audio_range()] {
                    let sum: f64 = v[block.clone()].iter().sum();
                    prop_assert_eq!(sum, 2.0 - block.len() as f64);
                }
            }
            let back = denormalize(&n, &model, &vocab).unwrap();
            prop_assert_eq!(&back.facial_events, &seq.facial_events);
            prop_assert_eq!(&back.audio_events, &seq.audio_events);
            for (a, b) in back.frames.iter().zip(&seq.frames) {
                for (x, y) in a.iter().zip(b) {
                    prop_assert!((x - y).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn file_round_trip(seq in arb_sequence()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("a.act");
            seq.save(&path).unwrap();
            prop_assert_eq!(ActionSequence::load(&path).unwrap(), seq);
        }

        #[test]
        fn scaling_is_monotone(a in -1.2f64..1.2, b in -1.2f64..1.2) {
            prop_assume!(a < b);
            prop_assert!(scale_joint(a, -1.2, 1.2) < scale_joint(b, -1.2, 1.2));
        }
    }
}
