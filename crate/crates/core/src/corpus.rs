//! Built-in scripted demonstrations: eleven expressive actions recorded by
//! kinesthetic teaching on the simulated bus and annotated with facial and
//! audio cues.

use std::collections::BTreeMap;

use crate::action::{ActionSequence, CommandKind, CommandVocabulary};
use crate::bus::SimBus;
use crate::recorder::{
    annotate, kinesthetic_record, PuppetChannel, PuppetScript, RecordError, RecordingConfig, ScriptedPuppet,
    TimedCommand, Waveform,
};
use crate::robot::RobotModel;

/// One scripted demonstration.
#[derive(Debug, Clone)]
pub struct CorpusAction {
    pub name: &'static str,
    pub duration: f64,
    pub script: PuppetScript,
    pub cues: Vec<TimedCommand>,
}

fn sine(joint: &str, offset: f64, amplitude: f64, freq_hz: f64, phase: f64) -> PuppetChannel {
    PuppetChannel {
        joint: joint.into(),
        waveform: Waveform::Sine {
            offset,
            amplitude,
            freq_hz,
            phase,
        },
    }
}

fn ramp(joint: &str, from: f64, to: f64, start_s: f64, end_s: f64) -> PuppetChannel {
    PuppetChannel {
        joint: joint.into(),
        waveform: Waveform::Ramp { from, to, start_s, end_s },
    }
}

fn hold(joint: &str, value: f64) -> PuppetChannel {
    PuppetChannel {
        joint: joint.into(),
        waveform: Waveform::Const { value },
    }
}

fn cue(time: f64, kind: CommandKind, name: &str) -> TimedCommand {
    TimedCommand::new(time, kind, name)
}

fn action(name: &'static str, duration: f64, channels: Vec<PuppetChannel>, cues: Vec<TimedCommand>) -> CorpusAction {
    CorpusAction {
        name,
        duration,
        script: PuppetScript {
            base: BTreeMap::new(),
            channels,
        },
        cues,
    }
}

/// The eleven actions, each 2–6 s long with at least one facial and one audio cue.
pub fn actions() -> Vec<CorpusAction> {
    use CommandKind::{Audio, Facial};
    vec![
        action(
            "self_introduction",
            4.0,
            vec![
                sine("shoulder_pitch_r", -0.9, 0.5, 0.25, 0.0),
                sine("elbow_r", -1.0, 0.4, 0.5, 0.0),
                sine("wrist_yaw_r", 0.0, 0.6, 0.5, 1.0),
                sine("neck_pitch", 0.1, 0.1, 0.25, 0.0),
            ],
            vec![cue(0.0, Facial, "smile"), cue(0.4, Audio, "greeting"), cue(3.0, Audio, "silent")],
        ),
        action(
            "feeling_challenged",
            2.6,
            vec![
                ramp("shoulder_pitch_l", 0.0, -1.4, 0.2, 1.4),
                ramp("elbow_l", 0.0, -1.6, 0.2, 1.4),
                hold("fingers_l", 1.4),
                sine("neck_yaw", 0.0, 0.2, 0.4, 0.0),
            ],
            vec![cue(0.0, Facial, "surprised"), cue(1.2, Facial, "smile"), cue(0.8, Audio, "yay")],
        ),
        action(
            "angry",
            2.4,
            vec![
                sine("shoulder_roll_l", 0.6, 0.4, 0.8, 0.0),
                sine("shoulder_roll_r", -0.6, 0.4, 0.8, 0.0),
                hold("elbow_l", -1.8),
                hold("elbow_r", -1.8),
                ramp("ear_l", 0.0, -0.5, 0.0, 0.6),
                ramp("ear_r", 0.0, -0.5, 0.0, 0.6),
            ],
            vec![cue(0.0, Facial, "angry"), cue(0.2, Audio, "no")],
        ),
        action(
            "annoyed",
            2.2,
            vec![
                sine("neck_yaw", 0.0, 0.5, 0.9, 0.0),
                sine("neck_roll", 0.0, 0.2, 0.45, 0.5),
                hold("ear_l", -0.3),
                hold("ear_r", -0.3),
            ],
            vec![cue(0.0, Facial, "troubled"), cue(1.0, Audio, "sigh")],
        ),
        action(
            "confused",
            2.8,
            vec![
                ramp("neck_roll", 0.0, 0.35, 0.2, 1.0),
                ramp("shoulder_pitch_r", 0.0, -2.0, 0.3, 1.3),
                ramp("elbow_r", 0.0, -1.8, 0.3, 1.3),
                sine("ear_r", 0.0, 0.3, 1.0, 0.0),
            ],
            vec![cue(0.0, Facial, "troubled"), cue(1.4, Facial, "surprised"), cue(0.6, Audio, "huh")],
        ),
        action(
            "rejection",
            2.0,
            vec![
                sine("neck_yaw", 0.0, 0.7, 1.0, 0.0),
                ramp("shoulder_pitch_l", 0.0, -1.2, 0.0, 0.8),
                ramp("shoulder_pitch_r", 0.0, -1.2, 0.0, 0.8),
                hold("wrist_yaw_l", 1.2),
                hold("wrist_yaw_r", -1.2),
            ],
            vec![cue(0.0, Facial, "angry"), cue(0.0, Audio, "no")],
        ),
        action(
            "hating_something",
            2.4,
            vec![
                ramp("neck_yaw", 0.0, 0.9, 0.0, 0.8),
                ramp("neck_pitch", 0.0, -0.4, 0.0, 0.8),
                ramp("shoulder_roll_r", 0.0, -1.0, 0.2, 1.0),
                hold("fingers_r", 0.0),
            ],
            vec![cue(0.0, Facial, "sad"), cue(0.9, Facial, "angry"), cue(0.5, Audio, "sigh")],
        ),
        action(
            "joy",
            3.0,
            vec![
                sine("shoulder_pitch_l", -1.8, 0.5, 1.0, 0.0),
                sine("shoulder_pitch_r", -1.8, 0.5, 1.0, 3.14),
                sine("ear_l", 0.2, 0.4, 1.5, 0.0),
                sine("ear_r", 0.2, 0.4, 1.5, 0.0),
                hold("fingers_l", 1.0),
                hold("fingers_r", 1.0),
            ],
            vec![cue(0.0, Facial, "smile"), cue(0.3, Audio, "yay")],
        ),
        action(
            "sad",
            2.8,
            vec![
                ramp("neck_pitch", 0.0, 0.55, 0.0, 1.2),
                ramp("ear_l", 0.0, 0.55, 0.0, 1.2),
                ramp("ear_r", 0.0, 0.55, 0.0, 1.2),
                ramp("shoulder_roll_l", 0.0, 0.5, 0.2, 1.6),
            ],
            vec![cue(0.0, Facial, "sad"), cue(1.5, Audio, "sigh")],
        ),
        action(
            "agree_nod",
            2.0,
            vec![sine("neck_pitch", 0.15, 0.35, 1.5, 0.0), hold("ear_l", 0.3), hold("ear_r", 0.3)],
            vec![cue(0.0, Facial, "smile"), cue(0.0, Audio, "agree")],
        ),
        action(
            "agree_thumbs",
            2.2,
            vec![
                ramp("shoulder_pitch_r", 0.0, -1.5, 0.0, 0.8),
                ramp("elbow_r", 0.0, -1.2, 0.0, 0.8),
                hold("fingers_r", 1.5),
                sine("neck_pitch", 0.1, 0.2, 1.0, 0.0),
            ],
            vec![cue(0.0, Facial, "neutral"), cue(0.8, Facial, "smile"), cue(1.0, Audio, "agree")],
        ),
    ]
}

/// Records and annotates every corpus action on a fresh bus.
pub fn record_corpus(model: &RobotModel, vocab: &CommandVocabulary, rate_hz: f64) -> Result<Vec<ActionSequence>, RecordError> {
    actions()
        .iter()
        .map(|a| {
            let mut bus = SimBus::new(model);
            bus.set_logging(false);
            let mut puppet = ScriptedPuppet::new(model, &a.script)?;
            let cfg = RecordingConfig {
                rate_hz,
                ..RecordingConfig::new(a.name, a.duration)
            };
            let seq = kinesthetic_record(&mut bus, model, &mut puppet, &cfg)?;
            annotate(&seq, &a.cues, vocab)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot::default_model;

    #[test]
    fn corpus_shape() {
        let model = default_model();
        let vocab = CommandVocabulary::default();
        let seqs = record_corpus(&model, &vocab, 50.0).unwrap();
        assert_eq!(seqs.len(), 11);
        for s in &seqs {
            assert!((100..=300).contains(&s.len()), "{} has {} frames", s.name, s.len());
            assert!(!s.facial_events.is_empty(), "{} lacks facial cues", s.name);
            assert!(!s.audio_events.is_empty(), "{} lacks audio", s.name);
            s.validate(&model, &vocab).unwrap();
        }
    }
}
