//! Simulated humanoid: joint specifications, kinematic chains and servo dynamics.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Isometry3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of actuated joints on the figure.
pub const JOINT_COUNT: usize = 17;

/// First-order servo lag rate constant (1/s).
pub const SERVO_RATE_CONSTANT: f64 = 20.0;

/// Current drawn per radian of tracking error (A/rad).
pub const CURRENT_GAIN: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown chain `{0}`")]
    UnknownChain(String),
    #[error("chain `{chain}` has {expected} joints but {got} angles were given")]
    AngleCount {
        chain: String,
        expected: usize,
        got: usize,
    },
    #[error("joint `{joint}` angle {angle} outside [{min}, {max}]")]
    AngleOutOfLimits {
        joint: String,
        angle: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("failed to read model file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse model file {path}: {message}")]
    Parse { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointGroup {
    Head,
    ArmLeft,
    ArmRight,
    FingerLeft,
    FingerRight,
    Ear,
}

/// Static description of one actuated joint and the servo driving it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    /// Bus id, 1..=253.
    pub id: u8,
    pub name: String,
    pub group: JointGroup,
    pub min_angle: f64,
    pub max_angle: f64,
    /// rad/s
    pub max_speed: f64,
    /// N·m
    pub stall_torque: f64,
    /// Current ceiling of the servo class (A).
    pub stall_current: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_link: Option<u8>,
    pub axis: [f64; 3],
    /// Translation applied after the joint rotation, in meters.
    pub offset: [f64; 3],
}

impl JointSpec {
    pub fn clamp(&self, angle: f64) -> f64 {
        angle.clamp(self.min_angle, self.max_angle)
    }

    pub fn contains(&self, angle: f64) -> bool {
        angle >= self.min_angle && angle <= self.max_angle
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min_angle + self.max_angle)
    }

    pub fn range(&self) -> f64 {
        self.max_angle - self.min_angle
    }

    fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Invalid(format!("joint `{}`: {m}", self.name)));
        if !(1..=253).contains(&self.id) {
            return fail("id must be within 1..=253");
        }
        if !(self.min_angle < self.max_angle) {
            return fail("min_angle must be below max_angle");
        }
        if !(self.max_speed > 0.0) || !(self.stall_torque > 0.0) || !(self.stall_current > 0.0) {
            return fail("max_speed, stall_torque and stall_current must be positive");
        }
        let norm = Vector3::from(self.axis).norm();
        if (norm - 1.0).abs() > 1e-9 {
            return fail("axis must have unit norm");
        }
        if self.offset.iter().any(|v| !v.is_finite()) {
            return fail("offset must be finite");
        }
        Ok(())
    }
}

/// An ordered joint list rooted at the torso, with a fixed mount translation
/// placing the first joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub joints: Vec<u8>,
    #[serde(default)]
    pub mount: [f64; 3],
}

/// Tip pose in the torso frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self {
            position: iso.translation.vector,
            orientation: iso.rotation,
        }
    }
}

/// A serial chain extracted from a model, or built directly for testing.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    pub name: String,
    pub joints: Vec<JointSpec>,
    pub mount: Vector3<f64>,
}

impl KinematicChain {
    pub fn new(name: impl Into<String>, joints: Vec<JointSpec>, mount: Vector3<f64>) -> Self {
        Self {
            name: name.into(),
            joints,
            mount,
        }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// Upper bound on tip distance from the first joint.
    pub fn reach(&self) -> f64 {
        self.joints
            .iter()
            .map(|j| Vector3::from(j.offset).norm())
            .sum()
    }

    pub fn base_position(&self) -> Vector3<f64> {
        self.mount
    }

    pub fn check_angles(&self, angles: &[f64]) -> Result<(), ModelError> {
        if angles.len() != self.joints.len() {
            return Err(ModelError::AngleCount {
                chain: self.name.clone(),
                expected: self.joints.len(),
                got: angles.len(),
            });
        }
        for (joint, &angle) in self.joints.iter().zip(angles) {
            if !joint.contains(angle) {
                return Err(ModelError::AngleOutOfLimits {
                    joint: joint.name.clone(),
                    angle,
                    min: joint.min_angle,
                    max: joint.max_angle,
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, angles: &[f64]) -> Result<Pose, ModelError> {
        self.check_angles(angles)?;
        Ok(self.forward_unchecked(angles))
    }

    /// Composes `rotate(axis, angle) ∘ translate(offset)` for every link.
    /// Caller guarantees `angles.len() == self.len()`.
    pub fn forward_unchecked(&self, angles: &[f64]) -> Pose {
        let mut iso = Isometry3::from_parts(Translation3::from(self.mount), UnitQuaternion::identity());
        for (joint, &angle) in self.joints.iter().zip(angles) {
            iso *= link_transform(joint, angle);
        }
        Pose::from_isometry(&iso)
    }

    /// Sub-chain made of the first `n` links.
    pub fn prefix(&self, n: usize) -> KinematicChain {
        KinematicChain {
            name: format!("{}[..{n}]", self.name),
            joints: self.joints[..n].to_vec(),
            mount: self.mount,
        }
    }

    /// Sub-chain made of the links from `n` on, mounted at the origin.
    pub fn suffix(&self, n: usize) -> KinematicChain {
        KinematicChain {
            name: format!("{}[{n}..]", self.name),
            joints: self.joints[n..].to_vec(),
            mount: Vector3::zeros(),
        }
    }
}

pub fn link_transform(joint: &JointSpec, angle: f64) -> Isometry3<f64> {
    let axis = Unit::new_unchecked(Vector3::from(joint.axis));
    let rotation = UnitQuaternion::from_axis_angle(&axis, angle);
    Isometry3::from_parts(Translation3::identity(), rotation)
        * Isometry3::translation(joint.offset[0], joint.offset[1], joint.offset[2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub name: String,
    joints: Vec<JointSpec>,
    chains: BTreeMap<String, ChainSpec>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    name: String,
    joints: Vec<JointSpec>,
    chains: BTreeMap<String, ChainSpec>,
}

impl RobotModel {
    pub fn new(
        name: impl Into<String>,
        joints: Vec<JointSpec>,
        chains: BTreeMap<String, ChainSpec>,
    ) -> Result<Self, ModelError> {
        let model = Self {
            name: name.into(),
            joints,
            chains,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.joints.len() != JOINT_COUNT {
            return Err(ModelError::Invalid(format!(
                "expected {JOINT_COUNT} joints, found {}",
                self.joints.len()
            )));
        }
        let mut ids = HashSet::new();
        let mut names = HashSet::new();
        for joint in &self.joints {
            joint.validate()?;
            if !ids.insert(joint.id) {
                return Err(ModelError::Invalid(format!("duplicate joint id {}", joint.id)));
            }
            if !names.insert(joint.name.as_str()) {
                return Err(ModelError::Invalid(format!("duplicate joint name `{}`", joint.name)));
            }
        }
        for joint in &self.joints {
            if let Some(parent) = joint.parent_link {
                if !ids.contains(&parent) {
                    return Err(ModelError::Invalid(format!(
                        "joint `{}` has unknown parent link {parent}",
                        joint.name
                    )));
                }
            }
        }
        // Parent links must not loop back on themselves.
        for joint in &self.joints {
            let mut seen = HashSet::from([joint.id]);
            let mut cursor = joint.parent_link;
            while let Some(id) = cursor {
                if !seen.insert(id) {
                    return Err(ModelError::Invalid(format!(
                        "parent links of `{}` form a cycle",
                        joint.name
                    )));
                }
                cursor = self.joint_by_id(id).and_then(|j| j.parent_link);
            }
        }
        for (name, chain) in &self.chains {
            let mut seen = HashSet::new();
            for id in &chain.joints {
                if !ids.contains(id) {
                    return Err(ModelError::Invalid(format!(
                        "chain `{name}` references unknown joint id {id}"
                    )));
                }
                if !seen.insert(*id) {
                    return Err(ModelError::Invalid(format!(
                        "chain `{name}` visits joint {id} twice"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn joint_by_id(&self, id: u8) -> Option<&JointSpec> {
        self.joints.iter().find(|j| j.id == id)
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn joint_names(&self) -> Vec<String> {
        self.joints.iter().map(|j| j.name.clone()).collect()
    }

    pub fn chain_names(&self) -> impl Iterator<Item = &str> {
        self.chains.keys().map(String::as_str)
    }

    pub fn chain_spec(&self, name: &str) -> Option<&ChainSpec> {
        self.chains.get(name)
    }

    pub fn chain(&self, name: &str) -> Result<KinematicChain, ModelError> {
        let spec = self
            .chains
            .get(name)
            .ok_or_else(|| ModelError::UnknownChain(name.to_string()))?;
        let joints = spec
            .joints
            .iter()
            .map(|id| self.joint_by_id(*id).cloned().expect("validated chain"))
            .collect();
        Ok(KinematicChain::new(name, joints, Vector3::from(spec.mount)))
    }

    /// Joint indices (into `joints()`) of a named chain.
    pub fn chain_indices(&self, name: &str) -> Result<Vec<usize>, ModelError> {
        let spec = self
            .chains
            .get(name)
            .ok_or_else(|| ModelError::UnknownChain(name.to_string()))?;
        Ok(spec
            .joints
            .iter()
            .map(|id| self.joints.iter().position(|j| j.id == *id).expect("validated chain"))
            .collect())
    }

    /// Zero pose clamped into every joint's range.
    pub fn home_pose(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.clamp(0.0)).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            ModelError::Parse { message, .. } => ModelError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = toml::from_str(text).map_err(|e| ModelError::Parse {
            path: "<string>".into(),
            message: e.to_string(),
        })?;
        Self::new(file.name, file.joints, file.chains)
    }

    pub fn to_toml(&self) -> String {
        let file = ModelFile {
            name: self.name.clone(),
            joints: self.joints.clone(),
            chains: self.chains.clone(),
        };
        toml::to_string_pretty(&file).expect("model serializes")
    }
}

pub fn forward_kinematics(model: &RobotModel, chain: &str, angles: &[f64]) -> Result<Pose, ModelError> {
    model.chain(chain)?.forward(angles)
}

pub fn rpm_to_rad_per_s(rpm: f64) -> f64 {
    rpm * 2.0 * PI / 60.0
}

/// Servo classes fitted to the figure, with datasheet stall torque and no-load speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServoClass {
    Xm430,
    Xm540,
    S3114,
    Hk15148,
}

impl ServoClass {
    pub fn stall_torque(self) -> f64 {
        match self {
            ServoClass::Xm430 => 4.1,
            ServoClass::Xm540 => 10.6,
            ServoClass::S3114 => 0.17,
            ServoClass::Hk15148 => 0.2,
        }
    }

    pub fn speed_rpm(self) -> f64 {
        match self {
            ServoClass::Xm430 => 46.0,
            ServoClass::Xm540 => 30.0,
            ServoClass::S3114 => 100.0,
            ServoClass::Hk15148 => 55.0,
        }
    }

    /// Nominal current ceiling; free parameter of the simulation.
    pub fn stall_current(self) -> f64 {
        match self {
            ServoClass::Xm430 => 2.3,
            ServoClass::Xm540 => 4.4,
            ServoClass::S3114 => 0.6,
            ServoClass::Hk15148 => 0.7,
        }
    }
}

struct JointDef {
    id: u8,
    name: &'static str,
    group: JointGroup,
    class: ServoClass,
    limits: (f64, f64),
    parent: Option<u8>,
    axis: [f64; 3],
    offset: [f64; 3],
}

const UPPER_ARM: f64 = 0.18;
const FOREARM: f64 = 0.16;

/// The built-in 17-joint figure: 3 head joints, two 5-joint arms, one tendon
/// channel per hand and two ears.
pub fn default_model() -> RobotModel {
    use JointGroup::*;
    use ServoClass::*;
    let x = [1.0, 0.0, 0.0];
    let y = [0.0, 1.0, 0.0];
    let z = [0.0, 0.0, 1.0];
    let defs = [
        JointDef { id: 1, name: "neck_yaw", group: Head, class: Xm430, limits: (-1.2, 1.2), parent: None, axis: z, offset: [0.0, 0.0, 0.03] },
        JointDef { id: 2, name: "neck_pitch", group: Head, class: Xm430, limits: (-0.5, 0.6), parent: Some(1), axis: y, offset: [0.0, 0.0, 0.03] },
        JointDef { id: 3, name: "neck_roll", group: Head, class: Xm430, limits: (-0.4, 0.4), parent: Some(2), axis: x, offset: [0.0, 0.0, 0.10] },
        JointDef { id: 4, name: "shoulder_pitch_l", group: ArmLeft, class: Xm540, limits: (-2.6, 1.0), parent: None, axis: y, offset: [0.0, 0.03, 0.0] },
        JointDef { id: 5, name: "shoulder_roll_l", group: ArmLeft, class: Xm430, limits: (-0.2, 1.6), parent: Some(4), axis: x, offset: [0.0, 0.0, 0.0] },
        JointDef { id: 6, name: "upper_arm_yaw_l", group: ArmLeft, class: Xm430, limits: (-1.5, 1.5), parent: Some(5), axis: z, offset: [0.0, 0.0, -UPPER_ARM] },
        JointDef { id: 7, name: "elbow_l", group: ArmLeft, class: Xm430, limits: (-2.2, 0.05), parent: Some(6), axis: y, offset: [0.0, 0.0, -FOREARM] },
        JointDef { id: 8, name: "wrist_yaw_l", group: ArmLeft, class: Xm430, limits: (-1.5, 1.5), parent: Some(7), axis: z, offset: [0.0, 0.0, -0.05] },
        JointDef { id: 9, name: "shoulder_pitch_r", group: ArmRight, class: Xm540, limits: (-2.6, 1.0), parent: None, axis: y, offset: [0.0, -0.03, 0.0] },
        JointDef { id: 10, name: "shoulder_roll_r", group: ArmRight, class: Xm430, limits: (-1.6, 0.2), parent: Some(9), axis: x, offset: [0.0, 0.0, 0.0] },
        JointDef { id: 11, name: "upper_arm_yaw_r", group: ArmRight, class: Xm430, limits: (-1.5, 1.5), parent: Some(10), axis: z, offset: [0.0, 0.0, -UPPER_ARM] },
        JointDef { id: 12, name: "elbow_r", group: ArmRight, class: Xm430, limits: (-2.2, 0.05), parent: Some(11), axis: y, offset: [0.0, 0.0, -FOREARM] },
        JointDef { id: 13, name: "wrist_yaw_r", group: ArmRight, class: Xm430, limits: (-1.5, 1.5), parent: Some(12), axis: z, offset: [0.0, 0.0, -0.05] },
        JointDef { id: 14, name: "fingers_l", group: FingerLeft, class: S3114, limits: (0.0, 1.5), parent: Some(8), axis: x, offset: [0.0, 0.0, -0.04] },
        JointDef { id: 15, name: "fingers_r", group: FingerRight, class: S3114, limits: (0.0, 1.5), parent: Some(13), axis: x, offset: [0.0, 0.0, -0.04] },
        JointDef { id: 16, name: "ear_l", group: Ear, class: Hk15148, limits: (-0.6, 0.6), parent: Some(3), axis: y, offset: [0.0, 0.05, 0.06] },
        JointDef { id: 17, name: "ear_r", group: Ear, class: Hk15148, limits: (-0.6, 0.6), parent: Some(3), axis: y, offset: [0.0, -0.05, 0.06] },
    ];
    let joints = defs
        .into_iter()
        .map(|d| JointSpec {
            id: d.id,
            name: d.name.to_string(),
            group: d.group,
            min_angle: d.limits.0,
            max_angle: d.limits.1,
            max_speed: rpm_to_rad_per_s(d.class.speed_rpm()),
            stall_torque: d.class.stall_torque(),
            stall_current: d.class.stall_current(),
            parent_link: d.parent,
            axis: d.axis,
            offset: d.offset,
        })
        .collect();
    let chains = BTreeMap::from([
        ("head".to_string(), ChainSpec { joints: vec![1, 2, 3], mount: [0.0, 0.0, 0.20] }),
        ("arm_left".to_string(), ChainSpec { joints: vec![4, 5, 6, 7, 8], mount: [0.0, 0.13, 0.15] }),
        ("arm_right".to_string(), ChainSpec { joints: vec![9, 10, 11, 12, 13], mount: [0.0, -0.13, 0.15] }),
    ]);
    RobotModel::new("mk1", joints, chains).expect("built-in model is valid")
}

/// Runtime state of one servo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServoState {
    pub position: f64,
    pub goal: f64,
    pub torque_enabled: bool,
    /// Amperes.
    pub current_estimate: f64,
}

impl ServoState {
    /// Holding `position` with torque on.
    pub fn holding(position: f64) -> Self {
        Self {
            position,
            goal: position,
            torque_enabled: true,
            current_estimate: 0.0,
        }
    }
}

/// Advances one servo by `dt` seconds of first-order lag, saturated at the
/// joint's speed limit. With torque off the shaft only moves under external force.
pub fn step_servo(spec: &JointSpec, state: &ServoState, dt: f64) -> ServoState {
    debug_assert!(dt > 0.0);
    let mut next = *state;
    if !state.torque_enabled {
        next.current_estimate = 0.0;
        return next;
    }
    let goal = spec.clamp(state.goal);
    let error = goal - state.position;
    let lag_step = error * (1.0 - (-SERVO_RATE_CONSTANT * dt).exp());
    let max_step = spec.max_speed * dt;
    let step = lag_step.clamp(-max_step, max_step);
    next.position = spec.clamp(state.position + step);
    next.current_estimate = (CURRENT_GAIN * (state.goal - next.position).abs()).min(spec.stall_current);
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn lever(axis: [f64; 3], offset: [f64; 3]) -> JointSpec {
        JointSpec {
            id: 1,
            name: "j".into(),
            group: JointGroup::Head,
            min_angle: -PI,
            max_angle: PI,
            max_speed: 1.0,
            stall_torque: 1.0,
            stall_current: 1.0,
            parent_link: None,
            axis,
            offset,
        }
    }

    fn planar(l1: f64, l2: f64) -> KinematicChain {
        let mut b = lever([0.0, 0.0, 1.0], [l2, 0.0, 0.0]);
        b.id = 2;
        KinematicChain::new("planar", vec![lever([0.0, 0.0, 1.0], [l1, 0.0, 0.0]), b], Vector3::zeros())
    }

    #[test]
    fn default_model_has_17_joints() {
        let model = default_model();
        assert_eq!(model.joints().len(), 17);
    }

    #[test]
    fn servo_classes_match_datasheet() {
        let model = default_model();
        for name in ["shoulder_pitch_l", "shoulder_pitch_r"] {
            let j = &model.joints()[model.joint_index(name).unwrap()];
            assert_eq!(j.stall_torque, 10.6);
            assert_abs_diff_eq!(j.max_speed, 3.142, epsilon = 5e-4);
        }
        let neck = &model.joints()[0];
        assert_abs_diff_eq!(neck.max_speed, 46.0 * 2.0 * PI / 60.0, epsilon = 1e-12);
        assert_abs_diff_eq!(neck.max_speed, 4.817, epsilon = 5e-4);
        assert_eq!(neck.stall_torque, 4.1);
        let finger = &model.joints()[model.joint_index("fingers_l").unwrap()];
        assert_abs_diff_eq!(finger.max_speed, 10.472, epsilon = 5e-4);
        let ear = &model.joints()[model.joint_index("ear_r").unwrap()];
        assert_abs_diff_eq!(ear.max_speed, 5.760, epsilon = 5e-4);
    }

    #[test]
    fn group_split_is_3_5_5_1_1_2() {
        let model = default_model();
        let count = |g| model.joints().iter().filter(|j| j.group == g).count();
        assert_eq!(count(JointGroup::Head), 3);
        assert_eq!(count(JointGroup::ArmLeft), 5);
        assert_eq!(count(JointGroup::ArmRight), 5);
        assert_eq!(count(JointGroup::FingerLeft), 1);
        assert_eq!(count(JointGroup::FingerRight), 1);
        assert_eq!(count(JointGroup::Ear), 2);
    }

    #[test]
    fn model_file_round_trip() {
        let model = default_model();
        let back = RobotModel::from_toml(&model.to_toml()).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn model_rejects_wrong_joint_count_and_bad_chain() {
        let model = default_model();
        let mut joints = model.joints().to_vec();
        joints.pop();
        assert!(matches!(
            RobotModel::new("x", joints, BTreeMap::new()),
            Err(ModelError::Invalid(_))
        ));
        let chains = BTreeMap::from([("bad".to_string(), ChainSpec { joints: vec![99], mount: [0.0; 3] })]);
        assert!(RobotModel::new("x", model.joints().to_vec(), chains).is_err());
        let mut dup = model.joints().to_vec();
        dup[1].id = 1;
        assert!(RobotModel::new("x", dup, BTreeMap::new()).is_err());
        let mut skew = model.joints().to_vec();
        skew[0].axis = [1.0, 1.0, 0.0];
        assert!(RobotModel::new("x", skew, BTreeMap::new()).is_err());
        let mut cyc = model.joints().to_vec();
        cyc[0].parent_link = Some(3);
        assert!(RobotModel::new("x", cyc, BTreeMap::new()).is_err());
    }

    #[test]
    fn fk_home_pose_is_sum_of_offsets() {
        let model = default_model();
        let chain = model.chain("arm_left").unwrap();
        let pose = chain.forward(&[0.0; 5]).unwrap();
        let expected = chain.mount
            + chain.joints.iter().map(|j| Vector3::from(j.offset)).sum::<Vector3<f64>>();
        assert_abs_diff_eq!(pose.position, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(pose.orientation.angle(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn fk_quarter_turn_lever() {
        let l = 0.3;
        let chain = KinematicChain::new("one", vec![lever([0.0, 0.0, 1.0], [l, 0.0, 0.0])], Vector3::zeros());
        let pose = chain.forward(&[FRAC_PI_2]).unwrap();
        assert_abs_diff_eq!(pose.position, Vector3::new(0.0, l, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn fk_two_link_matches_closed_form() {
        let (l1, l2) = (0.2, 0.15);
        let chain = planar(l1, l2);
        for &(q1, q2) in &[(0.3, -0.7), (1.2, 2.0), (-2.5, 0.4)] {
            let p = chain.forward(&[q1, q2]).unwrap().position;
            assert_abs_diff_eq!(p.x, l1 * f64::cos(q1) + l2 * f64::cos(q1 + q2), epsilon = 1e-12);
            assert_abs_diff_eq!(p.y, l1 * f64::sin(q1) + l2 * f64::sin(q1 + q2), epsilon = 1e-12);
            assert_abs_diff_eq!(p.z, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fk_errors() {
        let model = default_model();
        assert!(matches!(
            forward_kinematics(&model, "tail", &[0.0]),
            Err(ModelError::UnknownChain(_))
        ));
        assert!(matches!(
            forward_kinematics(&model, "head", &[0.0, 0.0]),
            Err(ModelError::AngleCount { .. })
        ));
        assert!(matches!(
            forward_kinematics(&model, "head", &[0.0, 3.0, 0.0]),
            Err(ModelError::AngleOutOfLimits { .. })
        ));
    }

    #[test]
    fn servo_torque_off_holds_position() {
        let spec = lever([0.0, 0.0, 1.0], [0.0; 3]);
        let state = ServoState {
            position: 0.3,
            goal: -2.0,
            torque_enabled: false,
            current_estimate: 1.0,
        };
        let next = step_servo(&spec, &state, 0.02);
        assert_eq!(next.position, 0.3);
        assert_eq!(next.current_estimate, 0.0);
    }

    #[test]
    fn servo_speed_limited_step() {
        let spec = lever([0.0, 0.0, 1.0], [0.0; 3]);
        let state = ServoState {
            position: 0.0,
            goal: 3.0,
            torque_enabled: true,
            current_estimate: 0.0,
        };
        let next = step_servo(&spec, &state, 0.02);
        assert_abs_diff_eq!(next.position, 0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(next.current_estimate, (0.5 * 2.98f64).min(1.0), epsilon = 1e-12);
    }

    #[test]
    fn servo_fixed_point() {
        let spec = lever([0.0, 0.0, 1.0], [0.0; 3]);
        let state = ServoState::holding(0.7);
        assert_eq!(step_servo(&spec, &state, 0.02), state);
    }

    fn arb_angles(chain: &KinematicChain) -> impl Strategy<Value = Vec<f64>> {
        chain
            .joints
            .iter()
            .map(|j| j.min_angle..=j.max_angle)
            .collect::<Vec<_>>()
    }

    proptest! {
        #[test]
        fn servo_stays_in_limits_and_converges_monotonically(
            start in -1.2f64..1.2,
            goals in proptest::collection::vec(-3.0f64..3.0, 1..8),
            dt in 0.001f64..0.1,
        ) {
            let model = default_model();
            let spec = &model.joints()[0];
            let mut state = ServoState::holding(start);
            for goal in goals {
                state.goal = goal;
                let mut gap = (spec.clamp(goal) - state.position).abs();
                for _ in 0..20 {
                    state = step_servo(spec, &state, dt);
                    prop_assert!(spec.contains(state.position));
                    let next_gap = (spec.clamp(goal) - state.position).abs();
                    prop_assert!(next_gap <= gap + 1e-15);
                    gap = next_gap;
                }
            }
        }

        #[test]
        fn fk_composes_over_prefixes(split in 0usize..=5, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let model = default_model();
            let chain = model.chain("arm_right").unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let angles: Vec<f64> = chain.joints.iter().map(|j| rng.random_range(j.min_angle..=j.max_angle)).collect();
            let whole = chain.forward(&angles).unwrap();
            let head = chain.prefix(split).forward(&angles[..split]).unwrap();
            let tail = chain.suffix(split).forward(&angles[split..]).unwrap();
            let composed = head.position + head.orientation * tail.position;
            prop_assert!((composed - whole.position).norm() < 1e-12);
            prop_assert!((head.orientation * tail.orientation).angle_to(&whole.orientation) < 1e-9);
        }

        #[test]
        fn fk_accepts_any_in_limit_pose(angles in arb_angles(&default_model().chain("head").unwrap())) {
            let model = default_model();
            prop_assert!(forward_kinematics(&model, "head", &angles).is_ok());
        }
    }

    #[test]
    fn quaternion_norm_survives_long_compositions() {
        use rand::{Rng, SeedableRng};
        let model = default_model();
        let chain = model.chain("arm_left").unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut q = UnitQuaternion::identity();
        for _ in 0..10_000 {
            let angles: Vec<f64> = chain.joints.iter().map(|j| rng.random_range(j.min_angle..=j.max_angle)).collect();
            q *= chain.forward(&angles).unwrap().orientation;
            q = UnitQuaternion::new_unchecked(*q.quaternion());
        }
        assert!((q.quaternion().norm() - 1.0).abs() < 1e-9);
    }
}
