//! Multiple-timescale recurrent network policy.
//!
//! Neurons are laid out as `[IO | Cf | Cs]`. Each is a leaky integrator
//!
//! ```text
//! u_i <- (1 - 1/tau_i) u_i + (1/tau_i) (sum_j W_ij z_j + b_i),   y = tanh(u)
//! ```
//!
//! where `z` is the previous activation vector with its IO block replaced by
//! the external input. Connectivity is IO<->Cf, Cf<->Cs and recurrence inside
//! Cf and inside Cs; there is no IO->IO and no IO<->Cs path. Every trained
//! sequence owns a learnable initial Cs potential that selects it at
//! generation time.

use std::ops::{ControlFlow, Range};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{CommandVocabulary, Dataset, NormalizedSequence};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MtrnnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sequence `{0}` needs at least two steps")]
    SequenceTooShort(String),
    #[error("dataset has {dataset} sequences but the network holds {network} initial Cs states")]
    SequenceCount { dataset: usize, network: usize },
    #[error("unknown sequence id {id} (network knows {count})")]
    UnknownSequence { id: usize, count: usize },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("input component {value} at index {index} outside [-1, 1]")]
    InputRange { index: usize, value: f64 },
    #[error("malformed checkpoint {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtrnnConfig {
    pub n_io: usize,
    pub n_cf: usize,
    pub n_cs: usize,
    pub tau_io: f64,
    pub tau_cf: f64,
    pub tau_cs: f64,
    /// Start the IO potentials at `atanh` of the initial posture instead of 0,
    /// so the first output already equals the starting frame.
    #[serde(default)]
    pub posture_init: bool,
}

impl MtrnnConfig {
    pub fn with_io(n_io: usize) -> Self {
        Self {
            n_io,
            n_cf: 60,
            n_cs: 20,
            tau_io: 2.0,
            tau_cf: 5.0,
            tau_cs: 70.0,
            posture_init: false,
        }
    }

    pub fn validate(&self) -> Result<(), MtrnnError> {
        if self.n_io == 0 || self.n_cf == 0 || self.n_cs == 0 {
            return Err(MtrnnError::Config("neuron counts must be positive".into()));
        }
        if [self.tau_io, self.tau_cf, self.tau_cs].iter().any(|t| !(*t >= 1.0)) {
            return Err(MtrnnError::Config("time constants must be >= 1".into()));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.n_io + self.n_cf + self.n_cs
    }

    pub fn io(&self) -> Range<usize> {
        0..self.n_io
    }

    pub fn cf(&self) -> Range<usize> {
        self.n_io..self.n_io + self.n_cf
    }

    pub fn cs(&self) -> Range<usize> {
        self.n_io + self.n_cf..self.size()
    }

    pub fn tau(&self, neuron: usize) -> f64 {
        if neuron < self.n_io {
            self.tau_io
        } else if neuron < self.n_io + self.n_cf {
            self.tau_cf
        } else {
            self.tau_cs
        }
    }

    /// 1 where `W[i][j]` (j feeds i) is a trainable connection.
    pub fn mask(&self) -> DMatrix<f64> {
        #[derive(PartialEq)]
        enum G {
            Io,
            Cf,
            Cs,
        }
        let group = |k: usize| {
            if k < self.n_io {
                G::Io
            } else if k < self.n_io + self.n_cf {
                G::Cf
            } else {
                G::Cs
            }
        };
        let n = self.size();
        DMatrix::from_fn(n, n, |i, j| {
            let connected = matches!(
                (group(i), group(j)),
                (G::Io, G::Cf) | (G::Cf, G::Io) | (G::Cf, G::Cf) | (G::Cf, G::Cs) | (G::Cs, G::Cf) | (G::Cs, G::Cs)
            );
            if connected {
                1.0
            } else {
                0.0
            }
        })
    }

    fn alpha(&self) -> DVector<f64> {
        DVector::from_fn(self.size(), |i, _| 1.0 / self.tau(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState {
    pub potentials: DVector<f64>,
    pub activations: DVector<f64>,
}

impl NeuronState {
    pub fn from_potentials(potentials: DVector<f64>) -> Self {
        let activations = potentials.map(f64::tanh);
        Self {
            potentials,
            activations,
        }
    }
}

/// Where generation takes its initial slow context from.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextSource {
    Sequence(usize),
    Raw(Vec<f64>),
}

/// Per-sequence bookkeeping stored with a trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceInfo {
    pub name: String,
    pub length: usize,
    pub rate_hz: f64,
    pub initial_posture: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMetadata {
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub optimizer: Option<Optimizer>,
    pub model_id: String,
    pub vocabulary: Option<CommandVocabulary>,
    pub sequences: Vec<SequenceInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtrnnNetwork {
    pub config: MtrnnConfig,
    /// `weights[(i, j)]` is the connection from neuron j to neuron i.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// One initial Cs potential vector per trained sequence.
    pub initial_cs: Vec<DVector<f64>>,
    pub metadata: TrainingMetadata,
    mask: DMatrix<f64>,
}

impl MtrnnNetwork {
    /// All parameters zero.
    pub fn zeros(config: MtrnnConfig, sequences: usize) -> Result<Self, MtrnnError> {
        config.validate()?;
        let n = config.size();
        Ok(Self {
            weights: DMatrix::zeros(n, n),
            bias: DVector::zeros(n),
            initial_cs: vec![DVector::zeros(config.n_cs); sequences],
            mask: config.mask(),
            metadata: TrainingMetadata::default(),
            config,
        })
    }

    /// Uniform weights in `±scale/sqrt(fan_in)` on the masked connections,
    /// zero bias and zero initial Cs.
    pub fn random(config: MtrnnConfig, sequences: usize, scale: f64, seed: u64) -> Result<Self, MtrnnError> {
        let mut net = Self::zeros(config, sequences)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = net.config.size();
        for i in 0..n {
            let fan_in: f64 = net.mask.row(i).sum();
            let bound = scale / fan_in.max(1.0).sqrt();
            for j in 0..n {
                if net.mask[(i, j)] != 0.0 {
                    net.weights[(i, j)] = rng.random_range(-bound..=bound);
                }
            }
        }
        Ok(net)
    }

    pub fn mask(&self) -> &DMatrix<f64> {
        &self.mask
    }

    pub fn sequence_count(&self) -> usize {
        self.initial_cs.len()
    }

    /// IO potentials start at `atanh` of the (clamped) posture, Cf at zero and
    /// Cs at the chosen initial context.
    pub fn initial_state(&self, context: &ContextSource, posture: &[f64]) -> Result<NeuronState, MtrnnError> {
        if posture.len() != self.config.n_io {
            return Err(MtrnnError::DimensionMismatch {
                expected: self.config.n_io,
                got: posture.len(),
            });
        }
        let cs = match context {
            ContextSource::Sequence(id) => self
                .initial_cs
                .get(*id)
                .ok_or(MtrnnError::UnknownSequence {
                    id: *id,
                    count: self.initial_cs.len(),
                })?
                .clone(),
            ContextSource::Raw(v) => {
                if v.len() != self.config.n_cs {
                    return Err(MtrnnError::DimensionMismatch {
                        expected: self.config.n_cs,
                        got: v.len(),
                    });
                }
                DVector::from_column_slice(v)
            }
        };
        Ok(NeuronState::from_potentials(initial_potentials(&self.config, posture, &cs)))
    }

    /// One leaky-integrator update with the IO block clamped to `input`.
    pub fn forward_step(&self, state: &NeuronState, input: &[f64]) -> Result<(NeuronState, Vec<f64>), MtrnnError> {
        let n_io = self.config.n_io;
        if input.len() != n_io {
            return Err(MtrnnError::DimensionMismatch {
                expected: n_io,
                got: input.len(),
            });
        }
        if state.potentials.len() != self.config.size() {
            return Err(MtrnnError::DimensionMismatch {
                expected: self.config.size(),
                got: state.potentials.len(),
            });
        }
        if let Some((index, &value)) = input.iter().enumerate().find(|(_, x)| !(-1.0..=1.0).contains(*x)) {
            return Err(MtrnnError::InputRange { index, value });
        }
        let mut z = state.activations.clone();
        z.rows_mut(0, n_io).copy_from_slice(input);
        let mut drive = self.bias.clone();
        drive.gemv(1.0, &self.weights, &z, 1.0);
        let potentials = DVector::from_fn(self.config.size(), |i, _| {
            let a = 1.0 / self.config.tau(i);
            (1.0 - a) * state.potentials[i] + a * drive[i]
        });
        let next = NeuronState::from_potentials(potentials);
        let output = next.activations.rows(0, n_io).iter().copied().collect();
        Ok((next, output))
    }

    /// Closed-loop rollout: the first input is `initial_posture`, every later
    /// input is the previous output. Returns `steps` outputs.
    pub fn generate(
        &self,
        context: &ContextSource,
        initial_posture: &[f64],
        steps: usize,
    ) -> Result<Vec<Vec<f64>>, MtrnnError> {
        let mut state = self.initial_state(context, initial_posture)?;
        let mut input = initial_posture.to_vec();
        let mut outputs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (next, output) = self.forward_step(&state, &input)?;
            state = next;
            input.clone_from(&output);
            outputs.push(output);
        }
        Ok(outputs)
    }

    /// Closed-loop trajectory aligned with a teacher: frame 0 is the initial
    /// posture, frame t is the output of step t-1.
    pub fn generate_sequence(
        &self,
        context: &ContextSource,
        initial_posture: &[f64],
        length: usize,
        name: impl Into<String>,
        rate_hz: f64,
    ) -> Result<NormalizedSequence, MtrnnError> {
        let mut vectors = Vec::with_capacity(length);
        if length > 0 {
            vectors.push(initial_posture.to_vec());
            vectors.extend(self.generate(context, initial_posture, length - 1)?);
        }
        Ok(NormalizedSequence {
            name: name.into(),
            rate_hz,
            vectors,
        })
    }

    /// Teacher-forced pass recording Cs activations; one row per teacher step.
    pub fn rollout_states(&self, context: &ContextSource, teacher: &NormalizedSequence) -> Result<DMatrix<f64>, MtrnnError> {
        let mut out = DMatrix::zeros(teacher.len(), self.config.n_cs);
        let Some(first) = teacher.vectors.first() else {
            return Ok(out);
        };
        let mut state = self.initial_state(context, first)?;
        let cs = self.config.cs();
        for (t, x) in teacher.vectors.iter().enumerate() {
            state = self.forward_step(&state, x)?.0;
            for (k, i) in cs.clone().enumerate() {
                out[(t, k)] = state.activations[i];
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MtrnnError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| MtrnnError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> { m.row_iter().map(|r| r.iter().copied().collect()).collect() };
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            weights: rows(&self.weights),
            mask: self.mask.row_iter().map(|r| r.iter().map(|&m| m as u8).collect()).collect(),
            bias: self.bias.iter().copied().collect(),
            initial_cs: self.initial_cs.iter().map(|v| v.iter().copied().collect()).collect(),
            metadata: self.metadata.clone(),
        };
        let mut text = serde_json::to_string(&file).expect("checkpoint serializes");
        text.push('\n');
        text
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MtrnnError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MtrnnError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            MtrnnError::Malformed { message, .. } => MtrnnError::Malformed {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, MtrnnError> {
        let malformed = |message: String| MtrnnError::Malformed {
            path: "<string>".into(),
            message,
        };
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        if file.format_version != CHECKPOINT_VERSION {
            return Err(MtrnnError::Version(file.format_version));
        }
        file.config.validate()?;
        let n = file.config.size();
        let mask = file.config.mask();
        if file.weights.len() != n || file.weights.iter().any(|r| r.len() != n) || file.bias.len() != n {
            return Err(malformed(format!("weights/bias must be sized for {n} neurons")));
        }
        let stored_mask_ok = file.mask.len() == n
            && file
                .mask
                .iter()
                .enumerate()
                .all(|(i, r)| r.len() == n && r.iter().enumerate().all(|(j, &m)| m as f64 == mask[(i, j)]));
        if !stored_mask_ok {
            return Err(malformed("connectivity mask does not match config".into()));
        }
        let weights = DMatrix::from_fn(n, n, |i, j| file.weights[i][j]);
        if weights.iter().zip(mask.iter()).any(|(w, m)| *m == 0.0 && *w != 0.0) {
            return Err(malformed("masked weight is nonzero".into()));
        }
        if file.initial_cs.iter().any(|v| v.len() != file.config.n_cs) {
            return Err(malformed("initial Cs vectors must have n_cs entries".into()));
        }
        Ok(Self {
            weights,
            bias: DVector::from_vec(file.bias),
            initial_cs: file.initial_cs.into_iter().map(DVector::from_vec).collect(),
            metadata: file.metadata,
            mask,
            config: file.config,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: MtrnnConfig,
    weights: Vec<Vec<f64>>,
    mask: Vec<Vec<u8>>,
    bias: Vec<f64>,
    initial_cs: Vec<Vec<f64>>,
    metadata: TrainingMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient norm ceiling.
    pub clip_norm: f64,
    pub seed: u64,
    pub report_interval: usize,
    /// Scale of the uniform weight initialization, relative to `1/sqrt(fan_in)`.
    pub init_scale: f64,
    pub optimizer: Optimizer,
    /// Share of each training input (after the first step) taken from the
    /// network's own previous output instead of the teacher. 0 is full
    /// teacher forcing.
    pub feedback: f64,
}

/// Update rule applied to the clipped gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// `v <- momentum * v - lr * g; p <- p + v`
    Momentum,
    /// Bias-corrected adaptive moments; `momentum` is the first-moment decay.
    /// With `amsgrad` the step is scaled by the largest second moment seen so
    /// far, which keeps late-training steps from growing again.
    Adam {
        beta2: f64,
        epsilon: f64,
        #[serde(default)]
        amsgrad: bool,
    },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta2: 0.999,
            epsilon: 1e-8,
            amsgrad: false,
        }
    }

    pub fn amsgrad() -> Self {
        Optimizer::Adam {
            beta2: 0.999,
            epsilon: 1e-8,
            amsgrad: true,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20_000,
            learning_rate: 0.002,
            momentum: 0.9,
            clip_norm: 1.0,
            seed: 0,
            report_interval: 100,
            init_scale: 1.0,
            optimizer: Optimizer::Momentum,
            feedback: 0.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), MtrnnError> {
        if self.epochs == 0 || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.clip_norm > 0.0) {
            return Err(MtrnnError::Config(
                "epochs and learning_rate must be positive, momentum in [0, 1), clip_norm positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.feedback) {
            return Err(MtrnnError::Config("feedback must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Gradient of the training loss with respect to every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub initial_cs: Vec<DVector<f64>>,
}

impl Gradients {
    fn zeros_like(net: &MtrnnNetwork) -> Self {
        let n = net.config.size();
        Self {
            weights: DMatrix::zeros(n, n),
            bias: DVector::zeros(n),
            initial_cs: vec![DVector::zeros(net.config.n_cs); net.initial_cs.len()],
        }
    }

    pub fn norm(&self) -> f64 {
        let sq = self.weights.norm_squared()
            + self.bias.norm_squared()
            + self.initial_cs.iter().map(|v| v.norm_squared()).sum::<f64>();
        sq.sqrt()
    }

    fn scale(&mut self, k: f64) {
        self.weights *= k;
        self.bias *= k;
        for v in &mut self.initial_cs {
            *v *= k;
        }
    }
}

fn check_dataset(net: &MtrnnNetwork, sequences: &[NormalizedSequence]) -> Result<(), MtrnnError> {
    if sequences.is_empty() {
        return Err(MtrnnError::EmptyDataset);
    }
    if sequences.len() != net.initial_cs.len() {
        return Err(MtrnnError::SequenceCount {
            dataset: sequences.len(),
            network: net.initial_cs.len(),
        });
    }
    for seq in sequences {
        if seq.len() < 2 {
            return Err(MtrnnError::SequenceTooShort(seq.name.clone()));
        }
        if let Some(bad) = seq.vectors.iter().find(|v| v.len() != net.config.n_io) {
            return Err(MtrnnError::DimensionMismatch {
                expected: net.config.n_io,
                got: bad.len(),
            });
        }
    }
    Ok(())
}

/// Teacher-forced prediction loss: mean over sequences of the per-component
/// squared error between step t's output and teacher vector t+1, averaged
/// over steps.
pub fn loss(net: &MtrnnNetwork, sequences: &[NormalizedSequence]) -> Result<f64, MtrnnError> {
    loss_with_feedback(net, sequences, 0.0)
}

/// Loss and its exact gradient by backpropagation through time.
pub fn loss_and_gradients(net: &MtrnnNetwork, sequences: &[NormalizedSequence]) -> Result<(f64, Gradients), MtrnnError> {
    loss_and_gradients_with_feedback(net, sequences, 0.0)
}

/// [`loss`] with inputs mixed as `(1 - feedback) * teacher + feedback * previous output`.
pub fn loss_with_feedback(net: &MtrnnNetwork, sequences: &[NormalizedSequence], feedback: f64) -> Result<f64, MtrnnError> {
    check_dataset(net, sequences)?;
    let mut total = 0.0;
    for (s, seq) in sequences.iter().enumerate() {
        total += sequence_pass(net, s, seq, feedback, None);
    }
    Ok(total / sequences.len() as f64)
}

pub fn loss_and_gradients_with_feedback(
    net: &MtrnnNetwork,
    sequences: &[NormalizedSequence],
    feedback: f64,
) -> Result<(f64, Gradients), MtrnnError> {
    check_dataset(net, sequences)?;
    let mut grads = Gradients::zeros_like(net);
    let mut total = 0.0;
    for (s, seq) in sequences.iter().enumerate() {
        total += sequence_pass(net, s, seq, feedback, Some(&mut grads));
    }
    let k = 1.0 / sequences.len() as f64;
    grads.scale(k);
    Ok((total * k, grads))
}

/// Largest magnitude used when inverting a posture into IO potentials.
pub const POSTURE_CLAMP: f64 = 0.95;

fn initial_potentials(cfg: &MtrnnConfig, posture: &[f64], cs: &DVector<f64>) -> DVector<f64> {
    let mut u = DVector::zeros(cfg.size());
    if cfg.posture_init {
        for (i, &x) in posture.iter().enumerate() {
            u[i] = x.clamp(-POSTURE_CLAMP, POSTURE_CLAMP).atanh();
        }
    }
    u.rows_mut(cfg.n_io + cfg.n_cf, cfg.n_cs).copy_from(cs);
    u
}

/// Forward pass over one sequence; when `grads` is given, accumulates the
/// gradient of this sequence's loss into it.
fn sequence_pass(
    net: &MtrnnNetwork,
    index: usize,
    seq: &NormalizedSequence,
    feedback: f64,
    grads: Option<&mut Gradients>,
) -> f64 {
    let cfg = &net.config;
    let n = cfg.size();
    let n_io = cfg.n_io;
    let steps = seq.len() - 1;
    let alpha = cfg.alpha();
    let leak = alpha.map(|a| 1.0 - a);

    let mut u = initial_potentials(cfg, &seq.vectors[0], &net.initial_cs[index]);
    let y_init = u.map(f64::tanh);
    let mut y = y_init.clone();

    let keep = grads.is_some();
    let mut zs = if keep { DMatrix::zeros(n, steps) } else { DMatrix::zeros(0, 0) };
    let mut ys = if keep { DMatrix::zeros(n, steps) } else { DMatrix::zeros(0, 0) };
    let mut z = DVector::zeros(n);
    let mut drive = DVector::zeros(n);
    let mut sq_err = 0.0;

    for t in 0..steps {
        z.copy_from(&y);
        let input = &seq.vectors[t];
        if t == 0 || feedback == 0.0 {
            z.rows_mut(0, n_io).copy_from_slice(input);
        } else {
            for i in 0..n_io {
                z[i] = (1.0 - feedback) * input[i] + feedback * y[i];
            }
        }
        drive.copy_from(&net.bias);
        drive.gemv(1.0, &net.weights, &z, 1.0);
        for i in 0..n {
            u[i] = leak[i] * u[i] + alpha[i] * drive[i];
            y[i] = u[i].tanh();
        }
        let target = &seq.vectors[t + 1];
        for i in 0..n_io {
            let e = y[i] - target[i];
            sq_err += e * e;
        }
        if keep {
            zs.column_mut(t).copy_from(&z);
            ys.column_mut(t).copy_from(&y);
        }
    }
    let norm = 1.0 / (steps * n_io) as f64;
    let loss = sq_err * norm;

    let Some(grads) = grads else {
        return loss;
    };

    // Backward sweep. `da` holds dL/d(drive) for the step after the current one.
    let mut das = DMatrix::zeros(n, steps);
    let mut du_next = DVector::<f64>::zeros(n);
    let mut back = DVector::<f64>::zeros(n);
    let mut du = DVector::<f64>::zeros(n);
    // The 1/S sequence average is applied by the caller.
    let err_scale = 2.0 * norm;
    for t in (0..steps).rev() {
        if t + 1 < steps {
            back.gemv_tr(1.0, &net.weights, &das.column(t + 1), 0.0);
        } else {
            back.fill(0.0);
        }
        let target = &seq.vectors[t + 1];
        for i in 0..n {
            let y_ti = ys[(i, t)];
            // IO activations reach the next step only through the feedback share.
            let dy = if i < n_io {
                err_scale * (y_ti - target[i]) + feedback * back[i]
            } else {
                back[i]
            };
            du[i] = dy * (1.0 - y_ti * y_ti) + leak[i] * du_next[i];
        }
        das.column_mut(t).copy_from(&du.component_mul(&alpha));
        du_next.copy_from(&du);
    }
    // Initial state: only the non-IO activations reach step 0 through z.
    back.gemv_tr(1.0, &net.weights, &das.column(0), 0.0);
    let cs = cfg.cs();
    let mut dcs = DVector::zeros(cfg.n_cs);
    for (k, i) in cs.enumerate() {
        let du0 = back[i] * (1.0 - y_init[i] * y_init[i]) + leak[i] * du_next[i];
        dcs[k] = du0;
    }
    grads.initial_cs[index] += dcs;

    let mut dw = &das * zs.transpose();
    dw.component_mul_assign(&net.mask);
    grads.weights += dw;
    grads.bias += das.column_sum();
    loss
}

/// A recorded point of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub loss: f64,
}

pub fn train(net: &mut MtrnnNetwork, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<LossPoint>, MtrnnError> {
    train_with_progress(net, dataset, cfg, |_, _| ControlFlow::Continue(()))
}

/// Trains on a dataset and records its vocabulary and model id in the
/// network metadata.
pub fn train_with_progress(
    net: &mut MtrnnNetwork,
    dataset: &Dataset,
    cfg: &TrainConfig,
    progress: impl FnMut(usize, f64) -> ControlFlow<()>,
) -> Result<Vec<LossPoint>, MtrnnError> {
    if dataset.dim() != net.config.n_io {
        return Err(MtrnnError::DimensionMismatch {
            expected: net.config.n_io,
            got: dataset.dim(),
        });
    }
    let curve = fit(net, &dataset.sequences, cfg, progress)?;
    net.metadata.model_id = dataset.model_id.clone();
    net.metadata.vocabulary = Some(dataset.vocabulary.clone());
    Ok(curve)
}

/// Full-batch BPTT with global-norm clipping. `progress` is called after
/// every epoch and may stop training early. The curve holds epoch 1, every
/// `report_interval`-th epoch and the last one.
pub fn fit(
    net: &mut MtrnnNetwork,
    sequences: &[NormalizedSequence],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64) -> ControlFlow<()>,
) -> Result<Vec<LossPoint>, MtrnnError> {
    cfg.validate()?;
    check_dataset(net, sequences)?;

    let mut state = OptimizerState::new(net, cfg.optimizer);
    let mut curve = Vec::new();
    let mut last = f64::NAN;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        let (loss, mut grads) = loss_and_gradients_with_feedback(net, sequences, cfg.feedback)?;
        if !loss.is_finite() {
            return Err(MtrnnError::Diverged { epoch, loss });
        }
        let norm = grads.norm();
        if norm > cfg.clip_norm {
            grads.scale(cfg.clip_norm / norm);
        }
        state.apply(net, &grads, cfg);
        last = loss;
        epochs_run = epoch;
        let stop = progress(epoch, loss).is_break();
        if epoch % cfg.report_interval.max(1) == 0 || epoch == cfg.epochs || epoch == 1 || stop {
            curve.push(LossPoint { epoch, loss });
        }
        if stop {
            break;
        }
    }

    let meta = &mut net.metadata;
    meta.epochs += epochs_run;
    meta.final_loss = Some(last);
    meta.seed = cfg.seed;
    meta.learning_rate = cfg.learning_rate;
    meta.momentum = cfg.momentum;
    meta.optimizer = Some(cfg.optimizer);
    meta.sequences = sequences
        .iter()
        .map(|s| SequenceInfo {
            name: s.name.clone(),
            length: s.len(),
            rate_hz: s.rate_hz,
            initial_posture: s.vectors[0].clone(),
        })
        .collect();
    Ok(curve)
}

enum OptimizerState {
    Momentum { velocity: Gradients },
    Adam {
        first: Gradients,
        second: Gradients,
        /// Running maximum of the corrected second moment, for AMSGrad.
        peak: Option<Gradients>,
        step: i32,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerState {
    fn new(net: &MtrnnNetwork, optimizer: Optimizer) -> Self {
        match optimizer {
            Optimizer::Momentum => OptimizerState::Momentum {
                velocity: Gradients::zeros_like(net),
            },
            Optimizer::Adam { beta2, epsilon, amsgrad } => OptimizerState::Adam {
                first: Gradients::zeros_like(net),
                second: Gradients::zeros_like(net),
                peak: amsgrad.then(|| Gradients::zeros_like(net)),
                step: 0,
                beta2,
                epsilon,
            },
        }
    }

    fn apply(&mut self, net: &mut MtrnnNetwork, grads: &Gradients, cfg: &TrainConfig) {
        let (mu, lr) = (cfg.momentum, cfg.learning_rate);
        match self {
            OptimizerState::Momentum { velocity } => {
                let update = |v: &mut f64, g: f64| *v = mu * *v - lr * g;
                velocity.weights.zip_apply(&grads.weights, update);
                velocity.bias.zip_apply(&grads.bias, update);
                for (v, g) in velocity.initial_cs.iter_mut().zip(&grads.initial_cs) {
                    v.zip_apply(g, update);
                }
                net.step(velocity);
            }
            OptimizerState::Adam {
                first,
                second,
                peak,
                step,
                beta2,
                epsilon,
            } => {
                *step += 1;
                let b2 = *beta2;
                let eps = *epsilon;
                let m_hat = 1.0 / (1.0 - mu.powi(*step));
                let v_hat = 1.0 / (1.0 - b2.powi(*step));
                let moments = |m: &mut f64, g: f64| *m = mu * *m + (1.0 - mu) * g;
                let squares = |v: &mut f64, g: f64| *v = b2 * *v + (1.0 - b2) * g * g;
                first.weights.zip_apply(&grads.weights, moments);
                second.weights.zip_apply(&grads.weights, squares);
                first.bias.zip_apply(&grads.bias, moments);
                second.bias.zip_apply(&grads.bias, squares);
                for ((m, v), g) in first.initial_cs.iter_mut().zip(&mut second.initial_cs).zip(&grads.initial_cs) {
                    m.zip_apply(g, moments);
                    v.zip_apply(g, squares);
                }
                let mut corrected = second.clone();
                corrected.scale(v_hat);
                if let Some(peak) = peak {
                    let keep_max = |p: &mut f64, v: f64| *p = p.max(v);
                    peak.weights.zip_apply(&corrected.weights, keep_max);
                    peak.bias.zip_apply(&corrected.bias, keep_max);
                    for (p, v) in peak.initial_cs.iter_mut().zip(&corrected.initial_cs) {
                        p.zip_apply(v, keep_max);
                    }
                    corrected = peak.clone();
                }
                let mut delta = first.clone();
                let scale = |d: &mut f64, v: f64| *d = -lr * (*d * m_hat) / (v.sqrt() + eps);
                delta.weights.zip_apply(&corrected.weights, scale);
                delta.bias.zip_apply(&corrected.bias, scale);
                for (d, v) in delta.initial_cs.iter_mut().zip(&corrected.initial_cs) {
                    d.zip_apply(v, scale);
                }
                net.step(&delta);
            }
        }
    }
}

impl MtrnnNetwork {
    /// Adds `delta` to every trainable parameter, keeping masked weights at zero.
    fn step(&mut self, delta: &Gradients) {
        self.weights += &delta.weights;
        self.weights.component_mul_assign(&self.mask);
        self.bias += &delta.bias;
        for (c, d) in self.initial_cs.iter_mut().zip(&delta.initial_cs) {
            *c += d;
        }
    }
}

/// Builds a fresh network sized for `dataset`.
pub fn network_for(dataset: &Dataset, config: Option<MtrnnConfig>, cfg: &TrainConfig) -> Result<MtrnnNetwork, MtrnnError> {
    let mut config = config.unwrap_or_else(|| MtrnnConfig::with_io(dataset.dim()));
    config.n_io = dataset.dim();
    MtrnnNetwork::random(config, dataset.sequences.len(), cfg.init_scale, cfg.seed)
}
