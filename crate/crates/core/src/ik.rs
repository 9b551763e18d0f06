//! Evolutionary multi-objective inverse kinematics.
//!
//! A population of joint vectors is evolved with elitism, tournament
//! selection, uniform crossover and annealed Gaussian mutation. Fitness is a
//! weighted sum of quadratic objectives. Individuals are only ever compared,
//! never scaled, so a common positive factor on all weights does not change
//! the search.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::robot::{KinematicChain, ModelError, RobotModel};

#[derive(Debug, Error)]
pub enum IkError {
    #[error("at least one objective is required")]
    NoObjectives,
    #[error("objective #{0} has a negative or non-finite weight")]
    BadWeight(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Tip position target in meters, torso frame.
    Position { target: [f64; 3] },
    /// Tip orientation target as a `[w, x, y, z]` quaternion.
    Orientation { target: [f64; 4] },
    /// Penalizes angles beyond 90% of each joint's half-range.
    JointLimitMargin,
    /// Penalizes joint-space distance from the seed pose.
    Displacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkObjective {
    #[serde(flatten)]
    pub kind: ObjectiveKind,
    pub weight: f64,
}

impl IkObjective {
    pub fn position(target: Vector3<f64>, weight: f64) -> Self {
        Self {
            kind: ObjectiveKind::Position {
                target: [target.x, target.y, target.z],
            },
            weight,
        }
    }

    pub fn orientation(target: UnitQuaternion<f64>, weight: f64) -> Self {
        let q = target.quaternion();
        Self {
            kind: ObjectiveKind::Orientation {
                target: [q.w, q.i, q.j, q.k],
            },
            weight,
        }
    }

    pub fn joint_limit_margin(weight: f64) -> Self {
        Self {
            kind: ObjectiveKind::JointLimitMargin,
            weight,
        }
    }

    pub fn displacement(weight: f64) -> Self {
        Self {
            kind: ObjectiveKind::Displacement,
            weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkConfig {
    pub population: usize,
    pub elites: usize,
    pub generations: usize,
    /// Initial mutation standard deviation (rad).
    pub mutation_sigma: f64,
    /// Per-generation multiplier on the mutation sigma.
    pub sigma_decay: f64,
    /// Spread of the initial population around the seed pose (rad).
    pub init_sigma: f64,
    pub seed: u64,
    /// Tip distance (m) below which the search stops early.
    pub tolerance: f64,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self {
            population: 64,
            elites: 4,
            generations: 100,
            mutation_sigma: 0.05,
            sigma_decay: 0.97,
            init_sigma: 0.5,
            seed: 0,
            tolerance: 1e-3,
        }
    }
}

impl IkConfig {
    fn validate(&self) -> Result<(), IkError> {
        if !(self.elites > 0 && self.elites < self.population) {
            return Err(IkError::Config("need 0 < elites < population".into()));
        }
        if !(self.mutation_sigma >= 0.0 && self.init_sigma >= 0.0 && self.sigma_decay > 0.0) {
            return Err(IkError::Config("sigmas must be non-negative and decay positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkSolution {
    pub angles: Vec<f64>,
    pub fitness: f64,
    /// Distance from the tip to the first position target; 0 without one.
    pub tip_error: f64,
    pub converged: bool,
    pub generations: usize,
    /// Best fitness after each generation, starting with the initial population.
    pub history: Vec<f64>,
}

enum Term {
    Position(Vector3<f64>),
    Orientation(UnitQuaternion<f64>),
    Margin,
    Displacement,
}

struct Problem<'a> {
    chain: &'a KinematicChain,
    terms: Vec<(Term, f64)>,
    seed_pose: &'a [f64],
    target: Option<Vector3<f64>>,
}

struct Scored {
    fitness: f64,
    tip_error: f64,
}

impl Problem<'_> {
    fn score(&self, angles: &[f64]) -> Scored {
        let pose = self.chain.forward_unchecked(angles);
        let mut fitness = 0.0;
        for (term, weight) in &self.terms {
            let value = match term {
                Term::Position(target) => (pose.position - target).norm_squared(),
                Term::Orientation(target) => pose.orientation.angle_to(target).powi(2),
                Term::Margin => self
                    .chain
                    .joints
                    .iter()
                    .zip(angles)
                    .map(|(j, &q)| {
                        let half = 0.5 * j.range();
                        let excess = ((q - j.midpoint()).abs() - 0.9 * half).max(0.0);
                        excess * excess
                    })
                    .sum(),
                Term::Displacement => angles
                    .iter()
                    .zip(self.seed_pose)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum(),
            };
            fitness += weight * value;
        }
        let tip_error = self.target.map_or(0.0, |t| (pose.position - t).norm());
        Scored { fitness, tip_error }
    }
}

struct Individual {
    angles: Vec<f64>,
    fitness: f64,
    tip_error: f64,
}

pub fn solve_named(
    model: &RobotModel,
    chain: &str,
    objectives: &[IkObjective],
    seed_pose: &[f64],
    cfg: &IkConfig,
) -> Result<IkSolution, IkError> {
    let chain = model.chain(chain)?;
    solve(&chain, objectives, seed_pose, cfg)
}

pub fn solve(
    chain: &KinematicChain,
    objectives: &[IkObjective],
    seed_pose: &[f64],
    cfg: &IkConfig,
) -> Result<IkSolution, IkError> {
    if objectives.is_empty() {
        return Err(IkError::NoObjectives);
    }
    if let Some(i) = objectives.iter().position(|o| !(o.weight.is_finite() && o.weight >= 0.0)) {
        return Err(IkError::BadWeight(i));
    }
    cfg.validate()?;
    chain.check_angles(seed_pose)?;

    let terms: Vec<(Term, f64)> = objectives
        .iter()
        .map(|o| {
            let term = match &o.kind {
                ObjectiveKind::Position { target } => Term::Position(Vector3::from(*target)),
                ObjectiveKind::Orientation { target } => {
                    let [w, x, y, z] = *target;
                    Term::Orientation(UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
                }
                ObjectiveKind::JointLimitMargin => Term::Margin,
                ObjectiveKind::Displacement => Term::Displacement,
            };
            (term, o.weight)
        })
        .collect();
    let target = terms.iter().find_map(|(t, _)| match t {
        Term::Position(p) => Some(*p),
        _ => None,
    });
    let problem = Problem {
        chain,
        terms,
        seed_pose,
        target,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clip = |angles: &mut [f64]| {
        for (q, j) in angles.iter_mut().zip(&chain.joints) {
            *q = j.clamp(*q);
        }
    };
    let evaluate = |angles: Vec<f64>| {
        let s = problem.score(&angles);
        Individual {
            angles,
            fitness: s.fitness,
            tip_error: s.tip_error,
        }
    };

    let mut population = Vec::with_capacity(cfg.population);
    population.push(evaluate(seed_pose.to_vec()));
    while population.len() < cfg.population {
        let mut angles: Vec<f64> = seed_pose
            .iter()
            .map(|&q| q + cfg.init_sigma * gaussian(&mut rng))
            .collect();
        clip(&mut angles);
        population.push(evaluate(angles));
    }
    sort_population(&mut population);

    let mut history = vec![population[0].fitness];
    let mut sigma = cfg.mutation_sigma;
    let mut generations = 0;
    let stop = |best: &Individual| target.is_some() && best.tip_error < cfg.tolerance;

    while generations < cfg.generations && !stop(&population[0]) {
        let mut next: Vec<Individual> = Vec::with_capacity(cfg.population);
        for elite in &population[..cfg.elites] {
            next.push(Individual {
                angles: elite.angles.clone(),
                fitness: elite.fitness,
                tip_error: elite.tip_error,
            });
        }
        while next.len() < cfg.population {
            let a = tournament(&population, &mut rng);
            let b = tournament(&population, &mut rng);
            let mut child: Vec<f64> = population[a]
                .angles
                .iter()
                .zip(&population[b].angles)
                .map(|(&x, &y)| if rng.random_bool(0.5) { x } else { y })
                .collect();
            for q in child.iter_mut() {
                *q += sigma * gaussian(&mut rng);
            }
            clip(&mut child);
            next.push(evaluate(child));
        }
        sort_population(&mut next);
        population = next;
        sigma *= cfg.sigma_decay;
        generations += 1;
        history.push(population[0].fitness);
    }

    let best = &population[0];
    Ok(IkSolution {
        angles: best.angles.clone(),
        fitness: best.fitness,
        tip_error: best.tip_error,
        converged: stop(best),
        generations,
        history,
    })
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Stable sort by fitness; earlier individuals win ties.
fn sort_population(population: &mut [Individual]) {
    population.sort_by(|a, b| a.fitness.total_cmp(&b.fitness));
}

fn tournament(population: &[Individual], rng: &mut ChaCha8Rng) -> usize {
    let a = rng.random_range(0..population.len());
    let b = rng.random_range(0..population.len());
    // Population is sorted, so the lower index is the fitter one.
    a.min(b)
}
