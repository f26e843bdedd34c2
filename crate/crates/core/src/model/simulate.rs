use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::points::Points;
use crate::shape::Shape;

use super::likelihood::offset_range;
use super::{
    IndividualLatents, LatentState, LongitudinalDataset, ModelConfig, ModelParams, Observation, PopulationGeometry,
    Subject,
};

/// Sampling design for synthetic cohorts.
///
/// Subject `i` is observed at `b_i + j * spacing`, `j < n_observations`, where `b_i` is
/// centered so that the visits straddle `t0`, then jittered uniformly by `start_jitter`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_subjects: usize,
    pub n_observations: usize,
    pub spacing: f64,
    pub start_jitter: f64,
    /// Standard deviation of the i.i.d. Gaussian vertex displacements.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { n_subjects: 100, n_observations: 5, spacing: 1.0, start_jitter: 1.0, noise_std: 0.0, seed: 0 }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_observations == 0 {
            return Err(invalid("n_observations must be at least 1"));
        }
        if !(self.spacing > 0.0 && self.start_jitter >= 0.0 && self.noise_std >= 0.0) {
            return Err(invalid("spacing must be > 0, start_jitter and noise_std >= 0"));
        }
        Ok(())
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("finite non-negative std")
}

/// Draws a cohort from the model with population latents fixed at the means of `truth`.
/// Returns the dataset and the true latent state.
pub fn simulate(
    truth: &ModelParams,
    cfg: &ModelConfig,
    sim: &SimulationConfig,
) -> Result<(LongitudinalDataset, LatentState)> {
    truth.validate()?;
    cfg.validate()?;
    sim.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let t0 = truth.reference_time;
    let std_normal = normal(1.0);
    let mut individuals = Vec::with_capacity(sim.n_subjects);
    let mut schedules = Vec::with_capacity(sim.n_subjects);
    for _ in 0..sim.n_subjects {
        let onset = t0 + truth.var_time_shift.sqrt() * std_normal.sample(&mut rng);
        let xi = truth.var_log_accel.sqrt() * std_normal.sample(&mut rng);
        let sources: Vec<f64> = (0..truth.n_sources()).map(|_| std_normal.sample(&mut rng)).collect();
        individuals.push(IndividualLatents { onset_age: onset, log_acceleration: xi, sources });
        let jitter = if sim.start_jitter > 0.0 { rng.random_range(-sim.start_jitter..=sim.start_jitter) } else { 0.0 };
        let start = t0 - 0.5 * (sim.n_observations - 1) as f64 * sim.spacing + jitter;
        schedules.push((0..sim.n_observations).map(|j| start + j as f64 * sim.spacing).collect::<Vec<f64>>());
    }

    let population = truth.as_population();
    let mut subjects: Vec<Subject> = schedules
        .iter()
        .enumerate()
        .map(|(i, times)| Subject {
            id: format!("s{i:04}"),
            observations: times.iter().map(|&t| Observation { time: t, shape: truth.mean_template.clone() }).collect(),
        })
        .collect();
    let range = offset_range(&LongitudinalDataset { subjects: subjects.clone() }, &individuals);
    let geom = PopulationGeometry::new(&population, cfg, range)?;
    let noise = normal(sim.noise_std);
    for (subject, ind) in subjects.iter_mut().zip(&individuals) {
        for obs in subject.observations.iter_mut() {
            let mut shape = geom.predict(&ind.sources, ind.warp_offset(obs.time))?;
            if sim.noise_std > 0.0 {
                let mut v = shape.vertices().clone();
                for x in v.as_mut_slice() {
                    *x += noise.sample(&mut rng);
                }
                shape = shape.with_vertices(v);
            }
            obs.shape = shape;
        }
    }
    Ok((LongitudinalDataset::new(subjects)?, LatentState { population, individuals }))
}

/// A ground-truth model with its numerical configuration.
#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    pub truth: ModelParams,
    pub config: ModelConfig,
}

/// A 2D "arm" raising its forearm about the elbow: a 21-vertex polyline template,
/// five control points along the arm and momenta rotating the forearm.
/// The mixing matrix is drawn from `mixing_seed` with entries of std 0.05.
pub fn arm_problem(n_sources: usize, mixing_seed: u64) -> Result<SyntheticProblem> {
    if n_sources == 0 {
        return Err(invalid("at least one source is required"));
    }
    let (c, s) = (std::f64::consts::FRAC_PI_4.cos(), std::f64::consts::FRAC_PI_4.sin());
    let mut verts = Vec::with_capacity(21);
    for i in 0..=10 {
        verts.push([-1.0 + 0.1 * i as f64, 0.0]);
    }
    for i in 1..=10 {
        let r = 0.1 * i as f64;
        verts.push([r * c, r * s]);
    }
    let template = Shape::polyline(&verts)?;
    let control_points = Points::from_rows(&[[-1.0, 0.0], [-0.5, 0.0], [0.0, 0.0], [0.5 * c, 0.5 * s], [c, s]]);
    let momenta = Points::from_rows(&[[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [-0.05 * s, 0.05 * c], [-0.1 * s, 0.1 * c]]);
    let mut rng = ChaCha8Rng::seed_from_u64(mixing_seed);
    let dist = normal(0.05);
    let mixing = DMatrix::from_fn(10, n_sources, |_, _| dist.sample(&mut rng));
    let config = ModelConfig::new(0.6, 2, 0.3)?;
    let truth = ModelParams {
        mean_template: template,
        mean_control_points: control_points,
        mean_momenta: momenta,
        mean_mixing: mixing,
        reference_time: 70.0,
        var_time_shift: 1.0,
        var_log_accel: 0.01,
        var_noise: 1e-3,
    };
    truth.validate()?;
    Ok(SyntheticProblem { truth, config })
}
