//! Complete and tempered log-likelihoods, with all Gaussian `2 pi` constants dropped.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::points::Points;
use crate::shape::MetricTarget;

use super::{
    FixedVariances, IndividualLatents, LatentState, LongitudinalDataset, ModelConfig, ModelParams, PopulationGeometry,
    PopulationLatents, PriorConfig, Subject,
};

/// The four groups of terms of the joint log-density.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LikelihoodTerms {
    pub data: f64,
    pub population: f64,
    pub individual: f64,
    pub prior: f64,
}

impl LikelihoodTerms {
    pub fn total(&self) -> f64 {
        self.data + self.population + self.individual + self.prior
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t >= 1.0 && t.is_finite()) {
        return Err(invalid(format!("temperature must be >= 1, got {t}")));
    }
    Ok(())
}

/// `-1/2 [lambda ln(T s2) + r / (T s2)]` for one observation (or a sum of them).
pub fn data_term(residual: f64, lambda: f64, var_noise: f64, temperature: f64) -> f64 {
    let v = temperature * var_noise;
    -0.5 * (lambda * v.ln() + residual / v)
}

fn gaussian_block(dim: usize, sq_dist: f64, var: f64) -> f64 {
    -0.5 * (dim as f64 * var.ln() + sq_dist / var)
}

fn matrix_sq_dist(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Log-density of `z_pop` around the means in `theta`, with variances inflated by `temperature`.
pub fn population_term(pop: &PopulationLatents, theta: &ModelParams, fixed: &FixedVariances, temperature: f64) -> f64 {
    let t = temperature;
    let y = pop.template.vertices();
    gaussian_block(y.as_slice().len(), y.sub(theta.mean_template.vertices()).norm_squared(), t * fixed.template)
        + gaussian_block(
            pop.control_points.as_slice().len(),
            pop.control_points.sub(&theta.mean_control_points).norm_squared(),
            t * fixed.control_points,
        )
        + gaussian_block(
            pop.momenta.as_slice().len(),
            pop.momenta.sub(&theta.mean_momenta).norm_squared(),
            t * fixed.momenta,
        )
        + gaussian_block(pop.mixing.len(), matrix_sq_dist(&pop.mixing, &theta.mean_mixing), t * fixed.mixing)
}

/// `log q(z_i | theta)`; never tempered.
pub fn individual_term(ind: &IndividualLatents, theta: &ModelParams) -> f64 {
    let tau = ind.onset_age - theta.reference_time;
    let s2: f64 = ind.sources.iter().map(|s| s * s).sum();
    -0.5 * (theta.var_time_shift.ln()
        + tau * tau / theta.var_time_shift
        + theta.var_log_accel.ln()
        + ind.log_acceleration * ind.log_acceleration / theta.var_log_accel
        + s2)
}

/// `log q(theta)`; never tempered.
pub fn prior_term(theta: &ModelParams, priors: &PriorConfig) -> f64 {
    let dt = theta.reference_time - priors.reference_time_mean;
    let inv_gamma = |weight: f64, scale: f64, var: f64| weight * var.ln() + weight * scale / var;
    -0.5 * (theta.mean_template.vertices().sub(&priors.template_mean).norm_squared() / priors.template_var
        + theta.mean_control_points.sub(&priors.control_points_mean).norm_squared() / priors.control_points_var
        + theta.mean_momenta.sub(&priors.momenta_mean).norm_squared() / priors.momenta_var
        + matrix_sq_dist(&theta.mean_mixing, &priors.mixing_mean) / priors.mixing_var
        + dt * dt / priors.reference_time_var
        + inv_gamma(priors.time_shift_weight, priors.time_shift_scale, theta.var_time_shift)
        + inv_gamma(priors.log_accel_weight, priors.log_accel_scale, theta.var_log_accel)
        + inv_gamma(priors.noise_weight, priors.noise_scale, theta.var_noise))
}

/// Offsets at which a subject's observations sit on the mean geodesic.
pub(crate) fn subject_offsets<'a>(subject: &'a Subject, ind: &IndividualLatents) -> impl Iterator<Item = f64> + 'a {
    let alpha = ind.acceleration();
    let onset = ind.onset_age;
    subject.times().map(move |t| alpha * (t - onset))
}

/// Smallest offset range covering every observation of the dataset.
pub(crate) fn offset_range(dataset: &LongitudinalDataset, individuals: &[IndividualLatents]) -> (f64, f64) {
    dataset
        .subjects
        .iter()
        .zip(individuals)
        .flat_map(|(s, ind)| subject_offsets(s, ind))
        .fold((0.0f64, 0.0f64), |(lo, hi), u| (lo.min(u), hi.max(u)))
}

/// Squared metric residuals of one subject.
pub fn subject_residuals(
    geom: &PopulationGeometry,
    subject: &Subject,
    ind: &IndividualLatents,
    targets: &[MetricTarget],
) -> Result<Vec<f64>> {
    if !ind.is_finite() {
        return Err(Error::Numerical(format!("non-finite latents for subject {}", subject.id)));
    }
    subject_offsets(subject, ind)
        .zip(targets)
        .map(|(u, target)| target.dist2(&geom.predict(&ind.sources, u)?))
        .collect()
}

fn check_state(dataset: &LongitudinalDataset, state: &LatentState) -> Result<()> {
    if dataset.len() != state.individuals.len() {
        return Err(invalid(format!(
            "{} subjects but {} individual latents",
            dataset.len(),
            state.individuals.len()
        )));
    }
    let ns = state.population.n_sources();
    if state.individuals.iter().any(|z| z.sources.len() != ns) {
        return Err(invalid("individual source count differs from the mixing matrix"));
    }
    Ok(())
}

pub(crate) fn residuals_with_targets(
    dataset: &LongitudinalDataset,
    state: &LatentState,
    targets: &[Vec<MetricTarget>],
    cfg: &ModelConfig,
) -> Result<Vec<Vec<f64>>> {
    check_state(dataset, state)?;
    let geom = PopulationGeometry::new(&state.population, cfg, offset_range(dataset, &state.individuals))?;
    dataset
        .subjects
        .par_iter()
        .zip(&state.individuals)
        .zip(targets)
        .map(|((s, ind), t)| subject_residuals(&geom, s, ind, t))
        .collect()
}

/// Squared residuals `|y_ij - eta_i(t_ij) o y0|^2` under the configured metric.
pub fn residuals(dataset: &LongitudinalDataset, state: &LatentState, cfg: &ModelConfig) -> Result<Vec<Vec<f64>>> {
    let targets = dataset.metric_targets(&cfg.metric)?;
    residuals_with_targets(dataset, state, &targets, cfg)
}

pub(crate) fn terms_from_residuals(
    dataset: &LongitudinalDataset,
    state: &LatentState,
    residuals: &[Vec<f64>],
    theta: &ModelParams,
    priors: &PriorConfig,
    temperature: f64,
) -> LikelihoodTerms {
    let mut data = 0.0;
    for (s, r) in dataset.subjects.iter().zip(residuals) {
        for (o, r) in s.observations.iter().zip(r) {
            data += data_term(*r, o.shape.residual_dimension(), theta.var_noise, temperature);
        }
    }
    LikelihoodTerms {
        data,
        population: population_term(&state.population, theta, &priors.fixed, temperature),
        individual: state.individuals.iter().map(|z| individual_term(z, theta)).sum(),
        prior: prior_term(theta, priors),
    }
}

pub fn likelihood_terms(
    dataset: &LongitudinalDataset,
    state: &LatentState,
    theta: &ModelParams,
    priors: &PriorConfig,
    cfg: &ModelConfig,
    temperature: f64,
) -> Result<LikelihoodTerms> {
    check_temperature(temperature)?;
    theta.validate()?;
    priors.validate()?;
    let r = residuals(dataset, state, cfg)?;
    Ok(terms_from_residuals(dataset, state, &r, theta, priors, temperature))
}

/// `log q(y, z, theta)` up to an additive constant.
pub fn complete_log_likelihood(
    dataset: &LongitudinalDataset,
    state: &LatentState,
    theta: &ModelParams,
    priors: &PriorConfig,
    cfg: &ModelConfig,
) -> Result<f64> {
    Ok(likelihood_terms(dataset, state, theta, priors, cfg, 1.0)?.total())
}

/// `log q_T(y, z, theta)`: noise and population variances multiplied by `temperature`.
pub fn tempered_log_likelihood(
    dataset: &LongitudinalDataset,
    state: &LatentState,
    theta: &ModelParams,
    priors: &PriorConfig,
    cfg: &ModelConfig,
    temperature: f64,
) -> Result<f64> {
    Ok(likelihood_terms(dataset, state, theta, priors, cfg, temperature)?.total())
}

/// `S_1 .. S_8`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStatistics {
    pub template: Points,
    pub control_points: Points,
    pub momenta: Points,
    pub mixing: DMatrix<f64>,
    pub sum_onset: f64,
    pub sum_onset_sq: f64,
    pub sum_log_accel_sq: f64,
    pub sum_residual: f64,
}

impl SufficientStatistics {
    pub fn from_state(state: &LatentState, sum_residual: f64) -> Self {
        let p = &state.population;
        let z = &state.individuals;
        Self {
            template: p.template.vertices().clone(),
            control_points: p.control_points.clone(),
            momenta: p.momenta.clone(),
            mixing: p.mixing.clone(),
            sum_onset: z.iter().map(|z| z.onset_age).sum(),
            sum_onset_sq: z.iter().map(|z| z.onset_age * z.onset_age).sum(),
            sum_log_accel_sq: z.iter().map(|z| z.log_acceleration * z.log_acceleration).sum(),
            sum_residual,
        }
    }

    /// `self + rho (target - self)`, componentwise.
    pub fn approach(&mut self, target: &SufficientStatistics, rho: f64) {
        if rho == 1.0 {
            *self = target.clone();
            return;
        }
        let mix = |a: &mut f64, b: f64| *a += rho * (b - *a);
        for (a, b) in self
            .template
            .as_mut_slice()
            .iter_mut()
            .chain(self.control_points.as_mut_slice())
            .chain(self.momenta.as_mut_slice())
            .chain(self.mixing.iter_mut())
            .zip(
                target
                    .template
                    .as_slice()
                    .iter()
                    .chain(target.control_points.as_slice())
                    .chain(target.momenta.as_slice())
                    .chain(target.mixing.iter()),
            )
        {
            mix(a, *b);
        }
        mix(&mut self.sum_onset, target.sum_onset);
        mix(&mut self.sum_onset_sq, target.sum_onset_sq);
        mix(&mut self.sum_log_accel_sq, target.sum_log_accel_sq);
        mix(&mut self.sum_residual, target.sum_residual);
    }

    pub fn is_finite(&self) -> bool {
        self.template.is_finite()
            && self.control_points.is_finite()
            && self.momenta.is_finite()
            && self.mixing.iter().all(|v| v.is_finite())
            && [self.sum_onset, self.sum_onset_sq, self.sum_log_accel_sq, self.sum_residual].iter().all(|v| v.is_finite())
    }
}

pub fn sufficient_statistics(
    dataset: &LongitudinalDataset,
    state: &LatentState,
    cfg: &ModelConfig,
) -> Result<SufficientStatistics> {
    let r = residuals(dataset, state, cfg)?;
    Ok(SufficientStatistics::from_state(state, r.iter().flatten().sum()))
}

/// The `theta`-dependent part of `log q(y, z, theta)` written through the sufficient statistics.
/// `n_subjects` is `N` and `total_lambda` the summed residual dimension of all observations.
pub fn theta_objective(
    stats: &SufficientStatistics,
    theta: &ModelParams,
    priors: &PriorConfig,
    n_subjects: usize,
    total_lambda: f64,
) -> f64 {
    let f = &priors.fixed;
    let n = n_subjects as f64;
    let t0 = theta.reference_time;
    let onset_sq = stats.sum_onset_sq - 2.0 * t0 * stats.sum_onset + n * t0 * t0;
    let population = stats.template.sub(theta.mean_template.vertices()).norm_squared() / f.template
        + stats.control_points.sub(&theta.mean_control_points).norm_squared() / f.control_points
        + stats.momenta.sub(&theta.mean_momenta).norm_squared() / f.momenta
        + matrix_sq_dist(&stats.mixing, &theta.mean_mixing) / f.mixing;
    let individual = n * theta.var_time_shift.ln()
        + onset_sq / theta.var_time_shift
        + n * theta.var_log_accel.ln()
        + stats.sum_log_accel_sq / theta.var_log_accel;
    let data = total_lambda * theta.var_noise.ln() + stats.sum_residual / theta.var_noise;
    -0.5 * (population + individual + data) + prior_term(theta, priors)
}
