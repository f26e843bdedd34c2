//! The hierarchical model: latent variables, fixed effects, priors, time warps,
//! projected space shifts, prediction, likelihoods and simulation.
//!
//! Shapes follow `y_ij = eta(psi_i(t_ij)) o y0 + noise` where `eta` is the curve
//! exp-parallel to the mean geodesic in the direction of the space shift `w_i = A s_i`
//! (projected orthogonally to `m0`), and `psi_i(t) = exp(xi_i) (t - t_i) + t0` with
//! `t_i` the subject's onset age.

mod dataset;
mod geometry;
pub(crate) mod likelihood;
mod simulate;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernel::{kernel_inner, KernelConfig};
use crate::points::{ControlPoints, Momenta, Points};
use crate::shape::{MetricConfig, MetricKind, Shape};
use crate::transport::{ExpParallelSteps, TransportOptions};

pub use dataset::{LongitudinalDataset, Observation, Subject};
pub use geometry::PopulationGeometry;
pub use likelihood::{
    complete_log_likelihood, data_term, individual_term, likelihood_terms, population_term, prior_term,
    residuals, subject_residuals, sufficient_statistics, tempered_log_likelihood, theta_objective, LikelihoodTerms,
    SufficientStatistics,
};
pub use simulate::{arm_problem, simulate, SimulationConfig, SyntheticProblem};

/// Numerical configuration shared by prediction, likelihood and estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Deformation kernel.
    pub kernel: KernelConfig,
    /// Residual metric between predicted and observed shapes.
    pub metric: MetricConfig,
    #[serde(default)]
    pub steps: ExpParallelSteps,
    #[serde(default)]
    pub transport: TransportOptions,
}

impl ModelConfig {
    pub fn new(kernel_width: f64, dim: usize, metric_width: f64) -> Result<Self> {
        let cfg = Self {
            kernel: KernelConfig::new(kernel_width, dim)?,
            metric: MetricConfig { kind: MetricKind::Current, width: metric_width },
            steps: ExpParallelSteps::default(),
            transport: TransportOptions::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.metric.validate()?;
        if self.steps.steps_per_unit == 0 || self.steps.exp_steps == 0 {
            return Err(Error::Config("integration step counts must be at least 1".into()));
        }
        if !(self.transport.epsilon > 0.0 && self.transport.max_condition > 1.0) {
            return Err(Error::Config("transport epsilon must be > 0 and max_condition > 1".into()));
        }
        Ok(())
    }
}

/// `z_pop = (y0, c0, m0, A)`. `A` is `(d * n_cp) x n_s` and stored unprojected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationLatents {
    pub template: Shape,
    pub control_points: ControlPoints,
    pub momenta: Momenta,
    pub mixing: DMatrix<f64>,
}

impl PopulationLatents {
    pub fn n_sources(&self) -> usize {
        self.mixing.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.template.dim();
        if self.control_points.dim() != d || self.momenta.dim() != d {
            return Err(invalid("template, control points and momenta must share a dimension"));
        }
        if self.control_points.len() != self.momenta.len() || self.control_points.is_empty() {
            return Err(invalid("control points and momenta must pair one-to-one"));
        }
        if self.mixing.nrows() != d * self.control_points.len() {
            return Err(invalid(format!(
                "mixing matrix has {} rows, expected {}",
                self.mixing.nrows(),
                d * self.control_points.len()
            )));
        }
        if self.mixing.ncols() == 0 {
            return Err(invalid("at least one source is required"));
        }
        self.control_points.check_finite("control points")?;
        self.momenta.check_finite("momenta")?;
        if !self.mixing.iter().all(|v| v.is_finite()) {
            return Err(invalid("mixing matrix is not finite"));
        }
        Ok(())
    }
}

/// `z_i = (t_i, xi_i, s_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualLatents {
    /// `t_i = t0 + tau_i`.
    pub onset_age: f64,
    /// `xi_i`; the acceleration factor is `exp(xi_i)`.
    pub log_acceleration: f64,
    pub sources: Vec<f64>,
}

impl IndividualLatents {
    pub fn zero(t0: f64, n_sources: usize) -> Self {
        Self { onset_age: t0, log_acceleration: 0.0, sources: vec![0.0; n_sources] }
    }

    pub fn time_shift(&self, t0: f64) -> f64 {
        self.onset_age - t0
    }

    pub fn acceleration(&self) -> f64 {
        self.log_acceleration.exp()
    }

    /// `psi_i(t) - t0`, the offset from the reference time along the mean geodesic.
    pub fn warp_offset(&self, t: f64) -> f64 {
        self.acceleration() * (t - self.onset_age)
    }

    pub fn is_finite(&self) -> bool {
        self.onset_age.is_finite() && self.log_acceleration.is_finite() && self.sources.iter().all(|s| s.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub population: PopulationLatents,
    pub individuals: Vec<IndividualLatents>,
}

/// Fixed effects `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mean_template: Shape,
    pub mean_control_points: ControlPoints,
    pub mean_momenta: Momenta,
    pub mean_mixing: DMatrix<f64>,
    pub reference_time: f64,
    pub var_time_shift: f64,
    pub var_log_accel: f64,
    pub var_noise: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("var_time_shift", self.var_time_shift),
            ("var_log_accel", self.var_log_accel),
            ("var_noise", self.var_noise),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.reference_time.is_finite() {
            return Err(Error::InvalidParameter("reference_time must be finite".into()));
        }
        self.as_population().validate()
    }

    /// Population latents sitting exactly at their means.
    pub fn as_population(&self) -> PopulationLatents {
        PopulationLatents {
            template: self.mean_template.clone(),
            control_points: self.mean_control_points.clone(),
            momenta: self.mean_momenta.clone(),
            mixing: self.mean_mixing.clone(),
        }
    }

    pub fn n_sources(&self) -> usize {
        self.mean_mixing.ncols()
    }
}

/// Fixed variances of the population latents around their means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedVariances {
    pub template: f64,
    pub control_points: f64,
    pub momenta: f64,
    pub mixing: f64,
}

impl Default for FixedVariances {
    fn default() -> Self {
        Self { template: 1e-4, control_points: 1e-4, momenta: 1e-4, mixing: 1e-4 }
    }
}

/// Conjugate priors on `theta` together with the fixed population variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub fixed: FixedVariances,
    pub template_mean: Points,
    pub control_points_mean: ControlPoints,
    pub momenta_mean: Momenta,
    pub mixing_mean: DMatrix<f64>,
    pub reference_time_mean: f64,
    pub template_var: f64,
    pub control_points_var: f64,
    pub momenta_var: f64,
    pub mixing_var: f64,
    pub reference_time_var: f64,
    pub time_shift_weight: f64,
    pub time_shift_scale: f64,
    pub log_accel_weight: f64,
    pub log_accel_scale: f64,
    pub noise_weight: f64,
    pub noise_scale: f64,
}

/// Hyperparameters for [`PriorConfig::centered_on`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorStrengths {
    pub fixed: FixedVariances,
    pub geometry_var: f64,
    pub reference_time_var: f64,
    pub variance_weight: f64,
}

impl Default for PriorStrengths {
    fn default() -> Self {
        Self { fixed: FixedVariances::default(), geometry_var: 1.0, reference_time_var: 100.0, variance_weight: 1.0 }
    }
}

impl PriorConfig {
    /// Weak priors whose means and scales are taken from `theta`.
    pub fn centered_on(theta: &ModelParams, strengths: &PriorStrengths) -> Self {
        Self {
            fixed: strengths.fixed,
            template_mean: theta.mean_template.vertices().clone(),
            control_points_mean: theta.mean_control_points.clone(),
            momenta_mean: theta.mean_momenta.clone(),
            mixing_mean: theta.mean_mixing.clone(),
            reference_time_mean: theta.reference_time,
            template_var: strengths.geometry_var,
            control_points_var: strengths.geometry_var,
            momenta_var: strengths.geometry_var,
            mixing_var: strengths.geometry_var,
            reference_time_var: strengths.reference_time_var,
            time_shift_weight: strengths.variance_weight,
            time_shift_scale: theta.var_time_shift,
            log_accel_weight: strengths.variance_weight,
            log_accel_scale: theta.var_log_accel,
            noise_weight: strengths.variance_weight,
            noise_scale: theta.var_noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.fixed;
        let positive = [
            ("fixed.template", f.template),
            ("fixed.control_points", f.control_points),
            ("fixed.momenta", f.momenta),
            ("fixed.mixing", f.mixing),
            ("template_var", self.template_var),
            ("control_points_var", self.control_points_var),
            ("momenta_var", self.momenta_var),
            ("mixing_var", self.mixing_var),
            ("reference_time_var", self.reference_time_var),
            ("time_shift_weight", self.time_shift_weight),
            ("time_shift_scale", self.time_shift_scale),
            ("log_accel_weight", self.log_accel_weight),
            ("log_accel_scale", self.log_accel_scale),
            ("noise_weight", self.noise_weight),
            ("noise_scale", self.noise_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("prior {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// `psi_i(t) = exp(xi_i) (t - t_i) + t0`.
pub fn time_warp(ind: &IndividualLatents, t0: f64, t: f64) -> f64 {
    ind.warp_offset(t) + t0
}

/// Removes from every column of `a` its `K_{c0}`-component along `m0`.
pub fn project_mixing(a: &DMatrix<f64>, c0: &ControlPoints, m0: &Momenta, cfg: &KernelConfig) -> Result<DMatrix<f64>> {
    let mm = kernel_inner(c0, m0, m0, cfg);
    if !(mm > 0.0) {
        return Err(Error::ProjectionUndefined);
    }
    let mut out = a.clone();
    for (l, col) in mixing_columns(a, c0.dim())?.iter().enumerate() {
        let coef = kernel_inner(c0, m0, col, cfg) / mm;
        for (r, v) in m0.as_slice().iter().enumerate() {
            out[(r, l)] -= coef * v;
        }
    }
    Ok(out)
}

/// Columns of a mixing matrix as momenta vectors.
pub fn mixing_columns(a: &DMatrix<f64>, dim: usize) -> Result<Vec<Momenta>> {
    a.column_iter().map(|c| Points::new(dim, c.iter().copied().collect())).collect()
}

/// `w_i = A_{m0-perp} s_i`.
pub fn space_shift(pop: &PopulationLatents, sources: &[f64], cfg: &KernelConfig) -> Result<Momenta> {
    if sources.len() != pop.n_sources() {
        return Err(invalid(format!("{} sources given, model has {}", sources.len(), pop.n_sources())));
    }
    let proj = project_mixing(&pop.mixing, &pop.control_points, &pop.momenta, cfg)?;
    let w = proj * nalgebra::DVector::from_column_slice(sources);
    Points::new(pop.control_points.dim(), w.iter().copied().collect())
}

/// Noiseless shape of a subject at age `t`.
pub fn predict(pop: &PopulationLatents, ind: &IndividualLatents, t: f64, cfg: &ModelConfig) -> Result<Shape> {
    let u = ind.warp_offset(t);
    let geom = PopulationGeometry::new(pop, cfg, (u.min(0.0), u.max(0.0)))?;
    geom.predict(&ind.sources, u)
}

/// Shape on the mean trajectory at age `t` (all individual latents at their means).
pub fn average_trajectory(pop: &PopulationLatents, t0: f64, t: f64, cfg: &ModelConfig) -> Result<Shape> {
    predict(pop, &IndividualLatents::zero(t0, pop.n_sources()), t, cfg)
}
