//! Fitting the individual latents of new subjects to a trained model.
//!
//! The objective `log q(y | z, theta) + log q(z | theta)` is maximized over
//! `z = (t_i, xi_i, s_i)` with Powell's direction-set method. Line searches bracket a
//! maximum by step expansion and refine it by golden-section search inside a box that
//! keeps `|tau| <= 10 sigma_tau` and `|xi| <= 5`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{
    data_term, individual_term, subject_residuals, IndividualLatents, LongitudinalDataset, ModelConfig, ModelParams,
    PopulationGeometry, Subject,
};
use crate::shape::MetricTarget;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizeConfig {
    /// Number of starts: the zero-latent start plus `restarts - 1` prior draws.
    pub restarts: usize,
    /// Stop when a full sweep improves the objective by less than this, relatively.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Relative width at which golden-section refinement stops.
    pub line_tolerance: f64,
    pub max_log_accel: f64,
    /// Bound on `|tau|` in units of `sigma_tau`.
    pub max_time_shift: f64,
    pub seed: u64,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        Self {
            restarts: 3,
            tolerance: 1e-8,
            max_iterations: 200,
            line_tolerance: 1e-6,
            max_log_accel: 5.0,
            max_time_shift: 10.0,
            seed: 0,
        }
    }
}

impl PersonalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.max_iterations == 0 {
            return Err(Error::Config("restarts and max_iterations must be at least 1".into()));
        }
        if !(self.tolerance > 0.0 && self.line_tolerance > 0.0 && self.max_log_accel > 0.0 && self.max_time_shift > 0.0) {
            return Err(Error::Config("personalization tolerances and bounds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationResult {
    pub id: String,
    pub latents: IndividualLatents,
    pub objective: f64,
    /// `sqrt(sum of residuals / sum of residual dimensions)`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each Powell iteration of the winning start.
    pub history: Vec<f64>,
}

/// Shared state for personalizing many subjects against one trained model.
pub struct Personalizer<'a> {
    theta: &'a ModelParams,
    model: &'a ModelConfig,
    geom: PopulationGeometry,
    cfg: PersonalizeConfig,
}

/// Optimization coordinates are `(tau / sigma_tau, xi / sigma_xi, s)`.
struct Problem<'p> {
    theta: &'p ModelParams,
    geom: &'p PopulationGeometry,
    subject: &'p Subject,
    targets: Vec<MetricTarget>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    evaluations: std::cell::Cell<usize>,
}

impl Problem<'_> {
    fn latents(&self, x: &[f64]) -> IndividualLatents {
        IndividualLatents {
            onset_age: self.theta.reference_time + x[0] * self.theta.var_time_shift.sqrt(),
            log_acceleration: x[1] * self.theta.var_log_accel.sqrt(),
            sources: x[2..].to_vec(),
        }
    }

    fn residuals(&self, z: &IndividualLatents) -> Result<Vec<f64>> {
        subject_residuals(self.geom, self.subject, z, &self.targets)
    }

    fn objective_of(&self, z: &IndividualLatents) -> f64 {
        self.evaluations.set(self.evaluations.get() + 1);
        match self.residuals(z) {
            Ok(r) => {
                let data: f64 = r
                    .iter()
                    .zip(&self.subject.observations)
                    .map(|(r, o)| data_term(*r, o.shape.residual_dimension(), self.theta.var_noise, 1.0))
                    .sum();
                let v = data + individual_term(z, self.theta);
                if v.is_finite() {
                    v
                } else {
                    f64::NEG_INFINITY
                }
            }
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn objective(&self, x: &[f64]) -> f64 {
        self.objective_of(&self.latents(x))
    }

    /// Step interval `[lo, hi]` keeping `x + a d` inside the box.
    fn feasible_steps(&self, x: &[f64], d: &[f64]) -> (f64, f64) {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..x.len() {
            if d[i] == 0.0 {
                continue;
            }
            let a = (self.lower[i] - x[i]) / d[i];
            let b = (self.upper[i] - x[i]) / d[i];
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
        (lo.min(0.0), hi.max(0.0))
    }

    fn clamp(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }
}

fn along(x: &[f64], d: &[f64], a: f64) -> Vec<f64> {
    x.iter().zip(d).map(|(x, d)| x + a * d).collect()
}

/// Maximizes `f(x + a d)` over `a`; returns the step and the value, with `(0, f0)` when no
/// improving step exists.
fn line_maximize(p: &Problem<'_>, x: &[f64], d: &[f64], f0: f64, tol: f64) -> (f64, f64) {
    let (lo, hi) = p.feasible_steps(x, d);
    let g = |a: f64| p.objective(&along(x, d, a));
    // find an improving step, shrinking from unit length
    let mut step = 1.0;
    let mut found = None;
    while step > 1e-6 {
        for s in [step, -step] {
            if s > hi || s < lo {
                continue;
            }
            let v = g(s);
            if v > f0 {
                found = Some((s, v));
                break;
            }
        }
        if found.is_some() {
            break;
        }
        step *= 0.25;
    }
    let Some((mut b, mut fb)) = found else {
        return (0.0, f0);
    };
    // expand away from 0 while improving
    let dir = b.signum();
    let limit = if dir > 0.0 { hi } else { lo };
    let mut a = 0.0;
    let mut c;
    loop {
        c = b + 1.618 * (b - a);
        if (c - limit) * dir > 0.0 {
            c = limit;
        }
        if c == b {
            return (b, fb);
        }
        let fc = g(c);
        if fc > fb {
            a = b;
            b = c;
            fb = fc;
        } else {
            break;
        }
    }
    // golden-section refinement of the bracket [a, c] around b
    const SHRINK: f64 = 0.381_966_011_250_105_1;
    let (mut lo_a, mut hi_c) = (a.min(c), a.max(c));
    while hi_c - lo_a > tol * (1.0 + b.abs()) {
        let x = if b - lo_a > hi_c - b { b - SHRINK * (b - lo_a) } else { b + SHRINK * (hi_c - b) };
        let fx = g(x);
        if fx > fb {
            if x < b {
                hi_c = b;
            } else {
                lo_a = b;
            }
            b = x;
            fb = fx;
        } else if x < b {
            lo_a = x;
        } else {
            hi_c = x;
        }
    }
    (b, fb)
}

struct PowellRun {
    x: Vec<f64>,
    value: f64,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

fn powell(p: &Problem<'_>, start: Vec<f64>, cfg: &PersonalizeConfig) -> Option<PowellRun> {
    let n = start.len();
    let mut x = start;
    p.clamp(&mut x);
    let mut fx = p.objective(&x);
    if !fx.is_finite() {
        return None;
    }
    let mut dirs: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    let mut history = vec![fx];
    for iter in 1..=cfg.max_iterations {
        let x_start = x.clone();
        let f_start = fx;
        let (mut biggest, mut biggest_at) = (0.0, 0);
        for (i, d) in dirs.iter().enumerate() {
            let before = fx;
            let (a, v) = line_maximize(p, &x, d, fx, cfg.line_tolerance);
            if v > fx {
                x = along(&x, d, a);
                fx = v;
            }
            if fx - before > biggest {
                biggest = fx - before;
                biggest_at = i;
            }
        }
        history.push(fx);
        if 2.0 * (fx - f_start) <= cfg.tolerance * (fx.abs() + f_start.abs()) + 1e-300 {
            return Some(PowellRun { x, value: fx, iterations: iter, converged: true, history });
        }
        let d_new: Vec<f64> = x.iter().zip(&x_start).map(|(a, b)| a - b).collect();
        let mut extrapolated: Vec<f64> = x.iter().zip(&x_start).map(|(a, b)| 2.0 * a - b).collect();
        p.clamp(&mut extrapolated);
        let fe = p.objective(&extrapolated);
        // classical replacement test, written for maximization
        if fe > f_start {
            let t = 2.0 * (2.0 * fx - f_start - fe) * (fx - f_start - biggest).powi(2)
                - biggest * (fe - f_start).powi(2);
            if t < 0.0 {
                let (a, v) = line_maximize(p, &x, &d_new, fx, cfg.line_tolerance);
                if v > fx {
                    x = along(&x, &d_new, a);
                    fx = v;
                    *history.last_mut().expect("nonempty") = fx;
                }
                dirs.remove(biggest_at);
                dirs.push(d_new);
            }
        }
    }
    Some(PowellRun { x, value: fx, iterations: cfg.max_iterations, converged: false, history })
}

impl<'a> Personalizer<'a> {
    /// Builds the mean geometry once, tabulated over `range` of geodesic offsets.
    pub fn new(
        theta: &'a ModelParams,
        model: &'a ModelConfig,
        range: (f64, f64),
        cfg: PersonalizeConfig,
    ) -> Result<Self> {
        theta.validate()?;
        model.validate()?;
        cfg.validate()?;
        let geom = PopulationGeometry::new(&theta.as_population(), model, range)?;
        Ok(Self { theta, model, geom, cfg })
    }

    /// Offsets reached by the observations of `dataset` for latents within a few prior stds.
    pub fn typical_range(theta: &ModelParams, dataset: &LongitudinalDataset) -> (f64, f64) {
        let st = 4.0 * theta.var_time_shift.sqrt();
        let acc = (3.0 * theta.var_log_accel.sqrt()).exp();
        dataset
            .subjects
            .iter()
            .flat_map(|s| s.times())
            .flat_map(|t| [acc * (t - theta.reference_time - st), acc * (t - theta.reference_time + st)])
            .fold((0.0f64, 0.0f64), |(lo, hi), u| (lo.min(u), hi.max(u)))
    }

    fn problem<'p>(&'p self, subject: &'p Subject) -> Result<Problem<'p>> {
        subject.validate()?;
        let ns = self.theta.n_sources();
        let targets = subject
            .observations
            .iter()
            .map(|o| MetricTarget::new(&o.shape, &self.model.metric))
            .collect::<Result<Vec<_>>>()?;
        let xi_bound = self.cfg.max_log_accel / self.theta.var_log_accel.sqrt();
        let mut lower = vec![-self.cfg.max_time_shift, -xi_bound];
        let mut upper = vec![self.cfg.max_time_shift, xi_bound];
        lower.extend(std::iter::repeat_n(f64::NEG_INFINITY, ns));
        upper.extend(std::iter::repeat_n(f64::INFINITY, ns));
        Ok(Problem {
            theta: self.theta,
            geom: &self.geom,
            subject,
            targets,
            lower,
            upper,
            evaluations: std::cell::Cell::new(0),
        })
    }

    /// Objective `log q(y | z, theta) + log q(z | theta)` of `subject` at `z`.
    pub fn objective(&self, subject: &Subject, z: &IndividualLatents) -> Result<f64> {
        Ok(self.problem(subject)?.objective_of(z))
    }

    pub fn personalize(&self, subject: &Subject) -> Result<PersonalizationResult> {
        let p = self.problem(subject)?;
        let dim = 2 + self.theta.n_sources();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut best: Option<PowellRun> = None;
        for r in 0..self.cfg.restarts {
            let start: Vec<f64> = if r == 0 {
                vec![0.0; dim]
            } else {
                (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
            };
            if let Some(run) = powell(&p, start, &self.cfg) {
                if best.as_ref().is_none_or(|b| run.value > b.value) {
                    best = Some(run);
                }
            }
        }
        let best = best.ok_or_else(|| {
            Error::OptimizationFailed(format!(
                "subject {}: objective not finite at any of {} starts ({} evaluations)",
                subject.id,
                self.cfg.restarts,
                p.evaluations.get()
            ))
        })?;
        let latents = p.latents(&best.x);
        let r: f64 = p.residuals(&latents)?.iter().sum();
        let lambda: f64 = subject.observations.iter().map(|o| o.shape.residual_dimension()).sum();
        Ok(PersonalizationResult {
            id: subject.id.clone(),
            latents,
            objective: best.value,
            residual: (r / lambda).sqrt(),
            iterations: best.iterations,
            converged: best.converged,
            history: best.history,
        })
    }

    /// Personalizes every subject in parallel; failures are reported per subject.
    pub fn personalize_all(&self, dataset: &LongitudinalDataset) -> Vec<Result<PersonalizationResult>> {
        dataset.subjects.par_iter().map(|s| self.personalize(s)).collect()
    }
}

/// Fits the individual latents of one subject.
pub fn personalize(
    theta: &ModelParams,
    model: &ModelConfig,
    subject: &Subject,
    cfg: &PersonalizeConfig,
) -> Result<PersonalizationResult> {
    if subject.observations.is_empty() {
        return Err(invalid("personalization needs at least one observation"));
    }
    let ds = LongitudinalDataset { subjects: vec![subject.clone()] };
    let range = Personalizer::typical_range(theta, &ds);
    Personalizer::new(theta, model, range, *cfg)?.personalize(subject)
}

/// Fits every subject of `dataset` against one shared geometry.
pub fn batch_personalize(
    theta: &ModelParams,
    model: &ModelConfig,
    dataset: &LongitudinalDataset,
    cfg: &PersonalizeConfig,
) -> Result<Vec<Result<PersonalizationResult>>> {
    if dataset.is_empty() {
        return Ok(Vec::new());
    }
    let range = Personalizer::typical_range(theta, dataset);
    Ok(Personalizer::new(theta, model, range, *cfg)?.personalize_all(dataset))
}
