use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{ModelParams, PriorConfig, SufficientStatistics};
use crate::points::Points;
use crate::shape::Shape;

/// Maximizer of the `theta`-terms of the joint log-density for given statistics.
#[derive(Debug, Clone)]
pub struct MStep {
    pub theta: ModelParams,
    /// Rounds of the `(t0, var_time_shift)` fixed-point iteration.
    pub rounds: usize,
}

const MAX_ROUNDS: usize = 100;
const ROUND_TOL: f64 = 1e-10;

fn shrink_points(stat: &Points, prior_mean: &Points, fixed: f64, prior_var: f64) -> Points {
    let w = prior_var / (prior_var + fixed);
    let mut out = stat.scaled(w);
    out.axpy(1.0 - w, prior_mean);
    out
}

fn shrink_matrix(stat: &DMatrix<f64>, prior_mean: &DMatrix<f64>, fixed: f64, prior_var: f64) -> DMatrix<f64> {
    let w = prior_var / (prior_var + fixed);
    stat * w + prior_mean * (1.0 - w)
}

/// Closed-form update. `template` supplies the mesh connectivity of the mean template,
/// `total_lambda` the summed residual dimension over all observations.
pub fn m_step(
    stats: &SufficientStatistics,
    priors: &PriorConfig,
    template: &Shape,
    n_subjects: usize,
    total_lambda: f64,
) -> Result<MStep> {
    priors.validate()?;
    if n_subjects == 0 {
        return Err(crate::error::invalid("the M-step needs at least one subject"));
    }
    if !stats.is_finite() {
        return Err(Error::Numerical("non-finite sufficient statistics".into()));
    }
    let f = &priors.fixed;
    let n = n_subjects as f64;
    let mean_template =
        template.with_vertices(shrink_points(&stats.template, &priors.template_mean, f.template, priors.template_var));
    let mean_control_points =
        shrink_points(&stats.control_points, &priors.control_points_mean, f.control_points, priors.control_points_var);
    let mean_momenta = shrink_points(&stats.momenta, &priors.momenta_mean, f.momenta, priors.momenta_var);
    let mean_mixing = shrink_matrix(&stats.mixing, &priors.mixing_mean, f.mixing, priors.mixing_var);

    let (s5, s6) = (stats.sum_onset, stats.sum_onset_sq);
    let mean_onset = s5 / n;
    // sum_i (t_i - t0)^2 = spread + n (t0 - mean)^2, with the t0-independent part computed once
    let spread = (s6 - s5 * mean_onset).max(0.0);
    let var_tau = |t0: f64| {
        (spread + n * (t0 - mean_onset).powi(2) + priors.time_shift_weight * priors.time_shift_scale)
            / (n + priors.time_shift_weight)
    };
    let ref_time = |var: f64| {
        (priors.reference_time_var * s5 + var * priors.reference_time_mean) / (n * priors.reference_time_var + var)
    };
    let mut t0 = mean_onset;
    let mut v = var_tau(t0);
    let mut rounds = 0;
    loop {
        rounds += 1;
        let t_next = ref_time(v);
        let v_next = var_tau(t_next);
        let dt = (t_next - t0).abs() / t_next.abs().max(1.0);
        let dv = (v_next - v).abs() / v_next;
        t0 = t_next;
        v = v_next;
        if dt < ROUND_TOL && dv < ROUND_TOL {
            break;
        }
        if rounds >= MAX_ROUNDS {
            return Err(Error::Numerical(format!(
                "reference time / time-shift variance fixed point did not converge in {MAX_ROUNDS} rounds"
            )));
        }
    }
    let var_log_accel = (stats.sum_log_accel_sq + priors.log_accel_weight * priors.log_accel_scale)
        / (n + priors.log_accel_weight);
    let var_noise = (stats.sum_residual + priors.noise_weight * priors.noise_scale) / (total_lambda + priors.noise_weight);
    let theta = ModelParams {
        mean_template,
        mean_control_points,
        mean_momenta,
        mean_mixing,
        reference_time: t0,
        var_time_shift: v,
        var_log_accel,
        var_noise,
    };
    theta.validate()?;
    Ok(MStep { theta, rounds })
}
