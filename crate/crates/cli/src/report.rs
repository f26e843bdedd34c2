//! Error reports against simulation truth.

use std::collections::HashMap;

use longdef::kernel::convolve;
use longdef::model::{space_shift, IndividualLatents};
use longdef::shape::metric_dist2;
use longdef::{MetricConfig, MetricKind, ModelConfig, ModelParams, PersonalizationResult, Points};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::files::ModelDir;

/// Parameter and latent errors of an estimated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationErrors {
    /// Squared varifold distance between the templates.
    pub template_varifold: f64,
    /// Mean squared difference of the initial velocity fields on the true template vertices.
    pub velocity_field: f64,
    pub reference_time: f64,
    pub std_time_shift: f64,
    pub std_log_accel: f64,
    pub std_noise: f64,
    /// Mean over subjects of the mean squared space-shift field difference on the true template vertices.
    pub space_shift_field: Option<f64>,
    pub log_accel: Option<f64>,
    pub time_shift: Option<f64>,
    pub matched_subjects: usize,
}

fn mean_sq_diff(a: &Points, b: &Points) -> f64 {
    a.sub(b).norm_squared() / a.len().max(1) as f64
}

fn by_id(latents: &Option<Vec<(String, IndividualLatents)>>) -> HashMap<&str, &IndividualLatents> {
    latents.iter().flatten().map(|(id, z)| (id.as_str(), z)).collect()
}

pub fn estimation_errors(est: &ModelDir, truth: &ModelDir, cfg: &ModelConfig) -> CliResult<EstimationErrors> {
    let (e, t) = (&est.params, &truth.params);
    let k = &cfg.kernel;
    let x = t.mean_template.vertices();
    let var_cfg = MetricConfig { kind: MetricKind::Varifold, width: cfg.metric.width };
    let template_varifold = metric_dist2(&e.mean_template, &t.mean_template, &var_cfg)?;
    let velocity_field = mean_sq_diff(
        &convolve(&e.mean_control_points, &e.mean_momenta, x, k),
        &convolve(&t.mean_control_points, &t.mean_momenta, x, k),
    );
    let est_latents = by_id(&est.latents);
    let true_latents = by_id(&truth.latents);
    let mut field = 0.0;
    let mut xi = 0.0;
    let mut tau = 0.0;
    let mut n = 0usize;
    let (ep, tp) = (e.as_population(), t.as_population());
    for (id, zt) in &true_latents {
        let Some(ze) = est_latents.get(id) else { continue };
        if ze.sources.len() != zt.sources.len() {
            return Err(CliError::Data(format!("subject {id}: source counts differ between estimate and truth")));
        }
        let we = space_shift(&ep, &ze.sources, k)?;
        let wt = space_shift(&tp, &zt.sources, k)?;
        field += mean_sq_diff(&convolve(&e.mean_control_points, &we, x, k), &convolve(&t.mean_control_points, &wt, x, k));
        xi += (ze.log_acceleration - zt.log_acceleration).abs();
        tau += ((ze.onset_age - e.reference_time) - (zt.onset_age - t.reference_time)).abs();
        n += 1;
    }
    let avg = |v: f64| (n > 0).then(|| v / n as f64);
    Ok(EstimationErrors {
        template_varifold,
        velocity_field,
        reference_time: (e.reference_time - t.reference_time).abs(),
        std_time_shift: (e.var_time_shift.sqrt() - t.var_time_shift.sqrt()).abs(),
        std_log_accel: (e.var_log_accel.sqrt() - t.var_log_accel.sqrt()).abs(),
        std_noise: (e.var_noise.sqrt() - t.var_noise.sqrt()).abs(),
        space_shift_field: avg(field),
        log_accel: avg(xi),
        time_shift: avg(tau),
        matched_subjects: n,
    })
}

/// Registration errors of personalized latents, relative to the simulation stds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationErrors {
    pub matched_subjects: usize,
    /// Mean `|tau_hat - tau|`, as a fraction of `sigma_tau`.
    pub time_shift: f64,
    /// Mean `|xi_hat - xi|`, as a fraction of `sigma_xi`.
    pub log_accel: f64,
    /// Mean absolute source error (sources have unit std).
    pub sources: f64,
    /// Mean `|sigma_hat - sigma_eps|` of the per-subject residual std.
    pub noise: f64,
}

pub fn personalization_errors(
    results: &[PersonalizationResult],
    truth: &ModelDir,
    theta: &ModelParams,
) -> Option<PersonalizationErrors> {
    let t = &truth.params;
    let true_latents = by_id(&truth.latents);
    let (mut n, mut tau, mut xi, mut s, mut noise) = (0usize, 0.0, 0.0, 0.0, 0.0);
    for r in results {
        let Some(zt) = true_latents.get(r.id.as_str()) else { continue };
        let z = &r.latents;
        tau += ((z.onset_age - theta.reference_time) - (zt.onset_age - t.reference_time)).abs();
        xi += (z.log_acceleration - zt.log_acceleration).abs();
        let ns = zt.sources.len().max(1) as f64;
        s += z.sources.iter().zip(&zt.sources).map(|(a, b)| (a - b).abs()).sum::<f64>() / ns;
        noise += (r.residual - t.var_noise.sqrt()).abs();
        n += 1;
    }
    (n > 0).then(|| {
        let m = n as f64;
        PersonalizationErrors {
            matched_subjects: n,
            time_shift: tau / m / t.var_time_shift.sqrt(),
            log_accel: xi / m / t.var_log_accel.sqrt(),
            sources: s / m,
            noise: noise / m,
        }
    })
}
