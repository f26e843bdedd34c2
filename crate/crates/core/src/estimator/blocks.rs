use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kernel::KernelConfig;
use crate::model::{IndividualLatents, LatentState, ModelParams, PriorConfig};
use crate::points::Points;
use crate::shape::Shape;

/// Constants of the adaptive block sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_adapt: usize,
    pub n_detect: usize,
    pub delta: f64,
    pub target_acceptance: f64,
    /// Initial proposal std of every block, in units of the block's prior std.
    pub initial_std: f64,
    pub min_std: f64,
    /// Template proposal control points are every `spacing`-th template vertex
    /// (0 selects `ceil(n_vertices / 10)`).
    pub template_spacing: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_adapt: 10,
            n_detect: 10,
            delta: 0.51,
            target_acceptance: 0.3,
            initial_std: 0.1,
            min_std: 1e-10,
            template_spacing: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error::Config;
        if self.n_adapt == 0 || self.n_detect == 0 {
            return Err(Config("n_adapt and n_detect must be at least 1".into()));
        }
        if !(self.delta > 0.5 && self.delta <= 1.0) {
            return Err(Config(format!("delta must lie in (0.5, 1], got {}", self.delta)));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Config("target_acceptance must lie in (0, 1)".into()));
        }
        if !(self.initial_std > 0.0 && self.min_std > 0.0) {
            return Err(Config("proposal stds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum BlockKind {
    Template,
    ControlPoints,
    Momenta,
    MixingColumn(usize),
    Subject(usize),
}

impl BlockKind {
    pub fn name(&self) -> String {
        match self {
            Self::Template => "template".into(),
            Self::ControlPoints => "control_points".into(),
            Self::Momenta => "momenta".into(),
            Self::MixingColumn(l) => format!("mixing_{l}"),
            Self::Subject(i) => format!("subject_{i}"),
        }
    }

    pub fn is_population(&self) -> bool {
        !matches!(self, Self::Subject(_))
    }
}

/// One block of the Metropolis-Hastings-within-Gibbs sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Proposal std in units of the block's prior std.
    pub proposal_std: f64,
    recent: VecDeque<bool>,
    capacity: usize,
    pub accepted: u64,
    pub proposed: u64,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, proposal_std: f64, n_detect: usize) -> Self {
        Self { kind, proposal_std, recent: VecDeque::with_capacity(n_detect), capacity: n_detect, accepted: 0, proposed: 0 }
    }

    pub fn record(&mut self, accepted: bool) {
        if self.recent.len() == self.capacity {
            self.recent.pop_front();
        }
        self.recent.push_back(accepted);
        self.proposed += 1;
        self.accepted += accepted as u64;
    }

    /// Mean acceptance over the last `n_detect` proposals (0 when none).
    pub fn recent_rate(&self) -> f64 {
        if self.recent.is_empty() {
            0.0
        } else {
            self.recent.iter().filter(|&&a| a).count() as f64 / self.recent.len() as f64
        }
    }
}

/// The sweep order: template, control points, momenta, mixing columns, subjects.
pub fn make_blocks(n_sources: usize, n_subjects: usize, cfg: &SamplerConfig) -> Vec<BlockSpec> {
    let mut kinds = vec![BlockKind::Template, BlockKind::ControlPoints, BlockKind::Momenta];
    kinds.extend((0..n_sources).map(BlockKind::MixingColumn));
    kinds.extend((0..n_subjects).map(BlockKind::Subject));
    kinds.into_iter().map(|k| BlockSpec::new(k, cfg.initial_std, cfg.n_detect)).collect()
}

/// One step of the additive adaptation rule.
pub fn adapted_std(std: f64, mean_rate: f64, k: usize, cfg: &SamplerConfig) -> f64 {
    let target = cfg.target_acceptance;
    let denom = if mean_rate >= target { 1.0 - target } else { target };
    let step = (k as f64).powf(-cfg.delta);
    (std + step * (mean_rate - target) / denom).max(cfg.min_std)
}

pub fn adapt_proposals(blocks: &mut [BlockSpec], k: usize, cfg: &SamplerConfig) {
    for b in blocks {
        b.proposal_std = adapted_std(b.proposal_std, b.recent_rate(), k, cfg);
    }
}

/// Metropolis acceptance with probability `min(1, exp(delta))`; non-finite `delta` rejects.
/// Always consumes exactly one uniform draw.
pub fn mh_accept(delta: f64, rng: &mut impl Rng) -> bool {
    let u: f64 = rng.random();
    delta.is_finite() && (delta >= 0.0 || u < delta.exp())
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Prior stds giving each block its natural units.
pub(crate) fn subject_scales(theta: &ModelParams) -> (f64, f64) {
    (theta.var_time_shift.sqrt(), theta.var_log_accel.sqrt())
}

/// Random-walk candidate for a subject block: `(t_i, xi_i, s_i)` perturbed with stds
/// `std * (sigma_tau, sigma_xi, 1, .., 1)`.
pub fn propose_individual(ind: &IndividualLatents, std: f64, theta: &ModelParams, rng: &mut impl Rng) -> IndividualLatents {
    let (st, sx) = subject_scales(theta);
    let mut out = ind.clone();
    out.onset_age += std * st * gaussian(rng);
    out.log_acceleration += std * sx * gaussian(rng);
    for s in out.sources.iter_mut() {
        *s += std * gaussian(rng);
    }
    out
}

fn perturb(values: &mut [f64], std: f64, rng: &mut impl Rng) {
    for v in values {
        *v += std * gaussian(rng);
    }
}

/// Smooth template perturbations: Gaussian momenta on fixed control points convolved
/// by the deformation kernel. The convolution matrix is evaluated once at the initial
/// template, which keeps the proposal an exact symmetric random walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateProposalConfig {
    pub control_points: Points,
    /// `D[v][p] = k(x_v, c_p)`.
    pub convolution: Vec<Vec<f64>>,
}

impl TemplateProposalConfig {
    /// Control points at every `spacing`-th vertex of `template` (0 selects `ceil(n_vertices / 10)`).
    pub fn regular(template: &Shape, spacing: usize, kernel: &KernelConfig) -> Self {
        let n = template.n_vertices();
        let spacing = if spacing == 0 { n.div_ceil(10).max(1) } else { spacing };
        let rows: Vec<f64> = (0..n).step_by(spacing).flat_map(|v| template.vertices().point(v).to_vec()).collect();
        let cps = Points::new(template.dim(), rows).expect("consistent dimension");
        Self::with_control_points(template, cps, kernel)
    }

    pub fn with_control_points(template: &Shape, control_points: Points, kernel: &KernelConfig) -> Self {
        let convolution = template
            .vertices()
            .iter()
            .map(|x| control_points.iter().map(|c| kernel.eval_unchecked(x, c)).collect())
            .collect();
        Self { control_points, convolution }
    }

    pub fn n_control_points(&self) -> usize {
        self.control_points.len()
    }
}

/// `y0 + D mom` with `mom ~ N(0, std^2 I)` on the proposal control points.
pub fn propose_template(cfg: &TemplateProposalConfig, y0: &Shape, std: f64, rng: &mut impl Rng) -> Result<Shape> {
    if cfg.convolution.len() != y0.n_vertices() || cfg.control_points.dim() != y0.dim() {
        return Err(invalid("template proposal was built for a different template"));
    }
    let d = y0.dim();
    let mut mom = vec![0.0; cfg.n_control_points() * d];
    perturb(&mut mom, std, rng);
    let mut v = y0.vertices().clone();
    for (i, row) in cfg.convolution.iter().enumerate() {
        let x = v.point_mut(i);
        for (p, &k) in row.iter().enumerate() {
            for a in 0..d {
                x[a] += k * mom[p * d + a];
            }
        }
    }
    Ok(y0.with_vertices(v))
}

/// Candidate state for one block, perturbing nothing outside it.
/// `std` is in natural units: it is multiplied by the block's prior std.
#[allow(clippy::too_many_arguments)]
pub fn propose_block(
    kind: BlockKind,
    std: f64,
    state: &LatentState,
    theta: &ModelParams,
    priors: &PriorConfig,
    template_cfg: &TemplateProposalConfig,
    rng: &mut impl Rng,
) -> Result<LatentState> {
    let mut out = state.clone();
    let f = &priors.fixed;
    match kind {
        BlockKind::Template => {
            out.population.template = propose_template(template_cfg, &state.population.template, std * f.template.sqrt(), rng)?
        }
        BlockKind::ControlPoints => {
            perturb(out.population.control_points.as_mut_slice(), std * f.control_points.sqrt(), rng)
        }
        BlockKind::Momenta => perturb(out.population.momenta.as_mut_slice(), std * f.momenta.sqrt(), rng),
        BlockKind::MixingColumn(l) => {
            if l >= out.population.mixing.ncols() {
                return Err(invalid(format!("mixing column {l} out of range")));
            }
            let mut col = out.population.mixing.column_mut(l);
            perturb(col.as_mut_slice(), std * f.mixing.sqrt(), rng)
        }
        BlockKind::Subject(i) => {
            let ind = state.individuals.get(i).ok_or_else(|| invalid(format!("subject {i} out of range")))?;
            out.individuals[i] = propose_individual(ind, std, theta, rng);
        }
    }
    Ok(out)
}
