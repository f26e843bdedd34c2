//! MCMC-SAEM estimation of the model parameters.
//!
//! Each iteration sweeps the latent blocks with random-walk Metropolis-Hastings under
//! the tempered joint density, then updates the stochastic approximation of the
//! sufficient statistics, maximizes in closed form and adapts the proposal stds.
//!
//! Randomness comes from two ChaCha8 streams of the same seed: stream 0 draws proposals,
//! stream 1 draws acceptance uniforms. Subject blocks are conditionally independent given
//! the population, so their candidates are drawn sequentially and evaluated in parallel.

mod blocks;
mod mstep;
mod schedule;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    individual_term, population_term, subject_residuals, IndividualLatents, LatentState,
    LongitudinalDataset, ModelConfig, ModelParams, PopulationGeometry, PopulationLatents, PriorConfig,
    SufficientStatistics,
};
use crate::shape::MetricTarget;

pub use blocks::{
    adapt_proposals, adapted_std, make_blocks, mh_accept, propose_block, propose_individual, propose_template,
    BlockKind, BlockSpec, SamplerConfig, TemplateProposalConfig,
};
pub use mstep::{m_step, MStep};
pub use schedule::{sa_update, temperature, StepSizePolicy, TemperatureSchedule};

/// Extra offset range tabulated around the observations when building the geometry.
const RANGE_MARGIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub tolerance: f64,
    pub window: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self { tolerance: 1e-5, window: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub iterations: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub temperature: TemperatureSchedule,
    pub step_size: StepSizePolicy,
    pub early_stop: Option<EarlyStop>,
    /// Keep a copy of the latent state every `sample_every` iterations after burn-in (0 disables).
    pub sample_every: usize,
    /// Write a checkpoint every this many iterations (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl EstimatorConfig {
    /// Defaults scaled to an iteration budget: temperature 10 on a plateau of 10% of the
    /// budget reaching 1 at 50%, unit step sizes over the first half.
    pub fn for_budget(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            seed,
            sampler: SamplerConfig::default(),
            temperature: TemperatureSchedule::for_budget(10.0, iterations),
            step_size: StepSizePolicy::for_budget(iterations),
            early_stop: None,
            sample_every: 0,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.temperature.validate()?;
        self.step_size.validate()?;
        if let Some(e) = &self.early_stop {
            if !(e.tolerance > 0.0) || e.window == 0 {
                return Err(Error::Config("early_stop needs a positive tolerance and window".into()));
            }
        }
        if self.checkpoint_every > 0 && self.checkpoint_path.is_none() {
            return Err(Error::Config("checkpoint_every is set but checkpoint_path is missing".into()));
        }
        Ok(())
    }

    fn burn_in(&self) -> usize {
        match self.step_size {
            StepSizePolicy::Polynomial { burn_in, .. } | StepSizePolicy::Geometric { burn_in, .. } => burn_in,
        }
    }
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub temperature: f64,
    pub step_size: f64,
    pub log_likelihood: f64,
    pub reference_time: f64,
    pub var_time_shift: f64,
    pub var_log_accel: f64,
    pub var_noise: f64,
    /// Fraction of the sweep's blocks accepted at this iteration.
    pub sweep_acceptance: f64,
    /// Mean acceptance of each block over its last `n_detect` proposals.
    pub block_acceptance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub name: String,
    pub proposal_std: f64,
    pub accepted: u64,
    pub proposed: u64,
}

impl BlockSummary {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimationOutput {
    pub theta: ModelParams,
    pub state: LatentState,
    pub stats: SufficientStatistics,
    pub trace: Vec<TraceRow>,
    pub samples: Vec<LatentState>,
    pub blocks: Vec<BlockSpec>,
    pub iterations: usize,
    pub stopped_early: bool,
}

impl EstimationOutput {
    pub fn block_names(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.kind.name()).collect()
    }
}

/// Everything needed to resume a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub iteration: usize,
    pub config: EstimatorConfig,
    pub theta: ModelParams,
    pub state: LatentState,
    pub stats: SufficientStatistics,
    pub blocks: Vec<BlockSpec>,
    pub template_proposal: TemplateProposalConfig,
    pub proposal_rng: ChaCha8Rng,
    pub accept_rng: ChaCha8Rng,
    /// Block-level acceptance accumulated since the last adaptation window, and the trace so far.
    pub trace: Vec<TraceRow>,
    pub samples: Vec<LatentState>,
    pub stable_since: usize,
}

pub const CHECKPOINT_FORMAT: &str = "longdef-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let json = serde_json::to_vec(self).map_err(|e| Error::Numerical(format!("checkpoint encoding: {e}")))?;
        std::fs::write(&tmp, json)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Parse { line: e.line(), message: format!("checkpoint: {e}") })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        Ok(ck)
    }
}

/// Heuristic starting point: the given population latents, individual latents at zero,
/// `t0` at the mean observation time, `var_time_shift` at the variance of the subjects'
/// mean observation times and `var_noise` at the mean residual per dimension.
pub fn initialize(
    dataset: &LongitudinalDataset,
    population: PopulationLatents,
    var_log_accel: f64,
    cfg: &ModelConfig,
) -> Result<(ModelParams, LatentState)> {
    if dataset.is_empty() {
        return Err(crate::error::invalid("cannot initialize on an empty dataset"));
    }
    let t0 = dataset.mean_time();
    let means: Vec<f64> = dataset.subjects.iter().map(|s| s.mean_time()).collect();
    let m = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / means.len() as f64;
    let ns = population.n_sources();
    let state = LatentState {
        population: population.clone(),
        individuals: vec![IndividualLatents::zero(t0, ns); dataset.len()],
    };
    let r: f64 = crate::model::residuals(dataset, &state, cfg)?.iter().flatten().sum();
    let theta = ModelParams {
        mean_template: population.template,
        mean_control_points: population.control_points,
        mean_momenta: population.momenta,
        mean_mixing: population.mixing,
        reference_time: t0,
        var_time_shift: var.max(1e-4),
        var_log_accel,
        var_noise: (r / dataset.total_residual_dimension()).max(1e-12),
    };
    theta.validate()?;
    Ok((theta, state))
}

/// Geometry and residuals of the current state.
struct Cache {
    geom: PopulationGeometry,
    residuals: Vec<Vec<f64>>,
    subject_sums: Vec<f64>,
}

impl Cache {
    fn total(&self) -> f64 {
        self.subject_sums.iter().sum()
    }
}

pub struct Estimator<'a> {
    dataset: &'a LongitudinalDataset,
    targets: Vec<Vec<MetricTarget>>,
    total_lambda: f64,
    model: ModelConfig,
    priors: PriorConfig,
    cfg: EstimatorConfig,
    theta: ModelParams,
    state: LatentState,
    stats: SufficientStatistics,
    blocks: Vec<BlockSpec>,
    template_proposal: TemplateProposalConfig,
    proposal_rng: ChaCha8Rng,
    accept_rng: ChaCha8Rng,
    cache: Cache,
    k: usize,
    trace: Vec<TraceRow>,
    samples: Vec<LatentState>,
    stable_since: usize,
}

fn offset_range(dataset: &LongitudinalDataset, individuals: &[IndividualLatents]) -> (f64, f64) {
    let (lo, hi) = crate::model::likelihood::offset_range(dataset, individuals);
    (lo - RANGE_MARGIN, hi + RANGE_MARGIN)
}

impl<'a> Estimator<'a> {
    pub fn new(
        dataset: &'a LongitudinalDataset,
        theta: ModelParams,
        state: LatentState,
        priors: PriorConfig,
        model: ModelConfig,
        cfg: EstimatorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        priors.validate()?;
        theta.validate()?;
        let template_proposal =
            TemplateProposalConfig::regular(&state.population.template, cfg.sampler.template_spacing, &model.kernel);
        let blocks = make_blocks(state.population.n_sources(), dataset.len(), &cfg.sampler);
        let proposal_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut accept_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        accept_rng.set_stream(1);
        let mut est = Self::assemble(dataset, theta, state, priors, model, cfg, blocks, template_proposal, proposal_rng, accept_rng)?;
        est.stats = SufficientStatistics::from_state(&est.state, est.cache.total());
        Ok(est)
    }

    pub fn from_checkpoint(
        dataset: &'a LongitudinalDataset,
        checkpoint: Checkpoint,
        priors: PriorConfig,
        model: ModelConfig,
    ) -> Result<Self> {
        let Checkpoint {
            iteration,
            config,
            theta,
            state,
            stats,
            blocks,
            template_proposal,
            proposal_rng,
            accept_rng,
            trace,
            samples,
            stable_since,
            ..
        } = checkpoint;
        let mut est =
            Self::assemble(dataset, theta, state, priors, model, config, blocks, template_proposal, proposal_rng, accept_rng)?;
        est.stats = stats;
        est.k = iteration;
        est.trace = trace;
        est.samples = samples;
        est.stable_since = stable_since;
        Ok(est)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        dataset: &'a LongitudinalDataset,
        theta: ModelParams,
        state: LatentState,
        priors: PriorConfig,
        model: ModelConfig,
        cfg: EstimatorConfig,
        blocks: Vec<BlockSpec>,
        template_proposal: TemplateProposalConfig,
        proposal_rng: ChaCha8Rng,
        accept_rng: ChaCha8Rng,
    ) -> Result<Self> {
        dataset.validate()?;
        if dataset.len() != state.individuals.len() {
            return Err(crate::error::invalid("one set of individual latents per subject is required"));
        }
        let targets = dataset.metric_targets(&model.metric)?;
        let cache = build_cache(dataset, &targets, &state.population, &state.individuals, &model)?;
        let stats = SufficientStatistics::from_state(&state, cache.total());
        Ok(Self {
            dataset,
            targets,
            total_lambda: dataset.total_residual_dimension(),
            model,
            priors,
            cfg,
            theta,
            state,
            stats,
            blocks,
            template_proposal,
            proposal_rng,
            accept_rng,
            cache,
            k: 0,
            trace: Vec::new(),
            samples: Vec::new(),
            stable_since: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.k
    }

    pub fn theta(&self) -> &ModelParams {
        &self.theta
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            iteration: self.k,
            config: self.cfg.clone(),
            theta: self.theta.clone(),
            state: self.state.clone(),
            stats: self.stats.clone(),
            blocks: self.blocks.clone(),
            template_proposal: self.template_proposal.clone(),
            proposal_rng: self.proposal_rng.clone(),
            accept_rng: self.accept_rng.clone(),
            trace: self.trace.clone(),
            samples: self.samples.clone(),
            stable_since: self.stable_since,
        }
    }

    /// Complete log-likelihood of the current state and parameters.
    pub fn log_likelihood(&self) -> f64 {
        crate::model::likelihood::terms_from_residuals(
            self.dataset,
            &self.state,
            &self.cache.residuals,
            &self.theta,
            &self.priors,
            1.0,
        )
        .total()
    }

    /// Change in the tempered log-density if the population latents became `candidate`.
    /// Returns the delta with the candidate's cache, or `None` when the candidate cannot be evaluated.
    fn population_delta(&self, candidate: &PopulationLatents, t: f64) -> Option<(f64, Cache)> {
        let cache = match build_cache(self.dataset, &self.targets, candidate, &self.state.individuals, &self.model) {
            Ok(c) => c,
            Err(e) => {
                log::debug!("population candidate rejected: {e}");
                return None;
            }
        };
        let v = t * self.theta.var_noise;
        let fixed = &self.priors.fixed;
        let delta = -0.5 * (cache.total() - self.cache.total()) / v
            + population_term(candidate, &self.theta, fixed, t)
            - population_term(&self.state.population, &self.theta, fixed, t);
        Some((delta, cache))
    }

    /// Change in the tempered log-density if subject `i` took the latents `candidate`.
    fn subject_delta(&self, i: usize, candidate: &IndividualLatents, t: f64) -> Option<(f64, Vec<f64>)> {
        let r = match subject_residuals(&self.cache.geom, &self.dataset.subjects[i], candidate, &self.targets[i]) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("subject {i} candidate rejected: {e}");
                return None;
            }
        };
        let v = t * self.theta.var_noise;
        let new_sum: f64 = r.iter().sum();
        let delta = -0.5 * (new_sum - self.cache.subject_sums[i]) / v + individual_term(candidate, &self.theta)
            - individual_term(&self.state.individuals[i], &self.theta);
        Some((delta, r))
    }

    fn population_block(&mut self, b: usize, t: f64) -> Result<bool> {
        let kind = self.blocks[b].kind;
        let std = self.blocks[b].proposal_std;
        let candidate = propose_block(
            kind,
            std,
            &self.state,
            &self.theta,
            &self.priors,
            &self.template_proposal,
            &mut self.proposal_rng,
        )?
        .population;
        let evaluated = self.population_delta(&candidate, t);
        let delta = evaluated.as_ref().map_or(f64::NEG_INFINITY, |(d, _)| *d);
        let accepted = mh_accept(delta, &mut self.accept_rng);
        if accepted {
            let (_, cache) = evaluated.expect("finite delta implies an evaluated candidate");
            self.state.population = candidate;
            self.cache = cache;
        }
        self.blocks[b].record(accepted);
        Ok(accepted)
    }

    fn subject_blocks(&mut self, first: usize, t: f64) -> usize {
        let n = self.dataset.len();
        let candidates: Vec<IndividualLatents> = (0..n)
            .map(|i| {
                let std = self.blocks[first + i].proposal_std;
                propose_individual(&self.state.individuals[i], std, &self.theta, &mut self.proposal_rng)
            })
            .collect();
        let evaluated: Vec<Option<(f64, Vec<f64>)>> =
            candidates.par_iter().enumerate().map(|(i, c)| self.subject_delta(i, c, t)).collect();
        let mut n_accepted = 0;
        for (i, (cand, ev)) in candidates.into_iter().zip(evaluated).enumerate() {
            let delta = ev.as_ref().map_or(f64::NEG_INFINITY, |(d, _)| *d);
            let accepted = mh_accept(delta, &mut self.accept_rng);
            if accepted {
                let (_, r) = ev.expect("finite delta implies an evaluated candidate");
                self.cache.subject_sums[i] = r.iter().sum();
                self.cache.residuals[i] = r;
                self.state.individuals[i] = cand;
                n_accepted += 1;
            }
            self.blocks[first + i].record(accepted);
        }
        n_accepted
    }

    /// One full MCMC-SAEM iteration.
    pub fn step(&mut self) -> Result<&TraceRow> {
        self.k += 1;
        let k = self.k;
        let t = temperature(k, &self.cfg.temperature);
        let mut accepted = 0;
        let first_subject = self.blocks.iter().position(|b| !b.kind.is_population()).unwrap_or(self.blocks.len());
        for b in 0..first_subject {
            accepted += self.population_block(b, t)? as usize;
        }
        accepted += self.subject_blocks(first_subject, t);

        let rho = self.cfg.step_size.step_size(k);
        let sample = SufficientStatistics::from_state(&self.state, self.cache.total());
        self.stats = sa_update(&self.stats, &sample, rho)?;
        let previous = self.theta.clone();
        self.theta =
            m_step(&self.stats, &self.priors, &self.state.population.template, self.dataset.len(), self.total_lambda)?.theta;
        if k % self.cfg.sampler.n_adapt == 0 {
            adapt_proposals(&mut self.blocks, k, &self.cfg.sampler);
        }
        if self.cfg.sample_every > 0 && k > self.cfg.burn_in() && k % self.cfg.sample_every == 0 {
            self.samples.push(self.state.clone());
        }
        if let Some(es) = &self.cfg.early_stop {
            if max_relative_change(&previous, &self.theta) < es.tolerance {
                self.stable_since += 1;
            } else {
                self.stable_since = 0;
            }
        }
        let row = TraceRow {
            iteration: k,
            temperature: t,
            step_size: rho,
            log_likelihood: self.log_likelihood(),
            reference_time: self.theta.reference_time,
            var_time_shift: self.theta.var_time_shift,
            var_log_accel: self.theta.var_log_accel,
            var_noise: self.theta.var_noise,
            sweep_acceptance: accepted as f64 / self.blocks.len() as f64,
            block_acceptance: self.blocks.iter().map(BlockSpec::recent_rate).collect(),
        };
        self.trace.push(row);
        Ok(self.trace.last().expect("just pushed"))
    }

    fn should_stop(&self) -> bool {
        match &self.cfg.early_stop {
            Some(es) => self.stable_since >= es.window,
            None => false,
        }
    }

    fn write_checkpoint(&self) -> Result<()> {
        if let Some(path) = &self.cfg.checkpoint_path {
            self.checkpoint().save(path)?;
        }
        Ok(())
    }

    /// Runs until the iteration budget is spent or the early-stop criterion holds.
    /// On a numerical failure the last consistent state is checkpointed before returning the error.
    pub fn run(mut self) -> Result<EstimationOutput> {
        let mut stopped_early = false;
        while self.k < self.cfg.iterations {
            let snapshot = self.cfg.checkpoint_path.as_ref().map(|_| self.checkpoint());
            if let Err(e) = self.step() {
                if let (Some(ck), Some(path)) = (snapshot, &self.cfg.checkpoint_path) {
                    ck.save(path)?;
                }
                return Err(e);
            }
            if self.cfg.checkpoint_every > 0 && self.k % self.cfg.checkpoint_every == 0 {
                self.write_checkpoint()?;
            }
            if self.should_stop() {
                stopped_early = true;
                break;
            }
        }
        if self.cfg.checkpoint_every > 0 {
            self.write_checkpoint()?;
        }
        Ok(EstimationOutput {
            theta: self.theta,
            state: self.state,
            stats: self.stats,
            trace: self.trace,
            samples: self.samples,
            blocks: self.blocks,
            iterations: self.k,
            stopped_early,
        })
    }
}

fn build_cache(
    dataset: &LongitudinalDataset,
    targets: &[Vec<MetricTarget>],
    population: &PopulationLatents,
    individuals: &[IndividualLatents],
    model: &ModelConfig,
) -> Result<Cache> {
    let geom = PopulationGeometry::new(population, model, offset_range(dataset, individuals))?;
    let residuals: Vec<Vec<f64>> = dataset
        .subjects
        .par_iter()
        .zip(individuals)
        .zip(targets)
        .map(|((s, z), t)| subject_residuals(&geom, s, z, t))
        .collect::<Result<_>>()?;
    let subject_sums = residuals.iter().map(|r| r.iter().sum()).collect();
    Ok(Cache { geom, residuals, subject_sums })
}

fn max_relative_change(a: &ModelParams, b: &ModelParams) -> f64 {
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(1e-12);
    let mut m = 0.0f64;
    for (x, y) in [
        (a.reference_time, b.reference_time),
        (a.var_time_shift, b.var_time_shift),
        (a.var_log_accel, b.var_log_accel),
        (a.var_noise, b.var_noise),
    ] {
        m = m.max(rel(x, y));
    }
    let arrays = [
        (a.mean_template.vertices().as_slice(), b.mean_template.vertices().as_slice()),
        (a.mean_control_points.as_slice(), b.mean_control_points.as_slice()),
        (a.mean_momenta.as_slice(), b.mean_momenta.as_slice()),
        (a.mean_mixing.as_slice(), b.mean_mixing.as_slice()),
    ];
    for (x, y) in arrays {
        let num: f64 = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let den: f64 = x.iter().map(|p| p * p).sum::<f64>().sqrt().max(1e-12);
        m = m.max(num / den);
    }
    m
}

/// Runs MCMC-SAEM from `(theta0, z0)`.
pub fn run_estimation(
    dataset: &LongitudinalDataset,
    theta0: ModelParams,
    z0: LatentState,
    priors: PriorConfig,
    model: ModelConfig,
    cfg: EstimatorConfig,
) -> Result<EstimationOutput> {
    Estimator::new(dataset, theta0, z0, priors, model, cfg)?.run()
}

#[cfg(test)]
mod tests;
