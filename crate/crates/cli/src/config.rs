//! Run configuration: JSON file, `--section.key=value` overrides, validation and resolution.

use std::path::{Path, PathBuf};

use longdef::estimator::{EarlyStop, EstimatorConfig, SamplerConfig, StepSizePolicy, TemperatureSchedule};
use longdef::model::{FixedVariances, PriorStrengths, SimulationConfig};
use longdef::transport::{ExpParallelSteps, TransportOptions};
use longdef::{KernelConfig, MetricConfig, MetricKind, ModelConfig, PersonalizeConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads (0 uses all cores).
    pub threads: usize,
    pub model: ModelSection,
    pub priors: PriorStrengths,
    pub simulation: SimulationSection,
    pub estimation: EstimationSection,
    pub personalization: PersonalizeConfig,
    pub shoot: ShootSection,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            model: ModelSection::default(),
            priors: PriorStrengths { fixed: FixedVariances::default(), ..Default::default() },
            simulation: SimulationSection::default(),
            estimation: EstimationSection::default(),
            personalization: PersonalizeConfig::default(),
            shoot: ShootSection::default(),
            io: IoSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kernel_width: f64,
    pub dim: usize,
    pub n_sources: usize,
    pub metric: MetricConfig,
    pub steps: ExpParallelSteps,
    pub transport: TransportOptions,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kernel_width: 0.6,
            dim: 2,
            n_sources: 2,
            metric: MetricConfig { kind: MetricKind::Current, width: 0.3 },
            steps: ExpParallelSteps::default(),
            transport: TransportOptions::default(),
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            kernel: KernelConfig { width: self.kernel_width, dim: self.dim },
            metric: self.metric,
            steps: self.steps,
            transport: self.transport,
        }
    }
}

/// Synthetic cohort drawn around the planar arm fixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub n_subjects: usize,
    pub n_observations: usize,
    pub spacing: f64,
    pub start_jitter: f64,
    pub noise_std: f64,
    pub reference_time: f64,
    pub var_time_shift: f64,
    pub var_log_accel: f64,
    pub mixing_seed: u64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            n_subjects: 100,
            n_observations: 5,
            spacing: 1.0,
            start_jitter: 1.0,
            noise_std: 0.01,
            reference_time: 70.0,
            var_time_shift: 1.0,
            var_log_accel: 0.01,
            mixing_seed: 0,
        }
    }
}

impl SimulationSection {
    pub fn simulation_config(&self, seed: u64) -> SimulationConfig {
        SimulationConfig {
            n_subjects: self.n_subjects,
            n_observations: self.n_observations,
            spacing: self.spacing,
            start_jitter: self.start_jitter,
            noise_std: self.noise_std,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureSection {
    pub initial: f64,
    /// Defaults to a tenth of the iteration budget.
    pub plateau: Option<usize>,
    /// Defaults to the rate reaching 1 at half the budget.
    pub rate: Option<f64>,
}

impl Default for TemperatureSection {
    fn default() -> Self {
        Self { initial: 10.0, plateau: None, rate: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSizeKind {
    Polynomial,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepSizeSection {
    pub kind: StepSizeKind,
    /// Defaults to half the iteration budget.
    pub burn_in: Option<usize>,
    pub exponent: f64,
    pub rate: f64,
}

impl Default for StepSizeSection {
    fn default() -> Self {
        Self { kind: StepSizeKind::Polynomial, burn_in: None, exponent: 0.65, rate: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationSection {
    pub iterations: usize,
    /// Starting value of the log-acceleration variance.
    pub initial_var_log_accel: f64,
    pub sampler: SamplerConfig,
    pub temperature: TemperatureSection,
    pub step_size: StepSizeSection,
    pub early_stop: Option<EarlyStop>,
    pub sample_every: usize,
    pub checkpoint_every: usize,
}

impl Default for EstimationSection {
    fn default() -> Self {
        Self {
            iterations: 2000,
            initial_var_log_accel: 0.04,
            sampler: SamplerConfig::default(),
            temperature: TemperatureSection::default(),
            step_size: StepSizeSection::default(),
            early_stop: None,
            sample_every: 0,
            checkpoint_every: 100,
        }
    }
}

impl EstimationSection {
    /// Fills budget-dependent defaults in place.
    fn resolve(&mut self) {
        let auto = TemperatureSchedule::for_budget(self.temperature.initial.max(1.0), self.iterations);
        self.temperature.plateau.get_or_insert(auto.plateau);
        self.temperature.rate.get_or_insert(auto.rate);
        self.step_size.burn_in.get_or_insert(self.iterations / 2);
    }

    pub fn estimator_config(&self, seed: u64, checkpoint_path: Option<PathBuf>) -> EstimatorConfig {
        let mut s = self.clone();
        s.resolve();
        let burn_in = s.step_size.burn_in.expect("resolved");
        EstimatorConfig {
            iterations: s.iterations,
            seed,
            sampler: s.sampler,
            temperature: TemperatureSchedule {
                initial: s.temperature.initial,
                plateau: s.temperature.plateau.expect("resolved"),
                rate: s.temperature.rate.expect("resolved"),
            },
            step_size: match s.step_size.kind {
                StepSizeKind::Polynomial => StepSizePolicy::Polynomial { burn_in, exponent: s.step_size.exponent },
                StepSizeKind::Geometric => StepSizePolicy::Geometric { burn_in, rate: s.step_size.rate },
            },
            early_stop: s.early_stop,
            sample_every: s.sample_every,
            checkpoint_every: s.checkpoint_every,
            checkpoint_path,
        }
    }
}

/// Time span and sampling of the `shoot` and `transport` commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShootSection {
    pub t0: f64,
    pub t1: f64,
    pub samples: usize,
    pub steps_per_unit: usize,
    /// Length of the momentum arrows drawn per unit of momentum.
    pub arrow_scale: f64,
}

impl Default for ShootSection {
    fn default() -> Self {
        Self { t0: 0.0, t1: 1.0, samples: 5, steps_per_unit: 10, arrow_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub output: PathBuf,
    /// Dataset manifest (estimate, personalize).
    pub manifest: Option<PathBuf>,
    /// Model directory with the true parameters, used for error reports.
    pub truth: Option<PathBuf>,
    /// Model directory supplying the initial template, control points and momenta (estimate).
    pub init: Option<PathBuf>,
    /// Model directory of trained parameters (personalize).
    pub params: Option<PathBuf>,
    /// Geodesic description for shoot and transport; the arm fixture when absent.
    pub geodesic: Option<PathBuf>,
    /// Continue an interrupted estimation from its checkpoint.
    pub resume: bool,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            output: PathBuf::from("out"),
            manifest: None,
            truth: None,
            init: None,
            params: None,
            geodesic: None,
            resume: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `section.key=value` assignments. Values are parsed as JSON, falling back to strings.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> CliResult<Self> {
        let mut value = serde_json::to_value(&self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not of the form key=value")))?;
            let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        serde_json::from_value(value).map_err(|e| CliError::Config(format!("after overrides: {e}")))
    }

    /// Checks every section before any compute.
    pub fn validate(&self) -> CliResult<()> {
        self.model.model_config().validate().map_err(as_config)?;
        if self.model.n_sources == 0 {
            return Err(CliError::Config("model.n_sources must be at least 1".into()));
        }
        let strengths = &self.priors;
        for (name, v) in [
            ("priors.geometry_var", strengths.geometry_var),
            ("priors.reference_time_var", strengths.reference_time_var),
            ("priors.variance_weight", strengths.variance_weight),
            ("priors.fixed.template", strengths.fixed.template),
            ("priors.fixed.control_points", strengths.fixed.control_points),
            ("priors.fixed.momenta", strengths.fixed.momenta),
            ("priors.fixed.mixing", strengths.fixed.mixing),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let sim = &self.simulation;
        sim.simulation_config(self.seed).validate().map_err(as_config)?;
        if !(sim.var_time_shift > 0.0 && sim.var_log_accel > 0.0 && sim.reference_time.is_finite()) {
            return Err(CliError::Config("simulation variances must be positive".into()));
        }
        if !(self.estimation.initial_var_log_accel > 0.0) {
            return Err(CliError::Config("estimation.initial_var_log_accel must be positive".into()));
        }
        self.estimation.estimator_config(self.seed, Some(PathBuf::new())).validate().map_err(as_config)?;
        self.personalization.validate().map_err(as_config)?;
        let sh = &self.shoot;
        if sh.samples == 0 || sh.steps_per_unit == 0 || !(sh.t0.is_finite() && sh.t1.is_finite()) {
            return Err(CliError::Config("shoot needs samples >= 1, steps_per_unit >= 1 and finite times".into()));
        }
        Ok(())
    }

    /// The configuration with every budget-dependent default filled in.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.estimation.resolve();
        out
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn as_config(e: longdef::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn set_path(root: &mut Value, key: &str, v: Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed override key `{key}`")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just created")
            }
            _ => return Err(CliError::Config(format!("`{}` is not a section", parts[..i].join(".")))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        if !obj.contains_key(*part) {
            return Err(CliError::Config(format!("unknown config key `{}`", parts[..=i].join("."))));
        }
        node = obj.get_mut(*part).expect("checked");
    }
    Ok(())
}
