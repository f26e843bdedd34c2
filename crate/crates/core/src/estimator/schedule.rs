use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SufficientStatistics;

/// Constant temperature for `k <= plateau`, then geometric decay to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub initial: f64,
    pub plateau: usize,
    pub rate: f64,
}

impl TemperatureSchedule {
    pub fn disabled() -> Self {
        Self { initial: 1.0, plateau: 0, rate: 0.5 }
    }

    /// Plateau over the first 10% of `budget`, reaching 1 at half the budget.
    pub fn for_budget(initial: f64, budget: usize) -> Self {
        let plateau = budget / 10;
        let decay = (budget / 2).saturating_sub(plateau).max(1);
        let rate = if initial > 1.0 { initial.powf(-1.0 / decay as f64) } else { 0.5 };
        Self { initial, plateau, rate }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial >= 1.0 && self.initial.is_finite()) {
            return Err(Error::Config(format!("initial temperature must be >= 1, got {}", self.initial)));
        }
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::Config(format!("temperature decay rate must lie in (0, 1), got {}", self.rate)));
        }
        Ok(())
    }
}

pub fn temperature(k: usize, schedule: &TemperatureSchedule) -> f64 {
    if k <= schedule.plateau {
        schedule.initial
    } else {
        let t = schedule.initial * schedule.rate.powf((k - schedule.plateau) as f64);
        t.max(1.0)
    }
}

/// Stochastic-approximation step sizes. Both policies use `rho = 1` for `k <= burn_in`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSizePolicy {
    /// `rho = (k - burn_in)^(-exponent)`.
    Polynomial { burn_in: usize, exponent: f64 },
    /// `rho = rate^(k - burn_in)`.
    Geometric { burn_in: usize, rate: f64 },
}

impl StepSizePolicy {
    pub fn for_budget(budget: usize) -> Self {
        Self::Polynomial { burn_in: budget / 2, exponent: 0.65 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Polynomial { exponent, .. } if !(exponent > 0.5 && exponent <= 1.0) => {
                Err(Error::Config(format!("step-size exponent must lie in (0.5, 1], got {exponent}")))
            }
            Self::Geometric { rate, .. } if !(rate > 0.0 && rate < 1.0) => {
                Err(Error::Config(format!("geometric step-size rate must lie in (0, 1), got {rate}")))
            }
            _ => Ok(()),
        }
    }

    pub fn step_size(&self, k: usize) -> f64 {
        match *self {
            Self::Polynomial { burn_in, exponent } => {
                if k <= burn_in {
                    1.0
                } else {
                    ((k - burn_in) as f64).powf(-exponent)
                }
            }
            Self::Geometric { burn_in, rate } => {
                if k <= burn_in {
                    1.0
                } else {
                    rate.powf((k - burn_in) as f64)
                }
            }
        }
    }
}

/// `S + rho (S(z) - S)`.
pub fn sa_update(current: &SufficientStatistics, sample: &SufficientStatistics, rho: f64) -> Result<SufficientStatistics> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(crate::error::invalid(format!("step size must lie in (0, 1], got {rho}")));
    }
    let mut next = current.clone();
    next.approach(sample, rho);
    Ok(next)
}
