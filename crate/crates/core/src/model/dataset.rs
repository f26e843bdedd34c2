use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::shape::{MetricConfig, MetricTarget, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub observations: Vec<Observation>,
}

impl Subject {
    pub fn new(id: impl Into<String>, observations: Vec<Observation>) -> Result<Self> {
        let s = Self { id: id.into(), observations };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.observations.is_empty() {
            return Err(invalid(format!("subject {} has no observations", self.id)));
        }
        for (j, o) in self.observations.iter().enumerate() {
            if !o.time.is_finite() {
                return Err(invalid(format!("subject {}: observation {j} has a non-finite time", self.id)));
            }
            if j > 0 && o.time <= self.observations[j - 1].time {
                return Err(invalid(format!("subject {}: observation times must be strictly increasing", self.id)));
            }
        }
        Ok(())
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.observations.iter().map(|o| o.time)
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn mean_time(&self) -> f64 {
        self.times().sum::<f64>() / self.len() as f64
    }
}

/// `N` subjects, each observed at one or more increasing times.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    pub subjects: Vec<Subject>,
}

impl LongitudinalDataset {
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        let ds = Self { subjects };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut dim = None;
        for s in &self.subjects {
            s.validate()?;
            for o in &s.observations {
                match dim {
                    None => dim = Some(o.shape.dim()),
                    Some(d) if d != o.shape.dim() => {
                        return Err(invalid(format!("subject {}: shapes of mixed dimension", s.id)))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    /// Sum of residual dimensions over all observations.
    pub fn total_residual_dimension(&self) -> f64 {
        self.subjects.iter().flat_map(|s| &s.observations).map(|o| o.shape.residual_dimension()).sum()
    }

    pub fn mean_time(&self) -> f64 {
        let n = self.n_observations();
        self.subjects.iter().flat_map(|s| s.times()).sum::<f64>() / n as f64
    }

    /// Precomputed metric targets, indexed like `subjects[i].observations[j]`.
    pub fn metric_targets(&self, metric: &MetricConfig) -> Result<Vec<Vec<MetricTarget>>> {
        self.subjects
            .iter()
            .map(|s| s.observations.iter().map(|o| MetricTarget::new(&o.shape, metric)).collect())
            .collect()
    }
}
