//! Spatiotemporal distributions of shape trajectories.
//!
//! Shapes are deformed by diffeomorphisms parameterized by control points and momenta.
//! A population-average geodesic of shape change is combined with per-subject time
//! shifts, acceleration factors and space shifts (momenta parallel-transported along
//! the geodesic). Parameters are estimated with MCMC-SAEM and the learned model can be
//! personalized to unseen subjects.

pub mod error;
pub mod estimator;
pub mod geodesic;
pub mod kernel;
pub mod model;
pub mod personalize;
pub mod points;
pub mod shape;
pub mod transport;

pub use error::{Error, Result};
pub use geodesic::{exp_shape, flow_shape, shoot, FlowedShape, GeodesicState, GeodesicTrajectory};
pub use kernel::KernelConfig;
pub use points::{ControlPoints, Momenta, Points};
pub use shape::{MetricConfig, MetricKind, Shape};
pub use estimator::{run_estimation, EstimationOutput, EstimatorConfig, TraceRow};
pub use model::{
    IndividualLatents, LatentState, LongitudinalDataset, ModelConfig, ModelParams, Observation, PopulationLatents,
    PriorConfig, Subject,
};
pub use personalize::{batch_personalize, personalize, PersonalizationResult, PersonalizeConfig};
pub use transport::{exp_parallel, parallel_transport, TransportOptions};
