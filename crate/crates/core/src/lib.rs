//! Off-policy corrections for asynchronous RL and a deterministic simulator of
//! the rollout/training pipeline they are meant for.

pub mod acquisition;
pub mod error;
pub mod ewma;
pub mod experiment;
pub mod policy;
pub mod proxy;
pub mod ratio;
pub mod sim;

pub use acquisition::{AcquisitionStrategy, CostModel, CostReport, DedicatedModel, SnapshotStore};
pub use error::{Error, Result};
pub use ewma::{EwmaForm, EwmaState};
pub use policy::{
    DiscrepancyModel, PolicyParams, SyntheticTask, TaskConfig, Version, VersionedParams,
};
pub use proxy::EffectiveBounds;
pub use ratio::{DiscrepancyBound, MisConfig, MisOutcome, ProxyForm, TokenSample, Variant};
pub use sim::{run_simulation, run_synchronous, SimConfig, SimOutput, StepMetrics};
