//! Learning context-calibrated features from paired feature queries and
//! composing them into downstream rewards, with multi-task preference
//! baselines for comparison.

pub mod env;
pub mod error;
pub mod experiments;
pub mod learning;
pub mod oracle;
pub mod rng;
pub mod tinynet;

pub use env::{EnvKind, EnvironmentSpec, FeatureId, Normalizer, State, StateSet};
pub use error::{Error, Result};
pub use oracle::{GroundTruth, GtCalibratedFn, Label, OracleConfig, RewardWeights, Scenario};
pub use tinynet::{MlpModel, MlpSpec, TrainHyper};
