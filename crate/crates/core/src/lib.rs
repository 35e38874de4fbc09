// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod datagen;
pub mod evaluation;
pub mod integrator;
pub mod liegroup;
pub mod models;
pub mod nn;
pub mod protocol;
pub mod training;

pub use baselines::{constant_velocity_step, KfnsModel};
pub use datagen::{TrajectoryRecord, WorldSpec};
pub use evaluation::MetricsReport;
pub use integrator::{Integrator, IntegratorError, State, VehicleParams};
pub use liegroup::{Mat3, Vec3};
pub use models::{Action, DynamicsModels, Observation, Variant};
pub use protocol::{run_protocol, ProtocolConfig, ProtocolName, ProtocolReport};
pub use training::{train, TrainConfig};
