//! Echo state networks with a sparse readout whose per-neuron thresholds are
//! learned jointly with the output weights.

pub mod data;
pub mod error;
pub mod learning;
pub mod linalg;
pub mod metrics;
pub mod readout;
pub mod reservoir;
pub mod rng;
pub mod scalar;
pub mod tasks;

pub use error::{Error, Result};
pub use learning::{LossKind, LossSpec, OptimizerKind};
pub use readout::{ReadoutPlan, ReadoutSnapshot, SparseReadout};
pub use reservoir::{
    build_hierarchy, build_reservoir, Activation, Encoder, Hierarchy, HierarchyParams, InputDist, Reservoir,
    ReservoirParams, Trajectory,
};
pub use scalar::Scalar;

pub type Reservoir32 = Reservoir<f32>;
pub type Reservoir64 = Reservoir<f64>;
pub type Hierarchy32 = Hierarchy<f32>;
pub type Hierarchy64 = Hierarchy<f64>;
pub type SparseReadout32 = SparseReadout<f32>;
pub type SparseReadout64 = SparseReadout<f64>;
