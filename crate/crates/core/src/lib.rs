//! Cycle-level model of a hybrid accelerator that runs convolutions on an
//! output-stationary systolic array and fully connected layers on analog
//! memristive crossbars, plus the two-step mixed-precision training flow
//! that prepares models for it.

pub mod imac;
pub mod mptrain;
pub mod sched;
pub mod systolic;
pub mod topology;

pub use imac::{CrossbarConfig, TernaryMatrix};
pub use sched::{Mode, SimulationReport};
pub use systolic::SystolicConfig;
pub use topology::{GemmShape, LayerKind, LayerSpec, NetworkTopology};
