//! Zwanzig-Mori reduction of partitioned ODE networks.

pub mod analysis;
pub mod channels;
pub mod dsl;
pub mod error;
pub mod linalg;
pub mod memory;
pub mod ode;
pub mod qss;
pub mod system;
pub mod variants;
pub mod zoo;

pub use error::{Error, Result};
pub use system::{Model, Partition, SystemSpec};
