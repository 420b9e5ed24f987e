pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod defenses;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod lid;
pub mod manifold;
pub mod metrics;
pub mod model;
pub mod seeds;

pub use error::{Error, Result};
