//! Sample-quality metrics, ranking curves and the downstream benchmark.

pub mod bench;
mod curves;
mod features;

pub use curves::*;
pub use features::*;
