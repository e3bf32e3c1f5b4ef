//! Pipeline driver: run configuration, artifact store and stages.

pub mod config;
pub mod stages;
pub mod store;

pub use config::RunConfig;
pub use stages::{Pipeline, StageOut};
pub use store::Store;
