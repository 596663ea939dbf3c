//! Files, subprocess environments and the command line around `p4o-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod external;
pub mod metrics;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{CliError, CliResult};
