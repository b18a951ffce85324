//! Pipeline orchestration for the `ldp` binary: configuration and one
//! function per subcommand.

pub mod commands;
pub mod config;

pub use commands::{exit_code, Context, EXIT_CONFIG, EXIT_NO_TARGETS, EXIT_TRAINING};
pub use config::PipelineConfig;
