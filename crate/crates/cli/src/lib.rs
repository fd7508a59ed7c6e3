//! Library side of the `mfd` binary, so the commands can be driven from
//! tests without spawning processes.

pub mod commands;
pub mod config;
pub mod lock;

pub use commands::{cmd_eval, cmd_stats, cmd_synth, cmd_train, cmd_verify};
pub use config::RunConfig;
pub use lock::OutputLock;
