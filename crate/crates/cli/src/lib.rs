//! Library side of the `twindiff` command-line tool: run configuration,
//! run-directory manifests, and the pipeline commands themselves.

pub mod commands;
pub mod config;
pub mod manifest;

use twindiff_core::error::CoreError;

/// Environment variable consulted for the config path when `--config` is
/// not given.
pub const CONFIG_ENV_VAR: &str = "TWINDIFF_CONFIG";

/// Process exit code for an error: 2 configuration, 3 data/path problems,
/// 4 training divergence, 5 evaluation failures. Success is 0.
pub fn exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Config(_) | CoreError::Argument(_) => 2,
        CoreError::Data(_) | CoreError::Io(_) | CoreError::Shape(_) => 3,
        CoreError::Diverged(_) => 4,
        CoreError::Eval(_) => 5,
    }
}
