//! Pipeline orchestration behind the `hbiuq` binary.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod report;
pub mod svg;

pub use artifacts::{Layout, Manifest};
pub use commands::Context;
pub use config::RunConfig;

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "HBIUQ_OUT_DIR";

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VALIDATION: i32 = 1;
    pub const NUMERICAL: i32 = 2;
    pub const USAGE: i32 = 64;
}

/// Exit code for an error: numerical failures give 2, everything else 1.
pub fn exit_code(e: &hbiuq::Error) -> i32 {
    if e.is_numerical() {
        exit::NUMERICAL
    } else {
        exit::VALIDATION
    }
}
