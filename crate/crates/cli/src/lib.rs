//! Library side of the `ledit` command-line tool: run configuration, dataset
//! files and the command implementations.

pub mod commands;
pub mod config;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "LEDIT_OUT";

/// Renders an error as a single `error kind=... msg="..."` line.
pub fn error_line(kind: &str, message: &str) -> String {
    let msg = message.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    format!("error kind={kind} msg=\"{msg}\"")
}
