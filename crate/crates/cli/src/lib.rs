//! Problem files, reports and the `fbsde` command line.

pub mod cli;
pub mod expr;
pub mod problem;
pub mod report;

pub use cli::{run_cli, run_cli_with};
