//! Scenario files, experiment drivers and output formats for the `sim` CLI.

pub mod billiard;
pub mod cli;
pub mod exec;
pub mod output;
pub mod grad;
pub mod gradcheck;
pub mod scenario;
pub mod sysid;
pub mod task;
pub mod toss;
pub mod toy;
