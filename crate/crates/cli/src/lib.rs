//! The `eaas` command-line tool: serve the coordinator, run agents, play
//! scripted scenarios and render loss reports.

pub mod report;
pub mod scenario;
