//! Configuration, scenario registry, ensemble execution and output files.

pub mod config;
pub mod ensemble;
pub mod output;
pub mod scenarios;
