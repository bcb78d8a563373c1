//! Files, configuration and the end-to-end commands.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod dataset;
pub mod report;
pub mod run;
pub mod verify;
