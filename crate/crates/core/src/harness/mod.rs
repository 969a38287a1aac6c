//! Configuration, file formats, reporting, and experiment commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod report;
