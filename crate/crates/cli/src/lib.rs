//! Library side of the `corrtrack` binary: run configuration, on-disk
//! formats and the command implementations.

pub mod commands;
pub mod config;
pub mod evalset;
pub mod io;
