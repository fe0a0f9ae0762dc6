//! Library surface of the experiment front-end, exposed so the
//! integration suites can drive the same code paths as the binary.

pub mod commands;
pub mod config;
pub mod output;
pub mod runner;
