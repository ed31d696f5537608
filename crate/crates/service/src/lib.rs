//! HTTP service and command line for the storyloom engine.
//!
//! [`api`] exposes runs to the review UI, [`wire`] serves a backend suite
//! over the model-service wire contract, and [`cli`] is the `storyloom`
//! binary.

pub mod api;
pub mod cli;
pub mod runs;
pub mod wire;
