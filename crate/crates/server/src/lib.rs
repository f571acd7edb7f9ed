//! HTTP server, CLI and replica-sync harness over `tokenward-core`.

pub mod cli;
pub mod clock;
pub mod config;
pub mod harness;
pub mod http;
pub mod state;
