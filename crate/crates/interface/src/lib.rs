//! Command line and HTTP plumbing around the `dpguard` defense.

pub mod batch;
pub mod calibrate;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod server;

pub use batch::{run_defend, BatchError, BatchSummary};
pub use config::{AppConfig, Cli, Command, ConfigError, Format};
pub use server::{router, AppState};
