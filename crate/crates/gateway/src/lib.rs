//! Command line and HTTP front end for the retrieval engine.

pub mod cli;
pub mod config;
pub mod error;
pub mod server;

pub use config::Config;
pub use error::ApiError;
pub use server::{router, AppState, Snapshot};
