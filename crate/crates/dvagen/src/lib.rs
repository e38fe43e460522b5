//! Command-line entry points and the HTTP steering service for
//! dynamic-vocabulary generation.

pub mod chat;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod server;
pub mod viz;

pub use config::AppConfig;
pub use error::{AppError, AppResult};
