//! File formats, CLI verbs and the review HTTP API around `cqa-core`.

pub mod bundle;
pub mod config;
pub mod error;
pub mod events;
pub mod features;
pub mod pipeline;
pub mod server;

pub use error::{Result, ServiceError};
