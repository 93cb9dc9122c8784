//! Network side: a remote backend client, a mock classification service,
//! and the adversary trace the service can keep.

pub mod adversary;
mod client;
mod error;
pub mod service;

pub use client::{RemoteBackend, RemoteConfig};
pub use error::ServiceError;
pub use service::{serve, Health, ServiceConfig, ServiceHandle};
