//! Command-line tools and the local HTTP/WebSocket service.

pub mod bundle;
pub mod cli;
pub mod error;
pub mod server;
pub mod session;
pub mod stream;

pub use error::ServiceError;
