//! HTTP job service over the editing engine.
//!
//! Images are uploaded once, inverted into banks, and banks serve any number
//! of edit jobs. Jobs run on a FIFO worker pool, persist under the storage
//! directory and stream progress as server-sent events.

pub mod api;
pub mod config;
pub mod jobs;
pub mod state;
pub mod store;

pub use api::router;
pub use config::ServiceConfig;
pub use state::AppState;
