//! Live session host for the tube navigation engine.
//!
//! [`session::Session`] is the synchronous core: commands are checked on
//! arrival, applied at the next tick boundary, and the log it produces is the
//! batch runner's log. [`app`] paces a session against the wall clock and
//! streams it over a WebSocket at `/session`.

pub mod app;
pub mod protocol;
pub mod session;

pub use app::{router, serve, ServerConfig};
pub use session::{replay, ClientCommand, Command, CommandScript, Session, SessionConfig, Snapshot};
