//! Networked front end for loopstage sessions: a WebSocket server with one
//! task per session, the participant entry URL, and an admin API.

pub mod actor;
pub mod app;
pub mod config;

pub use app::{router, serve, serve_on, AppState};
pub use config::ServerConfig;
