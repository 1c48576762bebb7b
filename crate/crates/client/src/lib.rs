//! Thin async client for the branch service.
//!
//! [`BranchClient`] wraps the HTTP/JSON operations, [`Connection`] speaks the
//! envelope protocol over `/ws`, and [`StationAgent`] keeps one station's
//! link alive by streaming observations and frames from a world model.

mod agent;
mod conn;
mod error;
mod http;

pub use agent::{AgentTask, StationAgent, World};
pub use conn::Connection;
pub use error::ClientError;
pub use http::BranchClient;

/// `http://host:port[/]` → `ws://host:port/ws`.
pub fn ws_url(base: &str) -> String {
    let base = base.trim_end_matches('/');
    let rest = base
        .strip_prefix("https://")
        .map(|r| format!("wss://{r}"))
        .or_else(|| base.strip_prefix("http://").map(|r| format!("ws://{r}")))
        .unwrap_or_else(|| base.to_owned());
    format!("{rest}/ws")
}
