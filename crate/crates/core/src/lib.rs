//! Core logic for a distributed virtual-agent branch: proximity-triggered
//! session setup, physically placed agent stations, queue orchestration with
//! least-privilege role switching, a stateless inference gateway, a hash-chained
//! audit log and a deterministic discrete-event simulation of the whole flow.
//!
//! Everything in this crate is synchronous and free of I/O except the remote
//! inference backend and the file helpers in [`audit::persist`] and [`config`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod api;
pub mod audit;
pub mod branch;
pub mod canonical;
pub mod config;
pub mod dialog;
pub mod inference;
pub mod profile;
pub mod protocol;
pub mod ranging;
pub mod sim;
pub mod station;

/// Milliseconds since the Unix epoch (or since simulation start in the harness).
pub type Millis = u64;
