//! Two-zone execution of a partitioned model.
//!
//! The trusted zone ([`TeeSession`]) holds keys and everything that must stay
//! plain; the host zone ([`host`]) holds obfuscated weights and adapters and
//! does the heavy products. They talk in lock step over a [`HostLink`], either
//! in one process or through the framed protocol in [`wire`] to a child
//! process. Every activation hand-off is recorded in a [`ZoneLedger`].

mod audit;
mod envelope;
pub mod host;
mod ledger;
mod link;
mod tee;
pub mod wire;

pub use audit::{audit_host, HostAudit};
pub use envelope::{AuthToken, DataOwner, Envelope};
pub use host::{run_host_process, serve_stream, HostEndpoint, SESSION_TOKEN_ENV};
pub use ledger::{Crossing, Direction, ZoneLedger};
pub use link::{HostLink, InProcessLink, ProcessLink, TransportConfig};
pub use tee::{measure_slowdown, serve_zones, ServeMode, Slowdown, TeeSession};
