//! In-process CDN stand-in for offline tests and demos: a self-signed CA,
//! a fleet of TLS edges that capture SNI and route on Host, and an
//! append-only request log for asserting what was actually sent.

pub mod cert;
pub mod edge;
pub mod fleet;
pub mod harness;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MockCdnError {
    #[error("certificate generation failed: {0}")]
    Cert(#[from] rcgen::Error),
    #[error("key conversion failed: {0}")]
    Key(String),
    #[error("TLS configuration failed: {0}")]
    Tls(#[from] rustls::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("a certificate needs at least one subject alternative name")]
    EmptySanList,
    #[error("a fleet needs at least one edge")]
    EmptyFleet,
    #[error("a fleet needs at least one origin")]
    NoOrigins,
    #[error("origin host `{0}` is declared twice")]
    DuplicateOrigin(String),
    #[error("no edge certificate covers `{0}`")]
    HostNotCovered(String),
    #[error("enforcing fraction {0} is outside [0, 1]")]
    BadFraction(f64),
    #[error("harness config: {0}")]
    Harness(String),
}

pub use cert::{MintedIdentity, MockCa};
pub use edge::{
    Decision, EdgePolicy, MockOrigin, RejectStyle, RequestLog, RequestLogEntry, Route, RunningEdge,
};
pub use fleet::{effective_policies, san_matches, EdgeSpec, FleetPolicy, FleetSpec, MockFleet};
pub use harness::{load_harness, parse_harness, HarnessConfig};
