//! Length-prefixed framed messaging for the LATTEO services.
//!
//! Two transports share the same [`Frame`] codec:
//! - [`tcp`]: blocking, one thread per session, for real deployments.
//! - [`loopback`]: in-memory channels with injectable one-way latency, driven by
//!   tokio so benchmarks can run under a paused (virtual) clock.

pub mod frame;
pub mod loopback;
pub mod tcp;

use std::fmt;
use std::time::Duration;

pub use frame::{decode, Decoded, Frame, FrameDecoder, MsgType, MAX_PAYLOAD};

/// Environment variable that overrides a configured listen endpoint.
pub const LISTEN_ENV: &str = "LATTEO_LISTEN";

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("frame payload of {len} bytes exceeds limit {max}")]
    Oversize { len: u64, max: usize },
    #[error("stream truncated mid-frame")]
    Truncated,
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("connection closed by peer")]
    Closed,
    #[error("no endpoint named {0}")]
    NoSuchEndpoint(String),
    #[error("endpoint {0} already bound")]
    AddrInUse(String),
    #[error("bad endpoint {0:?}")]
    BadEndpoint(String),
}

/// Where a service listens: a TCP `host:port` or an in-memory channel name
/// written `mem:<name>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Tcp(String),
    Loopback(String),
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Self, TransportError> {
        let s = s.trim();
        if let Some(name) = s.strip_prefix("mem:") {
            if name.is_empty() {
                return Err(TransportError::BadEndpoint(s.to_string()));
            }
            return Ok(Endpoint::Loopback(name.to_string()));
        }
        match s.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {
                Ok(Endpoint::Tcp(s.to_string()))
            }
            _ => Err(TransportError::BadEndpoint(s.to_string())),
        }
    }

    /// `configured`, unless `LATTEO_LISTEN` is set.
    pub fn listen_from_env(configured: &str) -> Result<Self, TransportError> {
        match std::env::var(LISTEN_ENV) {
            Ok(v) if !v.trim().is_empty() => Endpoint::parse(&v),
            _ => Endpoint::parse(configured),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(a) => f.write_str(a),
            Endpoint::Loopback(n) => write!(f, "mem:{n}"),
        }
    }
}

/// Per-connection metadata handed to handlers.
#[derive(Debug, Clone)]
pub struct SessionInfo {
    pub session_id: u64,
    pub peer: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_parsing() {
        assert_eq!(
            Endpoint::parse("127.0.0.1:9000").unwrap(),
            Endpoint::Tcp("127.0.0.1:9000".into())
        );
        assert_eq!(
            Endpoint::parse("mem:agg").unwrap(),
            Endpoint::Loopback("agg".into())
        );
        assert!(Endpoint::parse("nohost").is_err());
        assert!(Endpoint::parse("mem:").is_err());
        assert!(Endpoint::parse("h:99999").is_err());
        assert_eq!(Endpoint::parse("mem:x").unwrap().to_string(), "mem:x");
    }
}
