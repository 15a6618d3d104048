//! Request/response links between parties, with a record of every frame
//! the network saw.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use latteo_transport::tcp::{Handler, TcpConnection};
use latteo_transport::{Frame, SessionInfo, TransportError};

/// One request/response exchange per call. An error means the peer dropped
/// the connection or the network failed.
pub trait Link {
    fn exchange(&mut self, request: Frame) -> Result<Frame, TransportError>;
}

impl Link for TcpConnection {
    fn exchange(&mut self, request: Frame) -> Result<Frame, TransportError> {
        self.request(&request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinkEvent {
    Sent(Frame),
    Received(Frame),
    Dropped,
}

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

/// Calls a handler directly, as if over a fresh connection. After the
/// handler drops the session the link stays closed.
pub struct InProcessLink<H> {
    handler: Arc<H>,
    session: SessionInfo,
    closed: bool,
    log: Arc<Mutex<Vec<LinkEvent>>>,
}

impl<H: Handler> InProcessLink<H> {
    pub fn new(handler: Arc<H>, peer: &str) -> Self {
        InProcessLink {
            handler,
            session: SessionInfo {
                session_id: NEXT_SESSION.fetch_add(1, Ordering::Relaxed),
                peer: peer.to_string(),
            },
            closed: false,
            log: Arc::default(),
        }
    }

    /// Shares a frame log with other links so a test sees one network.
    pub fn with_log(mut self, log: Arc<Mutex<Vec<LinkEvent>>>) -> Self {
        self.log = log;
        self
    }

    pub fn log(&self) -> Arc<Mutex<Vec<LinkEvent>>> {
        self.log.clone()
    }

    pub fn session_id(&self) -> u64 {
        self.session.session_id
    }
}

impl<H: Handler> Link for InProcessLink<H> {
    fn exchange(&mut self, request: Frame) -> Result<Frame, TransportError> {
        if self.closed {
            return Err(TransportError::Closed);
        }
        self.log.lock().unwrap().push(LinkEvent::Sent(request.clone()));
        match self.handler.handle(&self.session, request) {
            Some(reply) => {
                self.log.lock().unwrap().push(LinkEvent::Received(reply.clone()));
                Ok(reply)
            }
            None => {
                self.closed = true;
                self.log.lock().unwrap().push(LinkEvent::Dropped);
                Err(TransportError::Closed)
            }
        }
    }
}
