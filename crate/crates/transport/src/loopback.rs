//! In-memory transport with injectable one-way latency.
//!
//! Frames still go through the byte codec so framing bugs surface here too.
//! Everything runs on tokio; under `tokio::time::pause` the latency is virtual
//! and a current-thread runtime gives reproducible schedules.

use std::collections::HashMap;
use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use crate::frame::{decode_with_limit, Decoded, Frame, MAX_PAYLOAD};
use crate::{FrameError, SessionInfo, TransportError};

pub type BoxFuture<T> = Pin<Box<dyn Future<Output = T> + Send>>;

/// Async counterpart of [`crate::tcp::Handler`]; `None` drops the session.
pub trait AsyncHandler: Send + Sync + 'static {
    fn handle(&self, session: SessionInfo, frame: Frame) -> BoxFuture<Option<Frame>>;
}

impl<F, Fut> AsyncHandler for F
where
    F: Fn(SessionInfo, Frame) -> Fut + Send + Sync + 'static,
    Fut: Future<Output = Option<Frame>> + Send + 'static,
{
    fn handle(&self, session: SessionInfo, frame: Frame) -> BoxFuture<Option<Frame>> {
        Box::pin(self(session, frame))
    }
}

struct Exchange {
    bytes: Vec<u8>,
    reply: oneshot::Sender<Vec<u8>>,
}

struct SessionRequest {
    info: SessionInfo,
    rx: mpsc::Receiver<Exchange>,
}

type Registry = Arc<Mutex<HashMap<String, mpsc::UnboundedSender<SessionRequest>>>>;

/// A namespace of in-memory endpoints.
#[derive(Clone, Default)]
pub struct LoopbackNet {
    endpoints: Registry,
    next_session: Arc<AtomicU64>,
}

impl LoopbackNet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds `name`. Must be called from within a tokio runtime.
    pub fn serve<H: AsyncHandler>(
        &self,
        name: &str,
        handler: H,
        session_buffer: usize,
    ) -> Result<LoopbackServer, TransportError> {
        let (tx, mut rx) = mpsc::unbounded_channel::<SessionRequest>();
        {
            let mut eps = self.endpoints.lock().unwrap();
            if eps.contains_key(name) {
                return Err(TransportError::AddrInUse(format!("mem:{name}")));
            }
            eps.insert(name.to_string(), tx);
        }
        let handler: Arc<dyn AsyncHandler> = Arc::new(handler);
        let limit = session_buffer.min(MAX_PAYLOAD);
        let acceptor = tokio::spawn(async move {
            while let Some(req) = rx.recv().await {
                let handler = handler.clone();
                tokio::spawn(run_session(req, handler, limit));
            }
        });
        Ok(LoopbackServer {
            name: name.to_string(),
            endpoints: self.endpoints.clone(),
            acceptor,
        })
    }

    pub fn connect(&self, name: &str, latency: Duration) -> Result<LoopbackConn, TransportError> {
        let eps = self.endpoints.lock().unwrap();
        let acceptor = eps
            .get(name)
            .ok_or_else(|| TransportError::NoSuchEndpoint(format!("mem:{name}")))?;
        let (tx, rx) = mpsc::channel(1);
        let info = SessionInfo {
            session_id: self.next_session.fetch_add(1, Ordering::Relaxed) + 1,
            peer: format!("mem-client-{}", self.next_session.load(Ordering::Relaxed)),
        };
        acceptor
            .send(SessionRequest { info, rx })
            .map_err(|_| TransportError::NoSuchEndpoint(format!("mem:{name}")))?;
        Ok(LoopbackConn { tx, latency })
    }
}

async fn run_session(mut req: SessionRequest, handler: Arc<dyn AsyncHandler>, limit: usize) {
    while let Some(ex) = req.rx.recv().await {
        let frame = match decode_with_limit(&ex.bytes, limit) {
            Ok(Decoded::Frame { frame, .. }) => frame,
            Ok(Decoded::NeedMore(_)) => {
                let _ = ex.reply.send(encode_or_empty(&Frame::error(FrameError::Truncated.to_string())));
                return;
            }
            Err(e) => {
                let _ = ex.reply.send(encode_or_empty(&Frame::error(e.to_string())));
                return;
            }
        };
        match handler.handle(req.info.clone(), frame).await {
            Some(reply) => {
                if ex.reply.send(encode_or_empty(&reply)).is_err() {
                    return;
                }
            }
            None => return,
        }
    }
}

fn encode_or_empty(f: &Frame) -> Vec<u8> {
    f.encode().unwrap_or_default()
}

pub struct LoopbackServer {
    name: String,
    endpoints: Registry,
    acceptor: JoinHandle<()>,
}

impl LoopbackServer {
    pub fn name(&self) -> &str {
        &self.name
    }
}

impl Drop for LoopbackServer {
    fn drop(&mut self) {
        self.endpoints.lock().unwrap().remove(&self.name);
        self.acceptor.abort();
    }
}

pub struct LoopbackConn {
    tx: mpsc::Sender<Exchange>,
    latency: Duration,
}

impl LoopbackConn {
    pub async fn request(&mut self, frame: &Frame) -> Result<Frame, TransportError> {
        let bytes = frame.encode()?;
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        let (reply_tx, reply_rx) = oneshot::channel();
        self.tx
            .send(Exchange {
                bytes,
                reply: reply_tx,
            })
            .await
            .map_err(|_| TransportError::Closed)?;
        let reply = reply_rx.await.map_err(|_| TransportError::Closed)?;
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        match decode_with_limit(&reply, MAX_PAYLOAD)? {
            Decoded::Frame { frame, .. } => Ok(frame),
            Decoded::NeedMore(_) => Err(TransportError::Closed),
        }
    }

    pub async fn request_timeout(
        &mut self,
        frame: &Frame,
        timeout: Duration,
    ) -> Result<Frame, TransportError> {
        tokio::time::timeout(timeout, self.request(frame))
            .await
            .map_err(|_| TransportError::Timeout(timeout))?
    }
}
