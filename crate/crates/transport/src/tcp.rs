//! Blocking TCP transport: thread per session, frames processed strictly in
//! order within a session.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};

use crate::frame::{decode_header, Frame, HEADER_LEN, MAX_PAYLOAD};
use crate::{FrameError, SessionInfo, TransportError};

/// Invoked once per inbound frame. Returning `None` drops the connection
/// without a reply.
///
/// Implementations are shared by every session thread and must tolerate
/// concurrent calls.
pub trait Handler: Send + Sync + 'static {
    fn handle(&self, session: &SessionInfo, frame: Frame) -> Option<Frame>;
}

impl<F> Handler for F
where
    F: Fn(&SessionInfo, Frame) -> Option<Frame> + Send + Sync + 'static,
{
    fn handle(&self, session: &SessionInfo, frame: Frame) -> Option<Frame> {
        self(session, frame)
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Sessions served at once; further connections wait in the accept queue.
    pub max_sessions: usize,
    /// Largest payload a session may send; bounds per-session memory.
    pub session_buffer: usize,
    /// Sessions idle for longer than this are closed.
    pub idle_timeout: Option<Duration>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            max_sessions: 1024,
            session_buffer: 16 * 1024 * 1024,
            idle_timeout: Some(Duration::from_secs(60)),
        }
    }
}

struct Slots {
    active: Mutex<usize>,
    freed: Condvar,
}

struct SlotGuard(Arc<Slots>);

impl Drop for SlotGuard {
    fn drop(&mut self) {
        let mut n = self.0.active.lock().unwrap();
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub struct TcpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    slots: Arc<Slots>,
}

impl TcpServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn active_sessions(&self) -> usize {
        *self.slots.active.lock().unwrap()
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock accept().
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

pub fn serve<H: Handler>(addr: &str, handler: H, config: ServerConfig) -> io::Result<TcpServer> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let slots = Arc::new(Slots {
        active: Mutex::new(0),
        freed: Condvar::new(),
    });
    let handler: Arc<dyn Handler> = Arc::new(handler);
    let next_id = AtomicU64::new(1);

    let accept = {
        let stop = stop.clone();
        let slots = slots.clone();
        thread::Builder::new()
            .name(format!("latteo-accept-{}", local.port()))
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let stream = match conn {
                        Ok(s) => s,
                        Err(e) => {
                            warn!("accept failed: {e}");
                            continue;
                        }
                    };
                    {
                        let mut n = slots.active.lock().unwrap();
                        while *n >= config.max_sessions {
                            n = slots.freed.wait(n).unwrap();
                        }
                        *n += 1;
                    }
                    let guard = SlotGuard(slots.clone());
                    let info = SessionInfo {
                        session_id: next_id.fetch_add(1, Ordering::Relaxed),
                        peer: stream
                            .peer_addr()
                            .map(|a| a.to_string())
                            .unwrap_or_default(),
                    };
                    let handler = handler.clone();
                    let config = config.clone();
                    let spawned = thread::Builder::new()
                        .name(format!("latteo-session-{}", info.session_id))
                        .spawn(move || {
                            let _guard = guard;
                            run_session(stream, &info, handler.as_ref(), &config);
                        });
                    if let Err(e) = spawned {
                        warn!("could not spawn session thread: {e}");
                    }
                }
            })?
    };

    Ok(TcpServer {
        addr: local,
        stop,
        accept: Some(accept),
        slots,
    })
}

fn run_session(mut stream: TcpStream, info: &SessionInfo, handler: &dyn Handler, config: &ServerConfig) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(config.idle_timeout);
    loop {
        let frame = match read_frame(&mut stream, config.session_buffer) {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => {
                debug!("session {} closed: {e}", info.session_id);
                if let TransportError::Frame(fe) = &e {
                    let _ = write_frame(&mut stream, &Frame::error(fe.to_string()));
                }
                break;
            }
        };
        let reply = match catch_unwind(AssertUnwindSafe(|| handler.handle(info, frame))) {
            Ok(r) => r,
            Err(_) => {
                warn!("handler panicked in session {}", info.session_id);
                break;
            }
        };
        match reply {
            Some(r) => {
                if let Err(e) = write_frame(&mut stream, &r) {
                    debug!("session {} write failed: {e}", info.session_id);
                    break;
                }
            }
            None => break,
        }
    }
}

/// Reads one frame; `Ok(None)` on clean EOF before any header byte.
pub fn read_frame<R: Read>(r: &mut R, max_payload: usize) -> Result<Option<Frame>, TransportError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(FrameError::Truncated.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (msg_type, len) = decode_header(&header, max_payload.min(MAX_PAYLOAD))?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TransportError::Frame(FrameError::Truncated),
        _ => TransportError::Io(e),
    })?;
    Ok(Some(Frame { msg_type, payload }))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), TransportError> {
    let bytes = frame.encode()?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Client side of one session.
pub struct TcpConnection {
    stream: TcpStream,
    timeout: Duration,
}

impl TcpConnection {
    /// Connects, retrying refused attempts until `timeout` elapses.
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, TransportError> {
        let deadline = Instant::now() + timeout;
        let addrs: Vec<SocketAddr> = addr
            .to_socket_addrs()
            .map_err(|_| TransportError::BadEndpoint(addr.to_string()))?
            .collect();
        if addrs.is_empty() {
            return Err(TransportError::BadEndpoint(addr.to_string()));
        }
        loop {
            for a in &addrs {
                let left = deadline.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    return Err(TransportError::Timeout(timeout));
                }
                if let Ok(stream) = TcpStream::connect_timeout(a, left) {
                    stream.set_nodelay(true)?;
                    stream.set_read_timeout(Some(timeout))?;
                    stream.set_write_timeout(Some(timeout))?;
                    return Ok(TcpConnection { stream, timeout });
                }
            }
            if Instant::now() >= deadline {
                return Err(TransportError::Timeout(timeout));
            }
            thread::sleep(Duration::from_millis(20).min(deadline.saturating_duration_since(Instant::now())));
        }
    }

    pub fn request(&mut self, frame: &Frame) -> Result<Frame, TransportError> {
        write_frame(&mut self.stream, frame).map_err(|e| self.map_timeout(e))?;
        match read_frame(&mut self.stream, MAX_PAYLOAD) {
            Ok(Some(f)) => Ok(f),
            Ok(None) => Err(TransportError::Closed),
            Err(e) => Err(self.map_timeout(e)),
        }
    }

    fn map_timeout(&self, e: TransportError) -> TransportError {
        match e {
            TransportError::Io(io)
                if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) =>
            {
                TransportError::Timeout(self.timeout)
            }
            TransportError::Io(io)
                if matches!(
                    io.kind(),
                    io::ErrorKind::ConnectionReset | io::ErrorKind::BrokenPipe
                ) =>
            {
                TransportError::Closed
            }
            other => other,
        }
    }
}

/// One-shot request on a fresh connection.
pub fn request(addr: &str, frame: &Frame, timeout: Duration) -> Result<Frame, TransportError> {
    TcpConnection::connect(addr, timeout)?.request(frame)
}
