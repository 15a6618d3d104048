//! Registration latency under a swarm of concurrent clients.
//!
//! `dca` registers with one request/response: the reply can only be opened
//! if the aggregator enclave decrypted the request, which attests it. The
//! `ratls_sim` baseline is a model of RA-TLS, not a TLS stack: three
//! handshake round trips (hello, quote challenge, finish) and a quote
//! verification on the client precede the same application request.
//!
//! On the loopback transport the run uses a paused tokio clock. Injected
//! latency, quote verification and enclave calls are charged as virtual
//! time from fixed costs, so a seed and a set of costs give identical
//! numbers on every machine. The TCP transport measures wall-clock time on
//! real sockets.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::sync::{mpsc as std_mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use latteo_core::agg::client::open_response;
use latteo_core::agg::{AggregatorHost, Client, PendingRequest};
use latteo_core::deploy::Deployment;
use latteo_core::enclave::{verify_quote, AttestPrim, Platform, Quote};
use latteo_core::envelope::SigningKey;
use latteo_core::mesh::{Provider, ProviderConfig};
use latteo_learn::data::SIDE;
use latteo_learn::mlp::{param_count, DEFAULT_HIDDEN};
use latteo_transport::loopback::LoopbackNet;
use latteo_transport::tcp::{self, ServerConfig, TcpConnection};
use latteo_transport::{Frame, MsgType, SessionInfo, TransportError, MAX_PAYLOAD};
use rand::rngs::OsRng;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tokio::sync::{mpsc, Semaphore};

use crate::sampler::{summarize, ResourceSampler, Sample};

const HELLO: &[u8] = b"ratls-sim hello";
const FINISHED: &[u8] = b"ratls-sim finished";
const ENDPOINT: &str = "aggregator";
/// A registration that times out this many times aborts the run.
pub const MAX_ATTEMPTS: usize = 50;
/// Virtual time runs this many times slower than reported time: tokio's
/// timer has millisecond granularity and enclave costs are microseconds.
const TIME_SCALE: u32 = 1000;
/// Repetitions per measured cost.
const CALIBRATION_REPS: u32 = 16;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("bad bench configuration: {0}")]
    Config(String),
    #[error("aggregator unreachable at {addr}: {reason}")]
    Unreachable { addr: String, reason: String },
    #[error("stack setup failed: {0}")]
    Setup(String),
    #[error("registration failed: {0}")]
    Protocol(String),
    #[error("a client timed out {0} times in a row")]
    GaveUp(usize),
    #[error("registrations took different round-trip counts: {0:?}")]
    UnstableRoundTrips(BTreeSet<u32>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Dca,
    RatlsSim,
}

impl Scheme {
    pub const ALL: [Scheme; 2] = [Scheme::Dca, Scheme::RatlsSim];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dca" => Some(Scheme::Dca),
            "ratls_sim" => Some(Scheme::RatlsSim),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Dca => "dca",
            Scheme::RatlsSim => "ratls_sim",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Loopback,
    Tcp,
}

impl TransportKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "loopback" => Some(TransportKind::Loopback),
            "tcp" => Some(TransportKind::Tcp),
            _ => None,
        }
    }
}

/// Per-operation costs. `None` fields are measured on the fresh stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CostOverrides {
    pub verify: Option<Duration>,
    pub request: Option<Duration>,
    pub quote: Option<Duration>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Costs {
    /// Client-side quote verification in the baseline.
    pub verify: Duration,
    /// Enclave time for one application request.
    pub request: Duration,
    /// Enclave time to produce one quote.
    pub quote: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub n_clients: usize,
    pub scheme: Scheme,
    pub transport: TransportKind,
    /// One-way delay on every message.
    pub latency: Duration,
    /// Budget for one registration attempt, including the wait for a
    /// connection slot.
    pub timeout: Duration,
    pub seed: u64,
    pub registrations_per_client: usize,
    /// Sessions the aggregator serves at once.
    pub connection_budget: usize,
    pub costs: CostOverrides,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_clients: 2,
            scheme: Scheme::Dca,
            transport: TransportKind::Loopback,
            latency: Duration::from_millis(5),
            timeout: Duration::from_secs(5),
            seed: 0,
            registrations_per_client: 2,
            connection_budget: 256,
            costs: CostOverrides::default(),
        }
    }
}

impl BenchConfig {
    fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.n_clients == 0 {
            return bad("n_clients must be at least 1");
        }
        if self.timeout.is_zero() {
            return bad("timeout must be positive");
        }
        if self.connection_budget == 0 {
            return bad("connection budget must be at least 1");
        }
        if self.registrations_per_client == 0 {
            return bad("registrations per client must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n_clients: usize,
    pub scheme: Scheme,
    pub mean_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub timeouts: usize,
    pub handshake_round_trips: u32,
    pub server_cpu_pct: f64,
    pub peak_mem_mb: f64,
}

pub const BENCH_HEADER: [&str; 8] = [
    "n_clients",
    "scheme",
    "mean_latency_ms",
    "p95_latency_ms",
    "timeouts",
    "handshake_round_trips",
    "server_cpu_pct",
    "peak_mem_mb",
];

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub row: BenchRow,
    pub costs: Costs,
    pub samples: Vec<Sample>,
    /// Per registration, retries included, in milliseconds.
    pub latencies_ms: Vec<f64>,
}

/// Runs one configuration against a freshly started stack.
pub fn bench_run(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    let stack = Stack::start(cfg.seed)?;
    let measured = match cfg.costs {
        CostOverrides { verify: Some(v), request: Some(r), quote: Some(q) } => Costs { verify: v, request: r, quote: q },
        _ => stack.measure_costs()?,
    };
    let costs = Costs {
        verify: cfg.costs.verify.unwrap_or(measured.verify),
        request: cfg.costs.request.unwrap_or(measured.request),
        quote: cfg.costs.quote.unwrap_or(measured.quote),
    };
    let sampler = ResourceSampler::start(Duration::from_secs(1));
    let outcome = match cfg.transport {
        TransportKind::Loopback => run_loopback(cfg, &stack, costs),
        TransportKind::Tcp => run_tcp(cfg, &stack, costs),
    };
    let samples = sampler.stop();
    let outcome = outcome?;
    let (server_cpu_pct, peak_mem_mb) = summarize(&samples);
    let round_trips = match outcome.round_trips.len() {
        1 => *outcome.round_trips.iter().next().unwrap(),
        _ => return Err(BenchError::UnstableRoundTrips(outcome.round_trips)),
    };
    let row = BenchRow {
        n_clients: cfg.n_clients,
        scheme: cfg.scheme,
        mean_latency_ms: mean(&outcome.latencies_ms),
        p95_latency_ms: p95(&outcome.latencies_ms),
        timeouts: outcome.timeouts,
        handshake_round_trips: round_trips,
        server_cpu_pct,
        peak_mem_mb,
    };
    Ok(BenchReport { row, costs, samples, latencies_ms: outcome.latencies_ms })
}

/// Every `(n, scheme)` pair in order, each on its own stack.
pub fn bench_sweep(base: &BenchConfig, n_clients: &[usize], schemes: &[Scheme]) -> Result<Vec<BenchRow>, BenchError> {
    let mut rows = Vec::new();
    for &n in n_clients {
        for &scheme in schemes {
            rows.push(bench_run(&BenchConfig { n_clients: n, scheme, ..base.clone() })?.row);
        }
    }
    Ok(rows)
}

pub fn emit_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(BENCH_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Nearest-rank 95th percentile.
fn p95(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = (0.95 * s.len() as f64).ceil() as usize;
    s[rank.max(1) - 1]
}

/// Provider, coordinator and one aggregator on a platform derived from the
/// seed.
struct Stack {
    provider: Arc<Provider>,
    agg: AggregatorHost,
    prim: AttestPrim,
    // Keeps the onboarding state alive for the run.
    _deployment: Deployment,
}

impl Stack {
    fn start(seed: u64) -> Result<Self, BenchError> {
        let secret: [u8; 32] = ChaCha8Rng::seed_from_u64(seed).gen();
        let dim = param_count(SIDE * SIDE, DEFAULT_HIDDEN, 2);
        let config = ProviderConfig::simple([0; 32], 4, vec![0.0; dim]);
        let d = Deployment::start(Platform::from_secret(secret), config, &["agg-1"])
            .map_err(|e| BenchError::Setup(e.to_string()))?;
        let prim = d
            .provider
            .attest_prim()
            .narrowed(d.provider.aggregator_measurement())
            .ok_or_else(|| BenchError::Setup("aggregator measurement missing from attestation inputs".into()))?;
        Ok(Stack { provider: d.provider.clone(), agg: d.aggregators[0].clone(), prim, _deployment: d })
    }

    fn measure_costs(&self) -> Result<Costs, BenchError> {
        let client = enroll(&self.provider, "calibration")?;
        let reqs = (0..CALIBRATION_REPS)
            .map(|_| client.build_request(None).map(|(r, _)| r.to_bytes()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| BenchError::Setup(e.to_string()))?;
        let t = Instant::now();
        for r in &reqs {
            self.agg.submit(r).map_err(|e| BenchError::Setup(e.to_string()))?;
        }
        let request = t.elapsed() / CALIBRATION_REPS;

        let nonce = [9u8; 32];
        let t = Instant::now();
        let mut quote = None;
        for _ in 0..CALIBRATION_REPS {
            quote = Some(self.agg.attest(nonce).map_err(|e| BenchError::Setup(e.to_string()))?);
        }
        let quote_cost = t.elapsed() / CALIBRATION_REPS;
        let q = quote.expect("at least one repetition");

        let t = Instant::now();
        for _ in 0..CALIBRATION_REPS {
            if !verify_quote(&self.prim, &q, &nonce) {
                return Err(BenchError::Setup("own aggregator quote failed verification".into()));
            }
        }
        Ok(Costs { verify: t.elapsed() / CALIBRATION_REPS, request, quote: quote_cost })
    }
}

fn enroll(provider: &Provider, identity: &str) -> Result<Client, BenchError> {
    let sk = SigningKey::generate();
    let reg = provider.register_user(identity, &sk.verifying_key());
    Client::enroll(sk, &reg, &provider.verifying_key()).map_err(|e| BenchError::Setup(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Handshake {
    Hello,
    Quoted,
    Finished,
}

/// The aggregator's front end for both schemes. A session that never
/// starts a handshake is served as `dca`; one that does must finish it
/// before its application request.
struct AggEndpoint {
    agg: AggregatorHost,
    handshakes: Mutex<HashMap<u64, Handshake>>,
}

impl AggEndpoint {
    fn new(agg: AggregatorHost) -> Self {
        AggEndpoint { agg, handshakes: Mutex::new(HashMap::new()) }
    }

    fn handle(&self, session: u64, frame: Frame) -> Option<Frame> {
        let state = self.handshakes.lock().unwrap().get(&session).copied();
        let (next, reply) = match (frame.msg_type, state) {
            (MsgType::AttestChallenge, None) if frame.payload == HELLO => {
                let mut server_random = [0u8; 32];
                OsRng.fill_bytes(&mut server_random);
                (Some(Handshake::Hello), Some(Frame::new(MsgType::AttestChallenge, server_random.to_vec())))
            }
            (MsgType::AttestChallenge, Some(Handshake::Hello)) => {
                let quote = <[u8; 32]>::try_from(frame.payload.as_slice()).ok().and_then(|n| self.agg.attest(n).ok());
                (Some(Handshake::Quoted), quote.map(|q| Frame::new(MsgType::AttestQuote, q.to_bytes())))
            }
            (MsgType::KeyDelivery, Some(Handshake::Quoted)) if frame.payload == FINISHED => {
                (Some(Handshake::Finished), Some(Frame::new(MsgType::KeyDelivery, FINISHED.to_vec())))
            }
            (MsgType::UserRequest, None | Some(Handshake::Finished)) => (None, self.agg.submit(&frame.payload).ok().flatten()),
            _ => (None, None),
        };
        let mut hs = self.handshakes.lock().unwrap();
        match (next, &reply) {
            (Some(n), Some(_)) => hs.insert(session, n),
            _ => hs.remove(&session),
        };
        reply
    }

    /// Enclave time a frame costs on the loopback clock.
    fn enclave_cost(frame: &Frame, costs: &Costs) -> Option<Duration> {
        match frame.msg_type {
            MsgType::UserRequest => Some(costs.request),
            MsgType::AttestChallenge if frame.payload != HELLO => Some(costs.quote),
            _ => None,
        }
    }
}

enum Stage {
    Hello,
    Challenge([u8; 32]),
    Finish,
    Request(PendingRequest),
}

enum Next {
    Send(Frame),
    /// Send after charging the verification cost.
    SendVerified(Frame),
    Registered,
}

/// Client side of one registration, independent of the transport.
struct Registration<'a> {
    client: &'a Client,
    prim: &'a AttestPrim,
    stage: Stage,
}

impl<'a> Registration<'a> {
    fn start(scheme: Scheme, client: &'a Client, prim: &'a AttestPrim) -> Result<(Self, Frame), String> {
        let (stage, frame) = match scheme {
            Scheme::Dca => request(client)?,
            Scheme::RatlsSim => (Stage::Hello, Frame::new(MsgType::AttestChallenge, HELLO.to_vec())),
        };
        Ok((Registration { client, prim, stage }, frame))
    }

    fn on_reply(&mut self, reply: Frame) -> Result<Next, String> {
        match (&self.stage, reply.msg_type) {
            (Stage::Hello, MsgType::AttestChallenge) => {
                let mut nonce = [0u8; 32];
                OsRng.fill_bytes(&mut nonce);
                self.stage = Stage::Challenge(nonce);
                Ok(Next::Send(Frame::new(MsgType::AttestChallenge, nonce.to_vec())))
            }
            (Stage::Challenge(nonce), MsgType::AttestQuote) => {
                let q = Quote::from_bytes(&reply.payload).map_err(|e| e.to_string())?;
                if !verify_quote(self.prim, &q, nonce) {
                    return Err("aggregator quote rejected".into());
                }
                self.stage = Stage::Finish;
                Ok(Next::SendVerified(Frame::new(MsgType::KeyDelivery, FINISHED.to_vec())))
            }
            (Stage::Finish, MsgType::KeyDelivery) => {
                let (stage, frame) = request(self.client)?;
                self.stage = stage;
                Ok(Next::Send(frame))
            }
            (Stage::Request(p), MsgType::IdAssign | MsgType::ServerResponse) => {
                open_response(p, &reply.payload).map_err(|e| format!("implicit attestation failed: {e}"))?;
                Ok(Next::Registered)
            }
            (_, t) => Err(format!("unexpected {t} reply")),
        }
    }
}

fn request(client: &Client) -> Result<(Stage, Frame), String> {
    let (req, pending) = client.build_request(None).map_err(|e| e.to_string())?;
    Ok((Stage::Request(pending), Frame::new(MsgType::UserRequest, req.to_bytes())))
}

enum AttemptError {
    TimedOut,
    Failed(BenchError),
}

impl From<String> for AttemptError {
    fn from(e: String) -> Self {
        AttemptError::Failed(BenchError::Protocol(e))
    }
}

#[derive(Debug, Default)]
struct Outcome {
    latencies_ms: Vec<f64>,
    timeouts: usize,
    round_trips: BTreeSet<u32>,
}

/// One completed registration.
struct Done {
    latency: Duration,
    timeouts: usize,
    round_trips: u32,
}

impl Outcome {
    fn absorb(&mut self, d: Done) {
        self.latencies_ms.push(d.latency.as_secs_f64() * 1e3);
        self.timeouts += d.timeouts;
        self.round_trips.insert(d.round_trips);
    }
}

struct LoopCtx {
    cfg: BenchConfig,
    costs: Costs,
    net: LoopbackNet,
    slots: Arc<Semaphore>,
    provider: Arc<Provider>,
    prim: AttestPrim,
}

fn run_loopback(cfg: &BenchConfig, stack: &Stack, costs: Costs) -> Result<Outcome, BenchError> {
    let costs = Costs { verify: costs.verify * TIME_SCALE, request: costs.request * TIME_SCALE, quote: costs.quote * TIME_SCALE };
    let cfg = &BenchConfig { latency: cfg.latency * TIME_SCALE, timeout: cfg.timeout * TIME_SCALE, ..cfg.clone() };
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_time()
        .start_paused(true)
        .build()?;
    rt.block_on(async {
        let net = LoopbackNet::new();
        let endpoint = Arc::new(AggEndpoint::new(stack.agg.clone()));
        // One enclave: its calls are served one at a time.
        let enclave = Arc::new(tokio::sync::Mutex::new(()));
        let _server = net
            .serve(
                ENDPOINT,
                move |info: SessionInfo, frame: Frame| {
                    let (endpoint, enclave) = (endpoint.clone(), enclave.clone());
                    async move {
                        match AggEndpoint::enclave_cost(&frame, &costs) {
                            Some(cost) => {
                                let _busy = enclave.lock().await;
                                tokio::time::sleep(cost).await;
                                endpoint.handle(info.session_id, frame)
                            }
                            None => endpoint.handle(info.session_id, frame),
                        }
                    }
                },
                MAX_PAYLOAD,
            )
            .map_err(|e| BenchError::Setup(e.to_string()))?;
        let ctx = Arc::new(LoopCtx {
            cfg: cfg.clone(),
            costs,
            net,
            slots: Arc::new(Semaphore::new(cfg.connection_budget)),
            provider: stack.provider.clone(),
            prim: stack.prim.clone(),
        });
        let (tx, mut rx) = mpsc::unbounded_channel();
        for slot in 0..cfg.n_clients {
            let (ctx, tx) = (ctx.clone(), tx.clone());
            tokio::spawn(async move {
                for round in 0..ctx.cfg.registrations_per_client {
                    let r = loopback_registration(&ctx, &format!("client-{slot}-{round}")).await;
                    let failed = r.is_err();
                    if tx.send(r).is_err() || failed {
                        return;
                    }
                }
            });
        }
        drop(tx);
        let mut out = Outcome::default();
        while let Some(r) = rx.recv().await {
            out.absorb(r?);
        }
        Ok(out)
    })
}

async fn loopback_registration(ctx: &LoopCtx, identity: &str) -> Result<Done, BenchError> {
    let client = enroll(&ctx.provider, identity)?;
    let start = tokio::time::Instant::now();
    let mut timeouts = 0;
    loop {
        match loopback_attempt(ctx, &client).await {
            Ok(round_trips) => return Ok(Done { latency: start.elapsed() / TIME_SCALE, timeouts, round_trips }),
            Err(AttemptError::TimedOut) => {
                timeouts += 1;
                if timeouts >= MAX_ATTEMPTS {
                    return Err(BenchError::GaveUp(timeouts));
                }
            }
            Err(AttemptError::Failed(e)) => return Err(e),
        }
    }
}

async fn loopback_attempt(ctx: &LoopCtx, client: &Client) -> Result<u32, AttemptError> {
    use tokio::time::{sleep, timeout_at, Instant};
    let deadline = Instant::now() + ctx.cfg.timeout;
    let _slot = match timeout_at(deadline, ctx.slots.clone().acquire_owned()).await {
        Ok(permit) => permit.expect("slot semaphore is never closed"),
        Err(_) => return Err(AttemptError::TimedOut),
    };
    let mut conn = ctx.net.connect(ENDPOINT, ctx.cfg.latency).map_err(|e| {
        AttemptError::Failed(BenchError::Unreachable { addr: format!("mem:{ENDPOINT}"), reason: e.to_string() })
    })?;
    let (mut reg, mut frame) = Registration::start(ctx.cfg.scheme, client, &ctx.prim)?;
    let mut round_trips = 0;
    loop {
        let reply = match timeout_at(deadline, conn.request(&frame)).await {
            Err(_) => return Err(AttemptError::TimedOut),
            Ok(r) => r.map_err(|e| AttemptError::Failed(BenchError::Protocol(e.to_string())))?,
        };
        round_trips += 1;
        frame = match reg.on_reply(reply)? {
            Next::Send(f) => f,
            Next::SendVerified(f) => {
                if timeout_at(deadline, sleep(ctx.costs.verify)).await.is_err() {
                    return Err(AttemptError::TimedOut);
                }
                f
            }
            Next::Registered => return Ok(round_trips),
        };
    }
}

fn run_tcp(cfg: &BenchConfig, stack: &Stack, costs: Costs) -> Result<Outcome, BenchError> {
    let endpoint = Arc::new(AggEndpoint::new(stack.agg.clone()));
    let server = tcp::serve(
        "127.0.0.1:0",
        move |s: &SessionInfo, f: Frame| endpoint.handle(s.session_id, f),
        ServerConfig { max_sessions: cfg.connection_budget, idle_timeout: Some(cfg.timeout), ..ServerConfig::default() },
    )?;
    let addr = server.local_addr().to_string();
    let out = tcp_swarm(cfg, &addr, stack, costs);
    server.shutdown();
    out
}

/// Fails fast when nothing listens at `addr`.
pub fn probe_tcp(addr: &str, timeout: Duration) -> Result<(), BenchError> {
    TcpConnection::connect(addr, timeout)
        .map(drop)
        .map_err(|e| BenchError::Unreachable { addr: addr.to_string(), reason: e.to_string() })
}

fn tcp_swarm(cfg: &BenchConfig, addr: &str, stack: &Stack, costs: Costs) -> Result<Outcome, BenchError> {
    probe_tcp(addr, cfg.timeout)?;
    let (tx, rx) = std_mpsc::channel();
    thread::scope(|s| {
        for slot in 0..cfg.n_clients {
            let tx = tx.clone();
            s.spawn(move || {
                for round in 0..cfg.registrations_per_client {
                    let r = tcp_registration(cfg, addr, stack, costs, &format!("client-{slot}-{round}"));
                    let failed = r.is_err();
                    if tx.send(r).is_err() || failed {
                        return;
                    }
                }
            });
        }
        drop(tx);
        let mut out = Outcome::default();
        for r in rx {
            out.absorb(r?);
        }
        Ok(out)
    })
}

fn tcp_registration(cfg: &BenchConfig, addr: &str, stack: &Stack, costs: Costs, identity: &str) -> Result<Done, BenchError> {
    let client = enroll(&stack.provider, identity)?;
    let start = Instant::now();
    let mut timeouts = 0;
    loop {
        match tcp_attempt(cfg, addr, &client, &stack.prim, costs) {
            Ok(round_trips) => return Ok(Done { latency: start.elapsed(), timeouts, round_trips }),
            Err(AttemptError::TimedOut) => {
                timeouts += 1;
                if timeouts >= MAX_ATTEMPTS {
                    return Err(BenchError::GaveUp(timeouts));
                }
            }
            Err(AttemptError::Failed(e)) => return Err(e),
        }
    }
}

fn tcp_attempt(cfg: &BenchConfig, addr: &str, client: &Client, prim: &AttestPrim, costs: Costs) -> Result<u32, AttemptError> {
    let deadline = Instant::now() + cfg.timeout;
    let transport = |e: TransportError| match e {
        TransportError::Timeout(_) => AttemptError::TimedOut,
        e => AttemptError::Failed(BenchError::Protocol(e.to_string())),
    };
    let mut conn = TcpConnection::connect(addr, cfg.timeout).map_err(transport)?;
    let (mut reg, mut frame) = Registration::start(cfg.scheme, client, prim)?;
    let mut round_trips = 0;
    loop {
        thread::sleep(cfg.latency);
        let reply = conn.request(&frame).map_err(transport)?;
        thread::sleep(cfg.latency);
        round_trips += 1;
        let t = Instant::now();
        let next = reg.on_reply(reply)?;
        if let Next::SendVerified(_) = next {
            // The real verification ran inside `on_reply`; pad it to the configured cost.
            thread::sleep(costs.verify.saturating_sub(t.elapsed()));
        }
        if Instant::now() > deadline {
            return Err(AttemptError::TimedOut);
        }
        frame = match next {
            Next::Send(f) | Next::SendVerified(f) => f,
            Next::Registered => return Ok(round_trips),
        };
    }
}

/// Mean CPU of a started stack with a listening aggregator and no clients.
pub fn idle_cpu_pct(seed: u64, duration: Duration) -> Result<f64, BenchError> {
    let stack = Stack::start(seed)?;
    let endpoint = Arc::new(AggEndpoint::new(stack.agg.clone()));
    let server = tcp::serve(
        "127.0.0.1:0",
        move |s: &SessionInfo, f: Frame| endpoint.handle(s.session_id, f),
        ServerConfig::default(),
    )?;
    let sampler = ResourceSampler::start(Duration::from_secs(1));
    thread::sleep(duration);
    let (cpu, _) = summarize(&sampler.stop());
    server.shutdown();
    Ok(cpu)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed() -> CostOverrides {
        CostOverrides {
            verify: Some(Duration::from_micros(300)),
            request: Some(Duration::from_micros(200)),
            quote: Some(Duration::from_micros(50)),
        }
    }

    #[test]
    fn percentile_and_mean() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(p95(&v), 19.0);
        assert_eq!(mean(&v), 10.5);
        assert_eq!(p95(&[4.0]), 4.0);
    }

    #[test]
    fn round_trips_are_structural() {
        for (scheme, rts) in [(Scheme::Dca, 1), (Scheme::RatlsSim, 4)] {
            for latency in [0, 7] {
                let cfg = BenchConfig {
                    scheme,
                    n_clients: 3,
                    latency: Duration::from_millis(latency),
                    costs: fixed(),
                    ..BenchConfig::default()
                };
                assert_eq!(bench_run(&cfg).unwrap().row.handshake_round_trips, rts);
            }
        }
    }

    #[test]
    fn virtual_latency_is_the_sum_of_charged_costs() {
        // One client, no queueing: 2 × 5 ms per round trip plus enclave and verify time.
        let base = BenchConfig { n_clients: 1, registrations_per_client: 1, costs: fixed(), ..BenchConfig::default() };
        let dca = bench_run(&base).unwrap().row;
        assert!((dca.mean_latency_ms - 10.2).abs() < 1e-9, "{dca:?}");
        let ratls = bench_run(&BenchConfig { scheme: Scheme::RatlsSim, ..base }).unwrap().row;
        assert!((ratls.mean_latency_ms - (40.0 + 0.3 + 0.2 + 0.05)).abs() < 1e-9, "{ratls:?}");
    }

    #[test]
    fn zero_latency_and_verification_make_the_schemes_converge() {
        // Pinned costs: separate calibrations would add noise between the two runs.
        let costs = CostOverrides { verify: Some(Duration::ZERO), ..fixed() };
        let base = BenchConfig { n_clients: 4, latency: Duration::ZERO, costs, seed: 3, ..BenchConfig::default() };
        let dca = bench_run(&base).unwrap().row;
        let ratls = bench_run(&BenchConfig { scheme: Scheme::RatlsSim, ..base }).unwrap().row;
        // The baseline still pays for producing a quote inside the enclave.
        assert!(ratls.mean_latency_ms <= 1.5 * dca.mean_latency_ms + 0.1, "{dca:?} {ratls:?}");
        assert!(ratls.mean_latency_ms >= dca.mean_latency_ms);
    }

    #[test]
    fn bad_configurations_are_refused() {
        for cfg in [
            BenchConfig { n_clients: 0, ..BenchConfig::default() },
            BenchConfig { timeout: Duration::ZERO, ..BenchConfig::default() },
            BenchConfig { connection_budget: 0, ..BenchConfig::default() },
        ] {
            assert!(matches!(bench_run(&cfg), Err(BenchError::Config(_))));
        }
    }

    #[test]
    fn unreachable_server_is_diagnosed() {
        let free = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
        let err = probe_tcp(&free.to_string(), Duration::from_millis(100)).unwrap_err();
        assert!(matches!(err, BenchError::Unreachable { .. }));
    }

    #[test]
    fn handshake_out_of_order_is_dropped() {
        let stack = Stack::start(1).unwrap();
        let e = AggEndpoint::new(stack.agg.clone());
        assert!(e.handle(1, Frame::new(MsgType::KeyDelivery, FINISHED.to_vec())).is_none());
        assert!(e.handle(2, Frame::new(MsgType::AttestChallenge, HELLO.to_vec())).is_some());
        // A request before the handshake finished ends the session.
        assert!(e.handle(2, Frame::new(MsgType::UserRequest, vec![1, 2, 3])).is_none());
        assert!(e.handshakes.lock().unwrap().is_empty());
    }

    #[test]
    fn csv_header_follows_the_row_fields() {
        let row = BenchRow {
            n_clients: 2,
            scheme: Scheme::RatlsSim,
            mean_latency_ms: 1.0,
            p95_latency_ms: 2.0,
            timeouts: 0,
            handshake_round_trips: 4,
            server_cpu_pct: 3.0,
            peak_mem_mb: 4.0,
        };
        let mut out = Vec::new();
        emit_csv(&[row], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), BENCH_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "2,ratls_sim,1.0,2.0,0,4,3.0,4.0");
        let mut empty = Vec::new();
        emit_csv(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().trim(), BENCH_HEADER.join(","));
    }
}
