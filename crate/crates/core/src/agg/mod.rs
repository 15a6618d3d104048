//! The aggregation enclave: request verification, key unwrapping, the
//! asynchronous update rule and responses sealed under the client's key.
//!
//! A client learns it reached a provisioned enclave only by being able to
//! open the response: the response key travels ABE-wrapped, so only an
//! enclave holding the cluster's attribute keys can recover it.

pub mod client;

use std::collections::HashMap;

use latteo_transport::tcp::Handler;
use latteo_transport::{Frame, MsgType, SessionInfo};

use crate::abe::{AttributeKeySet, AuthorityPublicKey};
use crate::enclave::{EnclaveCtx, EnclaveError, EnclaveProgram, Eid, ProgramInit, Quote, TeeHost};
use crate::envelope::{self, Certificate, EnvelopeError, HybridEnvelope, SignedMessage, SymmetricKey};
use crate::mesh::manifest_value;
use crate::wire::{DecodeError, Reader, Writer};

pub use client::{implicit_attest, Client, PendingRequest};

const TAG_HANDOFF: u8 = 0x60;
const TAG_PAYLOAD: u8 = 0x61;
const TAG_RESPONSE: u8 = 0x62;
const TAG_STATUS: u8 = 0x63;

/// Largest weight vector accepted on the wire.
pub const MAX_DIM: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AggError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in update")]
    NonFinite,
    #[error("client count must be positive")]
    ZeroClients,
    #[error("empty model")]
    EmptyModel,
    #[error("base weights are not a past global version")]
    UnknownBase,
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("registration invalid")]
    Registration,
    #[error("aggregator dropped the request")]
    Dropped,
    #[error("enclave: {0}")]
    Enclave(String),
}

impl From<EnclaveError> for AggError {
    fn from(e: EnclaveError) -> Self {
        AggError::Enclave(e.to_string())
    }
}

pub fn write_weights(w: &mut Writer, v: &[f64]) {
    w.u32(v.len() as u32);
    for x in v {
        w.raw(&x.to_le_bytes());
    }
}

pub fn read_weights(r: &mut Reader<'_>) -> Result<Vec<f64>, DecodeError> {
    let n = r.u32("weight count")? as usize;
    if n > MAX_DIM || n.saturating_mul(8) > r.remaining() {
        return Err(DecodeError::Invalid("weight count"));
    }
    (0..n)
        .map(|_| r.array::<8>("weight").map(f64::from_le_bytes))
        .collect()
}

pub fn write_mpks(w: &mut Writer, mpks: &[AuthorityPublicKey]) {
    w.u32(mpks.len() as u32);
    for m in mpks {
        w.bytes(&m.to_bytes());
    }
}

pub fn read_mpks(r: &mut Reader<'_>) -> Result<Vec<AuthorityPublicKey>, DecodeError> {
    let n = r.u32("authority count")? as usize;
    let mut out = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        out.push(AuthorityPublicKey::from_bytes(r.bytes("authority key")?)?);
    }
    Ok(out)
}

/// `w - (1/K) * (pre - trained)`, element-wise, exactly in that form.
pub fn update_rule(w: &[f64], pre: &[f64], trained: &[f64], clients: usize) -> Result<Vec<f64>, AggError> {
    if clients == 0 {
        return Err(AggError::ZeroClients);
    }
    for v in [pre, trained] {
        if v.len() != w.len() {
            return Err(AggError::DimensionMismatch {
                expected: w.len(),
                got: v.len(),
            });
        }
    }
    if pre.iter().chain(trained).any(|x| !x.is_finite()) {
        return Err(AggError::NonFinite);
    }
    let scale = 1.0 / clients as f64;
    let out: Vec<f64> = w
        .iter()
        .zip(pre.iter().zip(trained))
        .map(|(g, (p, t))| g - scale * (p - t))
        .collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(AggError::NonFinite);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogEntry {
    pub client_id: u64,
    /// Version produced by this update.
    pub version: u64,
}

/// Global weights with version counter. The version counts applied
/// aggregations only.
#[derive(Debug, Clone)]
pub struct ModelState {
    weights: Vec<f64>,
    version: u64,
    clients: usize,
    log: Vec<LogEntry>,
    history: Option<Vec<Vec<f64>>>,
}

impl ModelState {
    pub fn new(weights: Vec<f64>, clients: usize, retain_history: bool) -> Result<Self, AggError> {
        if clients == 0 {
            return Err(AggError::ZeroClients);
        }
        if weights.is_empty() {
            return Err(AggError::EmptyModel);
        }
        if weights.iter().any(|x| !x.is_finite()) {
            return Err(AggError::NonFinite);
        }
        Ok(ModelState {
            history: retain_history.then(|| vec![weights.clone()]),
            weights,
            version: 0,
            clients,
            log: Vec::new(),
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    /// Applies one client update; on error nothing changes.
    pub fn apply_update(&mut self, client_id: u64, pre: &[f64], trained: &[f64]) -> Result<u64, AggError> {
        if let Some(h) = &self.history {
            if pre.len() == self.weights.len() && !h.iter().any(|v| bit_equal(v, pre)) {
                return Err(AggError::UnknownBase);
            }
        }
        let next = update_rule(&self.weights, pre, trained, self.clients)?;
        if let Some(h) = &mut self.history {
            h.push(next.clone());
        }
        self.weights = next;
        self.version += 1;
        self.log.push(LogEntry {
            client_id,
            version: self.version,
        });
        Ok(self.version)
    }
}

fn bit_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// What a client asks for, sealed under its request key.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientPayload {
    WeightsRequest,
    Aggregation { pre: Vec<f64>, trained: Vec<f64> },
}

impl ClientPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_PAYLOAD);
        match self {
            ClientPayload::WeightsRequest => {
                w.u8(1);
            }
            ClientPayload::Aggregation { pre, trained } => {
                w.u8(2);
                write_weights(&mut w, pre);
                write_weights(&mut w, trained);
            }
        }
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_tag("client payload", TAG_PAYLOAD)?;
        let p = match r.u8("request kind")? {
            1 => ClientPayload::WeightsRequest,
            2 => ClientPayload::Aggregation {
                pre: read_weights(&mut r)?,
                trained: read_weights(&mut r)?,
            },
            t => return Err(DecodeError::Tag { what: "request kind", tag: t }),
        };
        r.finish()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggResponse {
    pub client_id: u64,
    pub version: u64,
    pub weights: Vec<f64>,
}

impl AggResponse {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_RESPONSE);
        w.u64(self.client_id).u64(self.version);
        write_weights(&mut w, &self.weights);
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_tag("response", TAG_RESPONSE)?;
        let client_id = r.u64("client id")?;
        let version = r.u64("version")?;
        let weights = read_weights(&mut r)?;
        r.finish()?;
        Ok(AggResponse {
            client_id,
            version,
            weights,
        })
    }
}

/// Provisioning passed from the coordinator through the boot loader to the
/// aggregator application.
#[derive(Clone)]
pub struct AggHandoff {
    pub keyset: AttributeKeySet,
    pub app_key: SymmetricKey,
    pub mpks: Vec<AuthorityPublicKey>,
    pub root: Certificate,
    pub initial_weights: Vec<f64>,
}

impl AggHandoff {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_HANDOFF);
        w.bytes(&self.keyset.to_bytes()).raw(self.app_key.as_bytes());
        write_mpks(&mut w, &self.mpks);
        w.bytes(&self.root.to_bytes());
        write_weights(&mut w, &self.initial_weights);
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_tag("aggregator handoff", TAG_HANDOFF)?;
        let keyset = AttributeKeySet::from_bytes(r.bytes("key set")?)?;
        let app_key = SymmetricKey::from_bytes(r.array("app key")?);
        let mpks = read_mpks(&mut r)?;
        let root = Certificate::from_bytes(r.bytes("root")?)?;
        let initial_weights = read_weights(&mut r)?;
        r.finish()?;
        Ok(AggHandoff {
            keyset,
            app_key,
            mpks,
            root,
            initial_weights,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseKind {
    /// First contact or a plain weights fetch; carries the client id.
    IdAssign,
    /// Reply to an aggregation request.
    Update,
}

#[derive(Debug, Clone)]
pub struct Handled {
    pub kind: ResponseKind,
    pub client_id: u64,
    /// C3: the response sealed under the client's request key.
    pub sealed: Vec<u8>,
    pub payload: ClientPayload,
}

/// Request handling logic of the aggregation enclave.
pub struct AggService {
    keyset: AttributeKeySet,
    mpks: Vec<AuthorityPublicKey>,
    root: Certificate,
    model: ModelState,
    ids: HashMap<(String, [u8; 32]), u64>,
}

impl AggService {
    pub fn new(
        keyset: AttributeKeySet,
        mpks: Vec<AuthorityPublicKey>,
        root: Certificate,
        model: ModelState,
    ) -> Self {
        AggService {
            keyset,
            mpks,
            root,
            model,
            ids: HashMap::new(),
        }
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn cluster_id(&self) -> &str {
        &self.keyset.cluster_id
    }

    pub fn issued_ids(&self) -> usize {
        self.ids.len()
    }

    /// Stable id per certified identity; ids are assigned 1, 2, ...
    fn client_id_for(&self, cert: &Certificate) -> (u64, bool) {
        match self.ids.get(&(cert.identity.clone(), cert.verifying_key)) {
            Some(id) => (*id, false),
            None => (self.ids.len() as u64 + 1, true),
        }
    }

    pub fn issue_client_id(&mut self, cert: &Certificate) -> u64 {
        let (id, fresh) = self.client_id_for(cert);
        if fresh {
            self.ids.insert((cert.identity.clone(), cert.verifying_key), id);
        }
        id
    }

    /// Verifies, decrypts and applies one request. On any error the state
    /// is unchanged and no response exists.
    pub fn handle(&mut self, request: &[u8]) -> Result<Handled, AggError> {
        let msg = SignedMessage::from_bytes(request)?;
        msg.verify(&[], &self.root)?;
        let env = HybridEnvelope::from_bytes(&msg.body)?;
        let (key, plaintext) = env.open(&self.mpks, &self.keyset)?;
        let payload = ClientPayload::from_bytes(&plaintext)?;
        let (client_id, _) = self.client_id_for(&msg.signer);
        let kind = match &payload {
            ClientPayload::WeightsRequest => ResponseKind::IdAssign,
            ClientPayload::Aggregation { pre, trained } => {
                self.model.apply_update(client_id, pre, trained)?;
                ResponseKind::Update
            }
        };
        self.issue_client_id(&msg.signer);
        let resp = AggResponse {
            client_id,
            version: self.model.version(),
            weights: self.model.weights().to_vec(),
        };
        Ok(Handled {
            kind,
            client_id,
            sealed: envelope::seal(&key, &resp.to_bytes()).to_bytes(),
            payload,
        })
    }

    pub fn status(&self) -> AggStatus {
        AggStatus {
            cluster_id: self.keyset.cluster_id.clone(),
            version: self.model.version(),
            clients: self.model.clients() as u64,
            issued_ids: self.ids.len() as u64,
            log: self.model.log().to_vec(),
        }
    }
}

/// Public bookkeeping of an aggregator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggStatus {
    pub cluster_id: String,
    pub version: u64,
    pub clients: u64,
    pub issued_ids: u64,
    pub log: Vec<LogEntry>,
}

impl AggStatus {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_STATUS);
        w.str(&self.cluster_id)
            .u64(self.version)
            .u64(self.clients)
            .u64(self.issued_ids)
            .u32(self.log.len() as u32);
        for e in &self.log {
            w.u64(e.client_id).u64(e.version);
        }
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_tag("status", TAG_STATUS)?;
        let cluster_id = r.str("cluster")?.to_string();
        let version = r.u64("version")?;
        let clients = r.u64("clients")?;
        let issued_ids = r.u64("issued ids")?;
        let n = r.u32("log length")? as usize;
        if n.saturating_mul(16) > r.remaining() {
            return Err(DecodeError::Invalid("log length"));
        }
        let log = (0..n)
            .map(|_| {
                Ok(LogEntry {
                    client_id: r.u64("client id")?,
                    version: r.u64("version")?,
                })
            })
            .collect::<Result<_, DecodeError>>()?;
        r.finish()?;
        Ok(AggStatus {
            cluster_id,
            version,
            clients,
            issued_ids,
            log,
        })
    }
}

// Enclave input tags.
const IN_REQUEST: u8 = 1;
const IN_STATUS: u8 = 2;
const IN_ATTEST: u8 = 3;
// Enclave output tags.
const OUT_DROP: u8 = 0;
const OUT_ID_ASSIGN: u8 = 1;
const OUT_RESPONSE: u8 = 2;
const OUT_STATUS: u8 = 3;
const OUT_QUOTE: u8 = 4;

/// Report data bound into aggregator quotes.
pub const AGG_REPORT_DATA: &[u8] = b"latteo aggregator";

/// The aggregator application as an enclave program.
pub struct AggApp {
    service: AggService,
}

impl AggApp {
    /// Expects the coordinator handoff; `clients` and `strict` come from the
    /// signed manifest.
    pub fn construct(init: &ProgramInit<'_>) -> Result<Box<dyn EnclaveProgram>, String> {
        let h = AggHandoff::from_bytes(init.handoff).map_err(|e| format!("handoff: {e}"))?;
        let clients: usize = manifest_value(init.manifest, "clients")
            .and_then(|v| v.parse().ok())
            .ok_or("manifest lacks clients")?;
        let strict = manifest_value(init.manifest, "strict") == Some("1");
        let model = ModelState::new(h.initial_weights, clients, strict).map_err(|e| e.to_string())?;
        Ok(Box::new(AggApp {
            service: AggService::new(h.keyset, h.mpks, h.root, model),
        }))
    }
}

impl EnclaveProgram for AggApp {
    fn step(&mut self, ctx: &mut EnclaveCtx<'_>, input: &[u8]) -> Vec<u8> {
        match input.split_first() {
            Some((&IN_REQUEST, req)) => match self.service.handle(req) {
                Ok(h) => {
                    ctx.log(format!(
                        "client {} v{} U={}",
                        h.client_id,
                        self.service.model().version(),
                        hex::encode(h.payload.to_bytes())
                    ));
                    let tag = match h.kind {
                        ResponseKind::IdAssign => OUT_ID_ASSIGN,
                        ResponseKind::Update => OUT_RESPONSE,
                    };
                    [&[tag][..], &h.sealed].concat()
                }
                Err(e) => {
                    ctx.log(format!("request dropped: {e}"));
                    vec![OUT_DROP]
                }
            },
            Some((&IN_STATUS, _)) => [&[OUT_STATUS][..], &self.service.status().to_bytes()].concat(),
            Some((&IN_ATTEST, nonce)) => match <[u8; 32]>::try_from(nonce) {
                Ok(n) => match ctx.quote(&ctx.report(AGG_REPORT_DATA, n)) {
                    Ok(q) => [&[OUT_QUOTE][..], &q.to_bytes()].concat(),
                    Err(_) => vec![OUT_DROP],
                },
                Err(_) => vec![OUT_DROP],
            },
            _ => vec![OUT_DROP],
        }
    }
}

/// Host software in front of an aggregator enclave.
#[derive(Clone)]
pub struct AggregatorHost {
    host: TeeHost,
    eid: Eid,
}

impl AggregatorHost {
    pub fn new(host: TeeHost, eid: Eid) -> Self {
        AggregatorHost { host, eid }
    }

    pub fn host(&self) -> &TeeHost {
        &self.host
    }

    pub fn eid(&self) -> Eid {
        self.eid
    }

    /// Passes a client request in; `None` means the enclave dropped it.
    pub fn submit(&self, request: &[u8]) -> Result<Option<Frame>, AggError> {
        let out = self
            .host
            .resume(self.eid, &[&[IN_REQUEST][..], request].concat())?
            .output;
        Ok(match out.split_first() {
            Some((&OUT_ID_ASSIGN, c3)) => Some(Frame::new(MsgType::IdAssign, c3.to_vec())),
            Some((&OUT_RESPONSE, c3)) => Some(Frame::new(MsgType::ServerResponse, c3.to_vec())),
            _ => None,
        })
    }

    pub fn status(&self) -> Result<AggStatus, AggError> {
        let out = self.host.resume(self.eid, &[IN_STATUS])?.output;
        match out.split_first() {
            Some((&OUT_STATUS, b)) => Ok(AggStatus::from_bytes(b)?),
            _ => Err(AggError::Dropped),
        }
    }

    /// Quote over [`AGG_REPORT_DATA`] for an explicit-attestation client.
    pub fn attest(&self, nonce: [u8; 32]) -> Result<Quote, AggError> {
        let out = self.host.resume(self.eid, &[&[IN_ATTEST][..], &nonce].concat())?.output;
        match out.split_first() {
            Some((&OUT_QUOTE, b)) => Ok(Quote::from_bytes(b)?),
            _ => Err(AggError::Dropped),
        }
    }
}

impl Handler for AggregatorHost {
    fn handle(&self, _: &SessionInfo, frame: Frame) -> Option<Frame> {
        match frame.msg_type {
            MsgType::UserRequest => self.submit(&frame.payload).ok().flatten(),
            _ => None,
        }
    }
}
