//! Software-simulated trusted execution.
//!
//! A [`Platform`] plays the hardware vendor: it owns the quote-signing root,
//! the attestation key that signs every resume output, and the secret from
//! which report and sealing keys are derived. Each [`TeeHost`] is one
//! machine. Enclaves are table-driven programs looked up by name in a
//! [`ProgramRegistry`]; the host reaches them only through `install` and
//! `resume`. Reports, quotes and sealing are available only through the
//! [`EnclaveCtx`] handed to a running program, so report contents are always
//! chosen by enclave code.

pub mod toy;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::rngs::OsRng;
use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::envelope::{self, Sealed, SigningKey, SymmetricKey, NONCE_LEN};
use crate::wire::{DecodeError, Reader, Writer};

pub const PROGRAM_MAGIC: &[u8; 6] = b"LTPROG";
pub const PROGRAM_VERSION: u8 = 1;
pub const SEAL_VERSION: u8 = 1;

const TAG_REPORT_BODY: u8 = 0x20;
const TAG_QUOTE: u8 = 0x21;
const TAG_REPORT: u8 = 0x22;
const TAG_RESUME_SIG: u8 = 0x23;
const TAG_PRIM: u8 = 0x24;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnclaveError {
    #[error("empty program")]
    EmptyProgram,
    #[error("malformed program image: {0}")]
    MalformedProgram(String),
    #[error("no program named {0:?} on this platform")]
    UnknownProgram(String),
    #[error("program refused to start: {0}")]
    ProgramRejected(String),
    #[error("abort: unknown enclave")]
    UnknownEnclave,
    #[error("seal identity mismatch")]
    SealIdentityMismatch,
    #[error("sealed blob corrupt")]
    SealCorrupt,
    #[error("report was not produced on this host")]
    ForeignReport,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Measurement(pub [u8; 32]);

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({self})")
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..8] {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// SHA-256 over the program image followed by the manifest. The program is
/// length-prefixed so the split point is unambiguous.
pub fn measure(program: &[u8], manifest: &[u8]) -> Measurement {
    let mut h = Sha256::new();
    h.update((program.len() as u64).to_be_bytes());
    h.update(program);
    h.update(manifest);
    Measurement(h.finalize().into())
}

/// Program image: magic, version, name, body. The body is opaque to the
/// platform and handed to the program constructor.
pub fn program_image(name: &str, body: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(PROGRAM_MAGIC).u8(PROGRAM_VERSION).str(name).bytes(body);
    w.finish()
}

pub fn parse_program_image(image: &[u8]) -> Result<(String, Vec<u8>), EnclaveError> {
    if image.is_empty() {
        return Err(EnclaveError::EmptyProgram);
    }
    let bad = |e: DecodeError| EnclaveError::MalformedProgram(e.to_string());
    let mut r = Reader::new(image);
    if r.take(PROGRAM_MAGIC.len(), "magic").map_err(bad)? != PROGRAM_MAGIC {
        return Err(EnclaveError::MalformedProgram("bad magic".into()));
    }
    r.expect_version(PROGRAM_VERSION).map_err(bad)?;
    let name = r.str("name").map_err(bad)?.to_string();
    let body = r.bytes("body").map_err(bad)?.to_vec();
    r.finish().map_err(bad)?;
    Ok((name, body))
}

/// One step of enclave code: consumes an input, may mutate private state,
/// returns an output that the host will see.
pub trait EnclaveProgram: Send {
    fn step(&mut self, ctx: &mut EnclaveCtx<'_>, input: &[u8]) -> Vec<u8>;
}

/// Inputs to a program constructor. `handoff` is state passed by the
/// program that `exec`'d this one, empty on a fresh install.
pub struct ProgramInit<'a> {
    pub body: &'a [u8],
    pub manifest: &'a [u8],
    pub handoff: &'a [u8],
}

pub type ProgramConstructor =
    Arc<dyn Fn(&ProgramInit<'_>) -> Result<Box<dyn EnclaveProgram>, String> + Send + Sync>;

#[derive(Clone, Default)]
pub struct ProgramRegistry {
    programs: HashMap<String, ProgramConstructor>,
}

impl ProgramRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: &str, ctor: F) -> &mut Self
    where
        F: Fn(&ProgramInit<'_>) -> Result<Box<dyn EnclaveProgram>, String> + Send + Sync + 'static,
    {
        self.programs.insert(name.to_string(), Arc::new(ctor));
        self
    }

    pub fn merge(&mut self, other: &ProgramRegistry) -> &mut Self {
        for (k, v) in &other.programs {
            self.programs.insert(k.clone(), v.clone());
        }
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.programs.contains_key(name)
    }

    fn build(
        &self,
        image: &[u8],
        manifest: &[u8],
        handoff: &[u8],
    ) -> Result<Box<dyn EnclaveProgram>, EnclaveError> {
        let (name, body) = parse_program_image(image)?;
        let ctor = self
            .programs
            .get(&name)
            .ok_or(EnclaveError::UnknownProgram(name))?;
        ctor(&ProgramInit {
            body: &body,
            manifest,
            handoff,
        })
        .map_err(EnclaveError::ProgramRejected)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportBody {
    pub measurement: Measurement,
    pub report_data: Vec<u8>,
    pub nonce: [u8; 32],
    pub host_id: String,
}

impl ReportBody {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_REPORT_BODY);
        w.raw(&self.measurement.0)
            .bytes(&self.report_data)
            .raw(&self.nonce)
            .str(&self.host_id);
        w.finish()
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag("report body", TAG_REPORT_BODY)?;
        Ok(ReportBody {
            measurement: Measurement(r.array("measurement")?),
            report_data: r.bytes("report data")?.to_vec(),
            nonce: r.array("nonce")?,
            host_id: r.str("host id")?.to_string(),
        })
    }
}

/// Local evidence, MAC'd under a key only enclaves on the same host derive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub body: ReportBody,
    pub mac: [u8; 32],
}

impl Report {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_REPORT);
        w.raw(&self.body.to_bytes()).raw(&self.mac);
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_tag("report", TAG_REPORT)?;
        let body = ReportBody::read(&mut r)?;
        let mac = r.array("mac")?;
        r.finish()?;
        Ok(Report { body, mac })
    }
}

/// Remote evidence: a report body signed by the platform's quoting key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub body: ReportBody,
    pub signature: [u8; 64],
}

impl Quote {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_QUOTE);
        w.raw(&self.body.to_bytes()).raw(&self.signature);
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_tag("quote", TAG_QUOTE)?;
        let body = ReportBody::read(&mut r)?;
        let signature = r.array("signature")?;
        r.finish()?;
        Ok(Quote { body, signature })
    }
}

/// Verification inputs for attestation evidence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestPrim {
    pub expected: Vec<Measurement>,
    pub platform_root: [u8; 32],
}

impl AttestPrim {
    pub fn new(expected: Vec<Measurement>, platform_root: [u8; 32]) -> Self {
        assert!(!expected.is_empty(), "attestation primitive needs a measurement");
        AttestPrim {
            expected,
            platform_root,
        }
    }

    /// Same root, expecting only `m`; `None` if `m` is not already expected.
    pub fn narrowed(&self, m: Measurement) -> Option<AttestPrim> {
        self.expected.contains(&m).then(|| AttestPrim {
            expected: vec![m],
            platform_root: self.platform_root,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_PRIM);
        w.raw(&self.platform_root).u32(self.expected.len() as u32);
        for m in &self.expected {
            w.raw(&m.0);
        }
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        let p = Self::read(&mut r)?;
        r.finish()?;
        Ok(p)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag("attest prim", TAG_PRIM)?;
        let platform_root = r.array("platform root")?;
        let n = r.u32("count")? as usize;
        if n == 0 || n > 64 {
            return Err(DecodeError::Invalid("measurement count"));
        }
        let expected = (0..n)
            .map(|_| r.array("measurement").map(Measurement))
            .collect::<Result<_, _>>()?;
        Ok(AttestPrim {
            expected,
            platform_root,
        })
    }
}

/// Signature valid under the platform root, measurement expected, nonce fresh.
pub fn verify_quote(prim: &AttestPrim, q: &Quote, expected_nonce: &[u8; 32]) -> bool {
    envelope::verify(&prim.platform_root, &q.body.to_bytes(), &q.signature)
        && prim.expected.contains(&q.body.measurement)
        && q.body.nonce == *expected_nonce
}

struct PlatformInner {
    quoting_key: SigningKey,
    attestation_key: SigningKey,
    secret: [u8; 32],
}

/// The simulated hardware vendor.
#[derive(Clone)]
pub struct Platform {
    inner: Arc<PlatformInner>,
}

impl Default for Platform {
    fn default() -> Self {
        Self::new()
    }
}

impl Platform {
    pub fn new() -> Self {
        let mut secret = [0u8; 32];
        OsRng.fill_bytes(&mut secret);
        Self::from_secret(secret)
    }

    /// Every key of the platform follows from `secret`, so processes that
    /// load the same secret act as one vendor.
    pub fn from_secret(secret: [u8; 32]) -> Self {
        let hk = Hkdf::<Sha256>::new(Some(b"latteo-platform-keys-v1"), &secret);
        let key = |label: &[u8]| {
            let mut seed = [0u8; 32];
            hk.expand(label, &mut seed).expect("valid HKDF length");
            SigningKey::from_bytes(&seed)
        };
        Platform {
            inner: Arc::new(PlatformInner {
                quoting_key: key(b"quoting"),
                attestation_key: key(b"attestation"),
                secret,
            }),
        }
    }

    /// Verifying key of the quoting enclave; goes into every [`AttestPrim`].
    pub fn root_key(&self) -> [u8; 32] {
        self.inner.quoting_key.verifying_key()
    }

    /// Verifying key for resume-output signatures (`getpk`).
    pub fn attestation_key(&self) -> [u8; 32] {
        self.inner.attestation_key.verifying_key()
    }

    pub fn host(&self, host_id: &str, registry: ProgramRegistry) -> TeeHost {
        TeeHost {
            shared: Arc::new(HostShared {
                host_id: host_id.to_string(),
                platform: self.clone(),
                registry,
                report_key: self.derive(b"report", host_id.as_bytes()),
                table: Mutex::new(HashMap::new()),
                transcript: Mutex::new(Vec::new()),
            }),
        }
    }

    fn derive(&self, label: &[u8], context: &[u8]) -> [u8; 32] {
        let hk = Hkdf::<Sha256>::new(Some(b"latteo-platform-v1"), &self.inner.secret);
        let mut out = [0u8; 32];
        let mut info = label.to_vec();
        info.extend_from_slice(context);
        hk.expand(&info, &mut out).expect("valid HKDF length");
        out
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Eid(pub [u8; 16]);

impl fmt::Debug for Eid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Eid({self})")
    }
}

impl fmt::Display for Eid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// Host-side reference to an enclave. Carries only public identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveHandle {
    pub eid: Eid,
    pub host_id: String,
    pub measurement: Measurement,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResumeOutput {
    pub output: Vec<u8>,
    pub signature: [u8; 64],
}

/// What the untrusted host saw cross the enclave boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostEvent {
    Install { eid: Eid, program: Vec<u8>, manifest: Vec<u8> },
    Input { eid: Eid, bytes: Vec<u8> },
    Output { eid: Eid, bytes: Vec<u8> },
}

impl HostEvent {
    pub fn bytes(&self) -> &[u8] {
        match self {
            HostEvent::Install { program, .. } => program,
            HostEvent::Input { bytes, .. } | HostEvent::Output { bytes, .. } => bytes,
        }
    }
}

struct Slot {
    installed: Measurement,
    running: Measurement,
    manifest: Vec<u8>,
    program: Box<dyn EnclaveProgram>,
    log: Vec<String>,
}

struct HostShared {
    host_id: String,
    platform: Platform,
    registry: ProgramRegistry,
    report_key: [u8; 32],
    table: Mutex<HashMap<Eid, Arc<Mutex<Slot>>>>,
    transcript: Mutex<Vec<HostEvent>>,
}

/// One machine with enclave support.
#[derive(Clone)]
pub struct TeeHost {
    shared: Arc<HostShared>,
}

impl TeeHost {
    pub fn host_id(&self) -> &str {
        &self.shared.host_id
    }

    pub fn platform(&self) -> &Platform {
        &self.shared.platform
    }

    pub fn install(&self, program: &[u8], manifest: &[u8]) -> Result<EnclaveHandle, EnclaveError> {
        let prog = self.shared.registry.build(program, manifest, &[])?;
        let m = measure(program, manifest);
        let mut id = [0u8; 16];
        OsRng.fill_bytes(&mut id);
        let eid = Eid(id);
        let slot = Slot {
            installed: m,
            running: m,
            manifest: manifest.to_vec(),
            program: prog,
            log: Vec::new(),
        };
        self.shared
            .table
            .lock()
            .unwrap()
            .insert(eid, Arc::new(Mutex::new(slot)));
        self.shared.transcript.lock().unwrap().push(HostEvent::Install {
            eid,
            program: program.to_vec(),
            manifest: manifest.to_vec(),
        });
        Ok(EnclaveHandle {
            eid,
            host_id: self.shared.host_id.clone(),
            measurement: m,
        })
    }

    /// Runs one program step. Calls on the same enclave are serialized.
    pub fn resume(&self, eid: Eid, input: &[u8]) -> Result<ResumeOutput, EnclaveError> {
        let slot = self
            .shared
            .table
            .lock()
            .unwrap()
            .get(&eid)
            .cloned()
            .ok_or(EnclaveError::UnknownEnclave)?;
        self.record(HostEvent::Input {
            eid,
            bytes: input.to_vec(),
        });
        let mut slot = slot.lock().unwrap();
        let slot = &mut *slot;
        let mut ctx = EnclaveCtx {
            host: &self.shared,
            eid,
            running: slot.running,
            manifest: &slot.manifest,
            log: &mut slot.log,
            exec: None,
        };
        let output = slot.program.step(&mut ctx, input);
        if let Some((image, manifest, handoff)) = ctx.exec.take() {
            match self.shared.registry.build(&image, &manifest, &handoff) {
                Ok(p) => {
                    slot.program = p;
                    slot.running = measure(&image, &manifest);
                    slot.manifest = manifest;
                }
                Err(e) => slot.log.push(format!("exec failed: {e}")),
            }
        }
        let signature = self.shared.platform.inner.attestation_key.sign(&resume_sig_body(
            &self.shared.host_id,
            eid,
            slot.installed,
            &output,
        ));
        self.record(HostEvent::Output {
            eid,
            bytes: output.clone(),
        });
        Ok(ResumeOutput { output, signature })
    }

    /// Tears the enclave down; its memory is gone.
    pub fn destroy(&self, eid: Eid) -> bool {
        self.shared.table.lock().unwrap().remove(&eid).is_some()
    }

    pub fn running_measurement(&self, eid: Eid) -> Option<Measurement> {
        let slot = self.shared.table.lock().unwrap().get(&eid).cloned()?;
        let m = slot.lock().unwrap().running;
        Some(m)
    }

    /// Everything that crossed the enclave boundary on this host.
    pub fn transcript(&self) -> Vec<HostEvent> {
        self.shared.transcript.lock().unwrap().clone()
    }

    /// Simulator introspection of an enclave's private debug log. Models
    /// state inside the enclave; no protocol path exposes it.
    pub fn introspect_log(&self, eid: Eid) -> Vec<String> {
        let Some(slot) = self.shared.table.lock().unwrap().get(&eid).cloned() else {
            return Vec::new();
        };
        let log = slot.lock().unwrap().log.clone();
        log
    }

    fn record(&self, e: HostEvent) {
        self.shared.transcript.lock().unwrap().push(e);
    }
}

fn resume_sig_body(idx: &str, eid: Eid, prog: Measurement, output: &[u8]) -> Vec<u8> {
    let mut w = Writer::with_tag(TAG_RESUME_SIG);
    w.str(idx).raw(&eid.0).raw(&prog.0).bytes(output);
    w.finish()
}

/// Checks a resume signature against the platform attestation key.
pub fn verify_resume_output(
    attestation_key: &[u8; 32],
    handle: &EnclaveHandle,
    out: &ResumeOutput,
) -> bool {
    envelope::verify(
        attestation_key,
        &resume_sig_body(&handle.host_id, handle.eid, handle.measurement, &out.output),
        &out.signature,
    )
}

/// Capabilities available to code running inside an enclave.
pub struct EnclaveCtx<'a> {
    host: &'a HostShared,
    eid: Eid,
    running: Measurement,
    manifest: &'a [u8],
    log: &'a mut Vec<String>,
    exec: Option<(Vec<u8>, Vec<u8>, Vec<u8>)>,
}

impl EnclaveCtx<'_> {
    pub fn eid(&self) -> Eid {
        self.eid
    }

    pub fn host_id(&self) -> &str {
        &self.host.host_id
    }

    pub fn measurement(&self) -> Measurement {
        self.running
    }

    pub fn manifest(&self) -> &[u8] {
        self.manifest
    }

    pub fn platform_root(&self) -> [u8; 32] {
        self.host.platform.root_key()
    }

    pub fn log(&mut self, line: impl Into<String>) {
        self.log.push(line.into());
    }

    fn report_mac(&self, body: &ReportBody) -> [u8; 32] {
        let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&self.host.report_key)
            .expect("HMAC takes any key length");
        mac.update(&body.to_bytes());
        mac.finalize().into_bytes().into()
    }

    /// Report over this enclave's running measurement.
    pub fn report(&self, report_data: &[u8], nonce: [u8; 32]) -> Report {
        let body = ReportBody {
            measurement: self.running,
            report_data: report_data.to_vec(),
            nonce,
            host_id: self.host.host_id.clone(),
        };
        let mac = self.report_mac(&body);
        Report { body, mac }
    }

    /// True iff `report` was produced by an enclave on this same host.
    pub fn verify_local_report(&self, report: &Report) -> bool {
        let expect = self.report_mac(&report.body);
        report.body.host_id == self.host.host_id && constant_time_eq(&expect, &report.mac)
    }

    /// Has the quoting enclave on this host sign a local report.
    pub fn quote(&self, report: &Report) -> Result<Quote, EnclaveError> {
        if !self.verify_local_report(report) {
            return Err(EnclaveError::ForeignReport);
        }
        let signature = self.host.platform.inner.quoting_key.sign(&report.body.to_bytes());
        Ok(Quote {
            body: report.body.clone(),
            signature,
        })
    }

    fn seal_key(&self, m: &Measurement) -> SymmetricKey {
        let mut ctx = self.host.host_id.as_bytes().to_vec();
        ctx.extend_from_slice(&m.0);
        SymmetricKey::from_bytes(self.host.platform.derive(b"seal", &ctx))
    }

    /// `[version][measurement][nonce][ciphertext||tag]`, bound to this host
    /// and the running measurement.
    pub fn seal_data(&self, blob: &[u8]) -> Vec<u8> {
        let s = envelope::seal_with_aad(&self.seal_key(&self.running), blob, &self.running.0);
        let mut out = vec![SEAL_VERSION];
        out.extend_from_slice(&self.running.0);
        out.extend_from_slice(&s.nonce);
        out.extend_from_slice(&s.ciphertext);
        out
    }

    pub fn unseal_data(&self, sealed: &[u8]) -> Result<Vec<u8>, EnclaveError> {
        if sealed.len() < 1 + 32 + NONCE_LEN + envelope::TAG_LEN || sealed[0] != SEAL_VERSION {
            return Err(EnclaveError::SealCorrupt);
        }
        let m = Measurement(sealed[1..33].try_into().unwrap());
        if m != self.running {
            return Err(EnclaveError::SealIdentityMismatch);
        }
        let s = Sealed {
            nonce: sealed[33..33 + NONCE_LEN].try_into().unwrap(),
            ciphertext: sealed[33 + NONCE_LEN..].to_vec(),
        };
        envelope::open_with_aad(&self.seal_key(&m), &s, &m.0).map_err(|_| EnclaveError::SealCorrupt)
    }

    /// Replaces the running program after this step returns. The new
    /// measurement is that of `(image, manifest)`; `handoff` is passed to the
    /// new program's constructor and never leaves the enclave.
    pub fn exec(&mut self, image: Vec<u8>, manifest: Vec<u8>, handoff: Vec<u8>) {
        self.exec = Some((image, manifest, handoff));
    }

    pub fn random_bytes<const N: usize>(&self) -> [u8; N] {
        let mut b = [0u8; N];
        OsRng.fill_bytes(&mut b);
        b
    }
}

fn constant_time_eq(a: &[u8; 32], b: &[u8; 32]) -> bool {
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[cfg(test)]
mod tests {
    use super::toy::{self, ProbeCmd};
    use super::*;
    use proptest::prelude::*;

    fn host(p: &Platform, id: &str) -> TeeHost {
        p.host(id, toy::registry())
    }

    #[test]
    fn platforms_from_one_secret_share_their_keys() {
        let (a, b) = (Platform::from_secret([3; 32]), Platform::from_secret([3; 32]));
        assert_eq!(a.root_key(), b.root_key());
        assert_eq!(a.attestation_key(), b.attestation_key());
        assert_ne!(a.root_key(), a.attestation_key());
        assert_ne!(a.root_key(), Platform::from_secret([4; 32]).root_key());
    }

    #[test]
    fn install_measures_deterministically() {
        let p = Platform::new();
        let h = host(&p, "h1");
        let img = toy::image("counter");
        let a = h.install(&img, b"m").unwrap();
        let b = h.install(&img, b"m").unwrap();
        assert_eq!(a.measurement, b.measurement);
        assert_ne!(a.eid, b.eid);
        assert_eq!(a.measurement, measure(&img, b"m"));
        let mut changed = img.clone();
        *changed.last_mut().unwrap() ^= 1;
        assert_ne!(measure(&changed, b"m"), a.measurement);
        assert_ne!(measure(&img, b"n"), a.measurement);
        assert_eq!(h.install(&[], b"m").unwrap_err(), EnclaveError::EmptyProgram);
        assert!(matches!(
            h.install(&program_image("nope", b""), b""),
            Err(EnclaveError::UnknownProgram(_))
        ));
    }

    #[test]
    fn ping_counter_and_unknown_eid() {
        let p = Platform::new();
        let h = host(&p, "h1");
        let ping = h.install(&toy::image("ping"), b"").unwrap();
        let out = h.resume(ping.eid, b"ping").unwrap();
        assert_eq!(out.output, b"pong");
        assert!(verify_resume_output(&p.attestation_key(), &ping, &out));
        assert!(!verify_resume_output(&Platform::new().attestation_key(), &ping, &out));
        let mut tampered = out.clone();
        tampered.output = b"pang".to_vec();
        assert!(!verify_resume_output(&p.attestation_key(), &ping, &tampered));

        let c = h.install(&toy::image("counter"), b"").unwrap();
        let outs: Vec<u64> = (0..3)
            .map(|_| u64::from_be_bytes(h.resume(c.eid, b"").unwrap().output.try_into().unwrap()))
            .collect();
        assert_eq!(outs, [1, 2, 3]);
        assert_eq!(h.resume(Eid([0; 16]), b"").unwrap_err(), EnclaveError::UnknownEnclave);
        h.destroy(c.eid);
        assert_eq!(h.resume(c.eid, b"").unwrap_err(), EnclaveError::UnknownEnclave);
    }

    #[test]
    fn quotes_bind_data_nonce_and_measurement() {
        let p = Platform::new();
        let h = host(&p, "h1");
        let probe = h.install(&toy::image("probe"), b"").unwrap();
        let nonce = [7u8; 32];
        let data = [42u8; 32];
        let q = Quote::from_bytes(
            &h.resume(probe.eid, &ProbeCmd::Quote { nonce, data: data.to_vec() }.encode())
                .unwrap()
                .output,
        )
        .unwrap();
        assert_eq!(q.body.report_data, data);
        let prim = AttestPrim::new(vec![probe.measurement], p.root_key());
        assert!(verify_quote(&prim, &q, &nonce));
        assert!(!verify_quote(&prim, &q, &[8u8; 32]));
        let other = AttestPrim::new(vec![measure(&toy::image("ping"), b"")], p.root_key());
        assert!(!verify_quote(&other, &q, &nonce));
        let foreign = AttestPrim::new(vec![probe.measurement], Platform::new().root_key());
        assert!(!verify_quote(&foreign, &q, &nonce));
        let mut forged = q.clone();
        forged.signature[0] ^= 1;
        assert!(!verify_quote(&prim, &forged, &nonce));
        assert_eq!(AttestPrim::from_bytes(&prim.to_bytes()).unwrap(), prim);
    }

    #[test]
    fn local_reports_verify_only_on_same_host() {
        let p = Platform::new();
        let h1 = host(&p, "h1");
        let h2 = host(&p, "h2");
        let a = h1.install(&toy::image("probe"), b"").unwrap();
        let b = h1.install(&toy::image("probe"), b"").unwrap();
        let c = h2.install(&toy::image("probe"), b"").unwrap();
        let report = h1
            .resume(a.eid, &ProbeCmd::Report { nonce: [1; 32], data: vec![] }.encode())
            .unwrap()
            .output;
        let check = |h: &TeeHost, eid| h.resume(eid, &ProbeCmd::CheckLocal(report.clone()).encode()).unwrap().output;
        assert_eq!(check(&h1, b.eid), [1]);
        assert_eq!(check(&h2, c.eid), [0]);
    }

    #[test]
    fn sealing_is_bound_to_measurement_and_survives_restart() {
        let p = Platform::new();
        let h = host(&p, "h1");
        let v1 = h.install(&toy::image("vault"), b"").unwrap();
        let blob = h.resume(v1.eid, &toy::VaultCmd::Seal(b"A_e".to_vec()).encode()).unwrap().output;
        let ok = h.resume(v1.eid, &toy::VaultCmd::Unseal(blob.clone()).encode()).unwrap().output;
        assert_eq!(ok[0], 1);
        assert!(!blob.windows(3).any(|w| w == b"A_e"));

        h.destroy(v1.eid);
        let v2 = h.install(&toy::image("vault"), b"").unwrap();
        let ok = h.resume(v2.eid, &toy::VaultCmd::Unseal(blob.clone()).encode()).unwrap().output;
        assert_eq!(ok[0], 1);

        let other = h.install(&toy::image("vault"), b"other manifest").unwrap();
        let err = h.resume(other.eid, &toy::VaultCmd::Unseal(blob.clone()).encode()).unwrap().output;
        assert_eq!(err, [0, 1], "identity mismatch");
        let h2 = host(&p, "h2");
        let v3 = h2.install(&toy::image("vault"), b"").unwrap();
        let err = h2.resume(v3.eid, &toy::VaultCmd::Unseal(blob).encode()).unwrap().output;
        assert_eq!(err, [0, 2], "other host cannot open");
    }

    #[test]
    fn host_transcript_never_contains_vault_secret() {
        let p = Platform::new();
        let h = host(&p, "h1");
        let v = h.install(&toy::image("vault"), b"").unwrap();
        h.resume(v.eid, &toy::VaultCmd::Generate.encode()).unwrap();
        h.resume(v.eid, &toy::VaultCmd::Digest.encode()).unwrap();
        // Generated inside; the host sees only a digest.
        let inside = h.introspect_log(v.eid);
        let secret_hex = inside.iter().find_map(|l| l.strip_prefix("secret ")).unwrap().to_string();
        for ev in h.transcript() {
            let hay = ev.bytes().iter().map(|b| format!("{b:02x}")).collect::<String>();
            assert!(!hay.contains(&secret_hex));
        }
    }

    #[test]
    fn exec_switches_running_measurement() {
        let p = Platform::new();
        let h = host(&p, "h1");
        let loader = h.install(&toy::image("loader"), b"boot").unwrap();
        let target = toy::image("counter");
        h.resume(loader.eid, &target).unwrap();
        assert_eq!(h.running_measurement(loader.eid), Some(measure(&target, b"loaded")));
        assert_eq!(h.resume(loader.eid, b"").unwrap().output, 1u64.to_be_bytes());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mutated_programs_fail_quote_verification(pos in any::<usize>(), bit in 0u8..8) {
            let p = Platform::new();
            let h = host(&p, "h1");
            let img = toy::image("probe");
            let honest = measure(&img, b"");
            let mut mutated = img.clone();
            let i = pos % mutated.len();
            mutated[i] ^= 1 << bit;
            let prim = AttestPrim::new(vec![honest], p.root_key());
            // Mutations that still parse as a registered program get a quote;
            // the rest cannot even be installed.
            if let Ok(e) = h.install(&mutated, b"") {
                let nonce = [3u8; 32];
                let out = h.resume(e.eid, &ProbeCmd::Quote { nonce, data: vec![] }.encode()).unwrap().output;
                let q = Quote::from_bytes(&out).unwrap();
                prop_assert!(!verify_quote(&prim, &q, &nonce));
            }
        }
    }
}
