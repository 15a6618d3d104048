//! Server-side drivers: the untrusted host software that installs enclaves
//! and relays attestation traffic. Host misbehaviour is injected through
//! [`HostBehavior`].

use std::sync::atomic::{AtomicU64, Ordering};

use latteo_transport::tcp::Handler;
use latteo_transport::{Frame, MsgType, SessionInfo};

use crate::enclave::{EnclaveHandle, TeeHost};
use crate::envelope::SignedMessage;

use super::apps::{AppCmd, AppOutput};
use super::link::Link;
use super::provider::COORDINATOR_MANIFEST;
use super::ratls::{Challenge, Delivery, Evidence, EvidenceMode, Stage};
use super::{rogue_aggregator_image, rogue_coordinator_image, Package, PackageKind, BOOT_MANIFEST};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    PackageSent,
    EnclaveBooted,
    HighRa,
    CoorRunning,
    MidRa,
    AggAttested,
    Provisioned,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostBehavior {
    Honest,
    /// A byte of the package is corrupted in transit.
    TamperPackage,
    /// After the app key is delivered, the coordinator enclave is replaced by
    /// rogue code before the second attestation.
    SwapCoordinatorBeforeMidRa,
    /// Rogue code is installed in place of the aggregator boot loader.
    SwapAggregator,
    /// Recorded evidence is sent instead of fresh evidence at the last
    /// attestation step.
    ReplayEvidence(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TranscriptEntry {
    ToPeer(Frame),
    FromPeer(Frame),
    PeerDropped,
    EnclaveIn(Vec<u8>),
    EnclaveOut(Vec<u8>),
}

impl TranscriptEntry {
    pub fn bytes(&self) -> &[u8] {
        match self {
            TranscriptEntry::ToPeer(f) | TranscriptEntry::FromPeer(f) => &f.payload,
            TranscriptEntry::PeerDropped => &[],
            TranscriptEntry::EnclaveIn(b) | TranscriptEntry::EnclaveOut(b) => b,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OnboardingSession {
    phase: Phase,
    history: Vec<Phase>,
    pub transcript: Vec<TranscriptEntry>,
    pub handle: Option<EnclaveHandle>,
    pub cluster_id: Option<String>,
    /// Evidence the enclave produced at the last attestation step.
    pub last_evidence: Option<Vec<u8>>,
    /// Whether the coordinator chose the same-host report path.
    pub local_attestation: Option<bool>,
}

impl OnboardingSession {
    fn new() -> Self {
        OnboardingSession {
            phase: Phase::PackageSent,
            history: vec![Phase::PackageSent],
            transcript: Vec::new(),
            handle: None,
            cluster_id: None,
            last_evidence: None,
            local_attestation: None,
        }
    }

    pub fn phase(&self) -> &Phase {
        &self.phase
    }

    /// Every phase entered, in order.
    pub fn history(&self) -> &[Phase] {
        &self.history
    }

    pub fn is_provisioned(&self) -> bool {
        self.phase == Phase::Provisioned
    }

    pub fn failure(&self) -> Option<&str> {
        match &self.phase {
            Phase::Failed(r) => Some(r),
            _ => None,
        }
    }

    /// Phases only move forward; a failed session stays failed.
    fn advance(&mut self, next: Phase) {
        if matches!(self.phase, Phase::Failed(_)) {
            return;
        }
        assert!(next > self.phase, "phase {:?} after {:?}", next, self.phase);
        self.history.push(next.clone());
        self.phase = next;
    }

    fn fail(mut self, reason: impl Into<String>) -> Self {
        self.advance(Phase::Failed(reason.into()));
        self
    }

    fn exchange(&mut self, link: &mut dyn Link, f: Frame) -> Result<Frame, String> {
        self.transcript.push(TranscriptEntry::ToPeer(f.clone()));
        match link.exchange(f) {
            Ok(r) => {
                self.transcript.push(TranscriptEntry::FromPeer(r.clone()));
                Ok(r)
            }
            Err(e) => {
                self.transcript.push(TranscriptEntry::PeerDropped);
                Err(format!("connection dropped: {e}"))
            }
        }
    }

    fn step(&mut self, host: &TeeHost, cmd: &AppCmd) -> Result<AppOutput, String> {
        let eid = self.handle.as_ref().ok_or("no enclave")?.eid;
        let input = cmd.to_bytes();
        self.transcript.push(TranscriptEntry::EnclaveIn(input.clone()));
        let out = host.resume(eid, &input).map_err(|e| e.to_string())?.output;
        self.transcript.push(TranscriptEntry::EnclaveOut(out.clone()));
        match AppOutput::from_bytes(&out) {
            Ok(AppOutput::Reject(r)) => Err(format!("enclave rejected: {r}")),
            Ok(o) => Ok(o),
            Err(e) => Err(format!("malformed enclave output: {e}")),
        }
    }

    fn fetch_package(
        &mut self,
        link: &mut dyn Link,
        kind: PackageKind,
        provider_vk: &[u8; 32],
        behavior: &HostBehavior,
    ) -> Result<Package, String> {
        let t = match kind {
            PackageKind::Coordinator => MsgType::PackageCoor,
            PackageKind::Aggregator => MsgType::PackageAgg,
        };
        let reply = self.exchange(link, Frame::new(t, Vec::new()))?;
        let mut msg = SignedMessage::from_bytes(&reply.payload).map_err(|e| e.to_string())?;
        if *behavior == HostBehavior::TamperPackage {
            let i = msg.body.len() / 2;
            msg.body[i] ^= 0x01;
        }
        let pkg = Package::open_signed(&msg, provider_vk).map_err(|e| e.to_string())?;
        if pkg.kind != kind {
            return Err("package of the wrong kind".into());
        }
        Ok(pkg)
    }

    fn install_and_load(&mut self, host: &TeeHost, image: &[u8], manifest: &[u8], pkg: &Package) -> Result<(), String> {
        let h = host.install(image, manifest).map_err(|e| e.to_string())?;
        self.handle = Some(h);
        match self.step(
            host,
            &AppCmd::Load {
                enc_app: pkg.enc_app.clone(),
                structure: pkg.structure.clone(),
            },
        )? {
            AppOutput::Loaded => Ok(()),
            o => Err(format!("unexpected output {o:?}")),
        }
    }

    /// Relays one challenge to the enclave and returns the evidence to send
    /// (possibly substituted by a replay).
    fn evidence_for(&mut self, host: &TeeHost, ch: Challenge, replay: Option<&Vec<u8>>) -> Result<Vec<u8>, String> {
        let AppOutput::Evidence(ev) = self.step(host, &AppCmd::RaChallenge(ch))? else {
            return Err("enclave produced no evidence".into());
        };
        let fresh = ev.to_bytes();
        self.last_evidence = Some(fresh.clone());
        Ok(replay.cloned().unwrap_or(fresh))
    }

    fn deliver(&mut self, host: &TeeHost, reply: &Frame) -> Result<AppOutput, String> {
        if reply.msg_type != MsgType::KeyDelivery {
            return Err(format!("expected key delivery, got {}", reply.msg_type));
        }
        let d = Delivery::from_bytes(&reply.payload).map_err(|e| e.to_string())?;
        self.step(host, &AppCmd::RaDelivery(d))
    }
}

fn replay_of(behavior: &HostBehavior) -> Option<&Vec<u8>> {
    match behavior {
        HostBehavior::ReplayEvidence(e) => Some(e),
        _ => None,
    }
}

fn challenge_from(reply: &Frame) -> Result<Challenge, String> {
    if reply.msg_type != MsgType::AttestChallenge {
        return Err(format!("expected challenge, got {}", reply.msg_type));
    }
    Challenge::from_bytes(&reply.payload).map_err(|e| e.to_string())
}

/// Boots a coordinator enclave on `host` and runs both attestation stages
/// against the provider behind `provider`.
pub fn onboard_coordinator(
    host: &TeeHost,
    provider: &mut dyn Link,
    provider_vk: &[u8; 32],
    behavior: HostBehavior,
) -> OnboardingSession {
    let mut s = OnboardingSession::new();
    match run_coordinator(&mut s, host, provider, provider_vk, &behavior) {
        Ok(()) => s,
        Err(reason) => s.fail(reason),
    }
}

fn run_coordinator(
    s: &mut OnboardingSession,
    host: &TeeHost,
    link: &mut dyn Link,
    provider_vk: &[u8; 32],
    behavior: &HostBehavior,
) -> Result<(), String> {
    let pkg = s.fetch_package(link, PackageKind::Coordinator, provider_vk, behavior)?;
    s.install_and_load(host, &pkg.boot_app, BOOT_MANIFEST, &pkg)?;
    s.advance(Phase::EnclaveBooted);

    let ch = challenge_from(&s.exchange(link, Frame::new(MsgType::AttestChallenge, vec![Stage::High as u8]))?)?;
    let ev = s.evidence_for(host, ch, None)?;
    let reply = s
        .exchange(link, Frame::new(MsgType::AttestQuote, ev))
        .map_err(|e| format!("high-level attestation rejected ({e})"))?;
    s.advance(Phase::HighRa);
    match s.deliver(host, &reply)? {
        AppOutput::Launched => s.advance(Phase::CoorRunning),
        o => return Err(format!("unexpected output {o:?}")),
    }

    if *behavior == HostBehavior::SwapCoordinatorBeforeMidRa {
        let old = s.handle.take().expect("installed").eid;
        host.destroy(old);
        s.install_and_load(host, &rogue_coordinator_image(), COORDINATOR_MANIFEST, &pkg)?;
    }

    let ch = challenge_from(&s.exchange(link, Frame::new(MsgType::AttestChallenge, vec![Stage::Mid as u8]))?)?;
    let ev = s.evidence_for(host, ch, replay_of(behavior))?;
    let reply = s
        .exchange(link, Frame::new(MsgType::AttestQuote, ev))
        .map_err(|e| format!("mid-level attestation rejected ({e})"))?;
    s.advance(Phase::MidRa);
    match s.deliver(host, &reply)? {
        AppOutput::Provisioned { cluster_id } => {
            s.cluster_id = Some(cluster_id);
            s.advance(Phase::Provisioned);
            Ok(())
        }
        o => Err(format!("unexpected output {o:?}")),
    }
}

/// Boots an aggregator enclave on `host`: package from the provider,
/// attestation and provisioning by the coordinator behind `coordinator`.
pub fn onboard_aggregator(
    host: &TeeHost,
    provider: &mut dyn Link,
    coordinator: &mut dyn Link,
    provider_vk: &[u8; 32],
    behavior: HostBehavior,
) -> OnboardingSession {
    let mut s = OnboardingSession::new();
    match run_aggregator(&mut s, host, provider, coordinator, provider_vk, &behavior) {
        Ok(()) => s,
        Err(reason) => s.fail(reason),
    }
}

fn run_aggregator(
    s: &mut OnboardingSession,
    host: &TeeHost,
    provider: &mut dyn Link,
    coordinator: &mut dyn Link,
    provider_vk: &[u8; 32],
    behavior: &HostBehavior,
) -> Result<(), String> {
    let pkg = s.fetch_package(provider, PackageKind::Aggregator, provider_vk, behavior)?;
    if *behavior == HostBehavior::SwapAggregator {
        s.install_and_load(host, &rogue_aggregator_image(), &pkg.structure.manifest, &pkg)?;
    } else {
        s.install_and_load(host, &pkg.boot_app, BOOT_MANIFEST, &pkg)?;
    }
    s.advance(Phase::EnclaveBooted);

    let claim = Frame::new(MsgType::AttestChallenge, host.host_id().as_bytes().to_vec());
    let ch = challenge_from(&s.exchange(coordinator, claim)?)?;
    s.local_attestation = Some(ch.mode == EvidenceMode::LocalReport);
    let ev = s.evidence_for(host, ch, replay_of(behavior))?;
    let reply = s
        .exchange(coordinator, Frame::new(MsgType::AttestQuote, ev))
        .map_err(|e| format!("aggregator attestation rejected ({e})"))?;
    s.advance(Phase::AggAttested);
    match s.deliver(host, &reply)? {
        AppOutput::Launched => {}
        o => return Err(format!("unexpected output {o:?}")),
    }
    let eid = s.handle.as_ref().expect("installed").eid;
    let status = crate::agg::AggregatorHost::new(host.clone(), eid)
        .status()
        .map_err(|e| format!("aggregator not running: {e}"))?;
    s.cluster_id = Some(status.cluster_id);
    s.advance(Phase::Provisioned);
    Ok(())
}

/// Host software around a provisioned coordinator enclave; serves
/// aggregator attestation requests.
pub struct CoordinatorHost {
    host: TeeHost,
    handle: EnclaveHandle,
    releases: AtomicU64,
}

impl CoordinatorHost {
    pub fn new(host: TeeHost, handle: EnclaveHandle) -> Self {
        CoordinatorHost {
            host,
            handle,
            releases: AtomicU64::new(0),
        }
    }

    pub fn handle(&self) -> &EnclaveHandle {
        &self.handle
    }

    /// Key deliveries that left the coordinator enclave.
    pub fn releases(&self) -> u64 {
        self.releases.load(Ordering::SeqCst)
    }

    fn step(&self, cmd: &AppCmd) -> Option<AppOutput> {
        let out = self.host.resume(self.handle.eid, &cmd.to_bytes()).ok()?;
        AppOutput::from_bytes(&out.output).ok()
    }
}

impl Handler for CoordinatorHost {
    fn handle(&self, _: &SessionInfo, frame: Frame) -> Option<Frame> {
        match frame.msg_type {
            MsgType::AttestChallenge => {
                let claimed_host = String::from_utf8(frame.payload).ok()?;
                match self.step(&AppCmd::AggChallenge { claimed_host })? {
                    AppOutput::Challenge(c) => Some(Frame::new(MsgType::AttestChallenge, c.to_bytes())),
                    _ => None,
                }
            }
            MsgType::AttestQuote => {
                let ev = Evidence::from_bytes(&frame.payload).ok()?;
                match self.step(&AppCmd::AggEvidence(ev))? {
                    AppOutput::Release(d) => {
                        self.releases.fetch_add(1, Ordering::SeqCst);
                        Some(Frame::new(MsgType::KeyDelivery, d.to_bytes()))
                    }
                    _ => None,
                }
            }
            _ => None,
        }
    }
}
