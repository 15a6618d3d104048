//! Attested key delivery: challenge nonce, evidence whose report data is the
//! enclave's ephemeral X25519 key, then a payload sealed under a key agreed
//! with that ephemeral key.

use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::RngCore;
use sha2::Sha256;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::enclave::{verify_quote, AttestPrim, EnclaveCtx, Measurement, Quote, Report};
use crate::envelope::{self, Sealed, SymmetricKey};
use crate::wire::{DecodeError, Reader, Writer};

const TAG_CHALLENGE: u8 = 0x30;
const TAG_EVIDENCE: u8 = 0x31;
const TAG_DELIVERY: u8 = 0x32;

/// Which handshake a challenge belongs to. The label is mixed into the
/// channel key so deliveries cannot be moved between stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Stage {
    /// Provider attests a freshly booted enclave before releasing the app key.
    High = 1,
    /// Provider attests the running coordinator before releasing attributes.
    Mid = 2,
    /// Coordinator attests a booted aggregator enclave.
    Aggregator = 3,
}

impl Stage {
    pub fn from_u8(b: u8) -> Option<Self> {
        match b {
            1 => Some(Stage::High),
            2 => Some(Stage::Mid),
            3 => Some(Stage::Aggregator),
            _ => None,
        }
    }

    fn label(self) -> &'static [u8] {
        match self {
            Stage::High => b"high",
            Stage::Mid => b"mid",
            Stage::Aggregator => b"aggregator",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvidenceMode {
    Quote,
    LocalReport,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Challenge {
    pub stage: Stage,
    pub mode: EvidenceMode,
    pub nonce: [u8; 32],
}

impl Challenge {
    pub fn fresh(stage: Stage, mode: EvidenceMode) -> Self {
        let mut nonce = [0u8; 32];
        OsRng.fill_bytes(&mut nonce);
        Challenge { stage, mode, nonce }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_CHALLENGE);
        w.u8(self.stage as u8)
            .u8(matches!(self.mode, EvidenceMode::LocalReport) as u8)
            .raw(&self.nonce);
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_tag("challenge", TAG_CHALLENGE)?;
        let stage = Stage::from_u8(r.u8("stage")?).ok_or(DecodeError::Invalid("stage"))?;
        let mode = match r.u8("mode")? {
            0 => EvidenceMode::Quote,
            1 => EvidenceMode::LocalReport,
            _ => return Err(DecodeError::Invalid("evidence mode")),
        };
        let nonce = r.array("nonce")?;
        r.finish()?;
        Ok(Challenge { stage, mode, nonce })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Evidence {
    Quote(Quote),
    Local(Report),
}

impl Evidence {
    pub fn measurement(&self) -> Measurement {
        match self {
            Evidence::Quote(q) => q.body.measurement,
            Evidence::Local(r) => r.body.measurement,
        }
    }

    pub fn nonce(&self) -> [u8; 32] {
        match self {
            Evidence::Quote(q) => q.body.nonce,
            Evidence::Local(r) => r.body.nonce,
        }
    }

    /// The ephemeral key bound into the report data.
    pub fn channel_key(&self) -> Option<[u8; 32]> {
        let data = match self {
            Evidence::Quote(q) => &q.body.report_data,
            Evidence::Local(r) => &r.body.report_data,
        };
        data.as_slice().try_into().ok()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_EVIDENCE);
        match self {
            Evidence::Quote(q) => w.u8(0).bytes(&q.to_bytes()),
            Evidence::Local(r) => w.u8(1).bytes(&r.to_bytes()),
        };
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_tag("evidence", TAG_EVIDENCE)?;
        let e = match r.u8("evidence kind")? {
            0 => Evidence::Quote(Quote::from_bytes(r.bytes("quote")?)?),
            1 => Evidence::Local(Report::from_bytes(r.bytes("report")?)?),
            t => return Err(DecodeError::Tag { what: "evidence kind", tag: t }),
        };
        r.finish()?;
        Ok(e)
    }
}

/// Verifier-side check of remote evidence: valid quote for `challenge` and
/// an ephemeral key in the report data.
pub fn check_quote(prim: &AttestPrim, challenge: &Challenge, ev: &Evidence) -> Option<[u8; 32]> {
    match ev {
        Evidence::Quote(q) if verify_quote(prim, q, &challenge.nonce) => ev.channel_key(),
        _ => None,
    }
}

/// Enclave-side check of same-host evidence.
pub fn check_local(
    ctx: &EnclaveCtx<'_>,
    expected: &[Measurement],
    challenge: &Challenge,
    ev: &Evidence,
) -> Option<[u8; 32]> {
    match ev {
        Evidence::Local(r)
            if ctx.verify_local_report(r)
                && expected.contains(&r.body.measurement)
                && r.body.nonce == challenge.nonce =>
        {
            ev.channel_key()
        }
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub sender_key: [u8; 32],
    pub sealed: Sealed,
}

impl Delivery {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_DELIVERY);
        w.raw(&self.sender_key).bytes(&self.sealed.to_bytes());
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_tag("delivery", TAG_DELIVERY)?;
        let sender_key = r.array("sender key")?;
        let sealed = Sealed::from_bytes(r.bytes("sealed")?)?;
        r.finish()?;
        Ok(Delivery { sender_key, sealed })
    }
}

fn derive(shared: &[u8; 32], challenge: &Challenge, a: &[u8; 32], b: &[u8; 32]) -> SymmetricKey {
    let hk = Hkdf::<Sha256>::new(Some(&challenge.nonce), shared);
    let mut info = b"latteo-ratls-".to_vec();
    info.extend_from_slice(challenge.stage.label());
    info.extend_from_slice(a);
    info.extend_from_slice(b);
    let mut okm = [0u8; 32];
    hk.expand(&info, &mut okm).expect("valid HKDF length");
    SymmetricKey::from_bytes(okm)
}

/// Seals `payload` to the attested enclave's ephemeral key.
pub fn deliver(challenge: &Challenge, enclave_key: &[u8; 32], payload: &[u8]) -> Delivery {
    let eph = StaticSecret::random_from_rng(OsRng);
    let sender_key = PublicKey::from(&eph).to_bytes();
    let shared = eph.diffie_hellman(&PublicKey::from(*enclave_key)).to_bytes();
    let key = derive(&shared, challenge, enclave_key, &sender_key);
    Delivery {
        sender_key,
        sealed: envelope::seal(&key, payload),
    }
}

/// Enclave side of one handshake; lives in enclave memory.
pub struct PendingChannel {
    challenge: Challenge,
    secret: StaticSecret,
    public: [u8; 32],
}

impl PendingChannel {
    /// Answers `challenge` with evidence carrying a fresh ephemeral key.
    pub fn respond(ctx: &EnclaveCtx<'_>, challenge: Challenge) -> Option<(Self, Evidence)> {
        let secret = StaticSecret::random_from_rng(OsRng);
        let public = PublicKey::from(&secret).to_bytes();
        let report = ctx.report(&public, challenge.nonce);
        let ev = match challenge.mode {
            EvidenceMode::LocalReport => Evidence::Local(report),
            EvidenceMode::Quote => Evidence::Quote(ctx.quote(&report).ok()?),
        };
        Some((
            PendingChannel {
                challenge,
                secret,
                public,
            },
            ev,
        ))
    }

    pub fn stage(&self) -> Stage {
        self.challenge.stage
    }

    pub fn open(&self, d: &Delivery) -> Option<Vec<u8>> {
        let shared = self
            .secret
            .diffie_hellman(&PublicKey::from(d.sender_key))
            .to_bytes();
        let key = derive(&shared, &self.challenge, &self.public, &d.sender_key);
        envelope::open(&key, &d.sealed).ok()
    }
}
