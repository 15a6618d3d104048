//! Service setup and enclave onboarding.
//!
//! The provider ships each server a signed package: a plaintext boot loader,
//! the real application encrypted under an app key, and a signed app
//! structure. The loader is attested before the app key is released. The
//! coordinator is then attested a second time, running the decrypted
//! application, before it receives attribute keys. That second check is
//! what defeats swapping the enclave between the two handshakes.
//! Aggregators are attested by their coordinator and provisioned over an
//! inter-enclave channel.

pub mod apps;
pub mod link;
pub mod provider;
pub mod ratls;
pub mod server;

use latteo_transport::TransportError;
use rand::rngs::OsRng;
use rand::RngCore;

use crate::abe::AbeError;
use crate::enclave::{program_image, EnclaveError, ProgramRegistry};
use crate::envelope::{self, Certificate, EnvelopeError, SignedMessage, SigningKey};
use crate::wire::{DecodeError, Reader, Writer};

pub use apps::AppCmd;
pub use link::{InProcessLink, Link, LinkEvent};
pub use provider::{
    KeyRelease, Provider, ProviderConfig, ProviderSecrets, Registration, RegistrationTuple,
    ReleasedKey,
};
pub use server::{
    onboard_aggregator, onboard_coordinator, CoordinatorHost, HostBehavior, OnboardingSession,
    Phase,
};

const TAG_APP_STRUCTURE: u8 = 0x50;
const TAG_PACKAGE: u8 = 0x51;

/// The boot loader always runs under this manifest, so its measurement
/// depends only on the provider key baked into it.
pub const BOOT_MANIFEST: &[u8] = b"app=boot\n";

pub const BOOT_PROGRAM: &str = "latteo.boot";
pub const COORDINATOR_PROGRAM: &str = "latteo.coordinator";
pub const AGGREGATOR_PROGRAM: &str = "latteo.aggregator";
/// Stand-ins for attacker-controlled code used in swap scenarios.
pub const ROGUE_COORDINATOR_PROGRAM: &str = "rogue.coordinator";
pub const ROGUE_AGGREGATOR_PROGRAM: &str = "rogue.aggregator";

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error(transparent)]
    Abe(#[from] AbeError),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("package signature invalid")]
    PackageSignature,
    #[error("onboarding failed: {0}")]
    Onboarding(String),
}

/// Boot loader image. Its body is the provider verifying key, which the
/// loader uses to check app structures.
pub fn boot_image(provider_vk: &[u8; 32]) -> Vec<u8> {
    program_image(BOOT_PROGRAM, provider_vk)
}

pub fn coordinator_image() -> Vec<u8> {
    program_image(COORDINATOR_PROGRAM, b"coordinator v1")
}

pub fn aggregator_image() -> Vec<u8> {
    program_image(AGGREGATOR_PROGRAM, b"aggregator v1")
}

pub fn rogue_coordinator_image() -> Vec<u8> {
    program_image(ROGUE_COORDINATOR_PROGRAM, b"coordinator v1")
}

pub fn rogue_aggregator_image() -> Vec<u8> {
    program_image(ROGUE_AGGREGATOR_PROGRAM, b"aggregator v1")
}

/// Every program a mesh server can host, honest and rogue.
pub fn registry() -> ProgramRegistry {
    let mut r = ProgramRegistry::new();
    r.register(BOOT_PROGRAM, apps::BootApp::construct)
        .register(COORDINATOR_PROGRAM, apps::CoorApp::construct)
        .register(AGGREGATOR_PROGRAM, crate::agg::AggApp::construct)
        .register(ROGUE_COORDINATOR_PROGRAM, apps::RogueApp::construct)
        .register(ROGUE_AGGREGATOR_PROGRAM, apps::RogueApp::construct);
    r
}

/// `key=value` lines; the first occurrence of a key wins.
pub fn manifest_value<'a>(manifest: &'a [u8], key: &str) -> Option<&'a str> {
    std::str::from_utf8(manifest)
        .ok()?
        .lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
}

/// Manifest plus a random token, signed by the provider.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppStructure {
    pub manifest: Vec<u8>,
    pub token: [u8; 16],
    pub signature: [u8; 64],
}

impl AppStructure {
    pub fn new(sk: &SigningKey, manifest: &[u8]) -> Self {
        let mut token = [0u8; 16];
        OsRng.fill_bytes(&mut token);
        AppStructure {
            manifest: manifest.to_vec(),
            token,
            signature: sk.sign(&Self::signed_body(manifest, &token)),
        }
    }

    fn signed_body(manifest: &[u8], token: &[u8; 16]) -> Vec<u8> {
        [manifest, token].concat()
    }

    pub fn verify(&self, provider_vk: &[u8; 32]) -> bool {
        envelope::verify(
            provider_vk,
            &Self::signed_body(&self.manifest, &self.token),
            &self.signature,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_APP_STRUCTURE);
        w.bytes(&self.manifest).raw(&self.token).raw(&self.signature);
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_tag("app structure", TAG_APP_STRUCTURE)?;
        let manifest = r.bytes("manifest")?.to_vec();
        let token = r.array("token")?;
        let signature = r.array("signature")?;
        r.finish()?;
        Ok(AppStructure {
            manifest,
            token,
            signature,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PackageKind {
    Coordinator = 1,
    Aggregator = 2,
}

/// The signed bundle handed to a server: boot loader, encrypted app and
/// app structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Package {
    pub kind: PackageKind,
    pub boot_app: Vec<u8>,
    pub enc_app: Vec<u8>,
    pub structure: AppStructure,
}

impl Package {
    pub fn to_body(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_PACKAGE);
        w.u8(self.kind as u8)
            .bytes(&self.boot_app)
            .bytes(&self.enc_app)
            .bytes(&self.structure.to_bytes());
        w.finish()
    }

    pub fn from_body(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_tag("package", TAG_PACKAGE)?;
        let kind = match r.u8("package kind")? {
            1 => PackageKind::Coordinator,
            2 => PackageKind::Aggregator,
            t => return Err(DecodeError::Tag { what: "package kind", tag: t }),
        };
        let boot_app = r.bytes("boot app")?.to_vec();
        let enc_app = r.bytes("encrypted app")?.to_vec();
        let structure = AppStructure::from_bytes(r.bytes("app structure")?)?;
        r.finish()?;
        Ok(Package {
            kind,
            boot_app,
            enc_app,
            structure,
        })
    }

    pub fn sign(&self, sk: &SigningKey, cert: &Certificate) -> SignedMessage {
        SignedMessage::sign(sk, cert.clone(), self.to_body())
    }

    /// Checks the provider signature and decodes.
    pub fn open_signed(msg: &SignedMessage, provider_vk: &[u8; 32]) -> Result<Self, MeshError> {
        if &msg.signer.verifying_key != provider_vk || !msg.verify_signature() {
            return Err(MeshError::PackageSignature);
        }
        Ok(Package::from_body(&msg.body)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lookup() {
        let m = b"app=aggregator\nclients = 4\nclients=9\n";
        assert_eq!(manifest_value(m, "clients"), Some("4"));
        assert_eq!(manifest_value(m, "app"), Some("aggregator"));
        assert_eq!(manifest_value(m, "strict"), None);
        assert_eq!(manifest_value(&[0xff, b'='], "x"), None);
    }

    #[test]
    fn app_structure_signature_covers_manifest_and_token() {
        let sk = SigningKey::generate();
        let vk = sk.verifying_key();
        let s = AppStructure::new(&sk, b"app=coordinator\n");
        assert!(s.verify(&vk));
        let back = AppStructure::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        let mut t = s.clone();
        t.token[0] ^= 1;
        assert!(!t.verify(&vk));
        let mut t = s.clone();
        t.manifest.push(b'x');
        assert!(!t.verify(&vk));
        assert!(!s.verify(&SigningKey::generate().verifying_key()));
        // Two structures over the same manifest are distinct instances.
        assert_ne!(AppStructure::new(&sk, b"m").token, AppStructure::new(&sk, b"m").token);
    }

    #[test]
    fn package_signature_rejects_other_signers_and_tampering() {
        let sk = SigningKey::generate();
        let cert = Certificate::self_signed("provider", &sk);
        let p = Package {
            kind: PackageKind::Coordinator,
            boot_app: boot_image(&sk.verifying_key()),
            enc_app: vec![1, 2, 3],
            structure: AppStructure::new(&sk, b"app=coordinator\n"),
        };
        let msg = p.sign(&sk, &cert);
        assert_eq!(Package::open_signed(&msg, &sk.verifying_key()).unwrap(), p);

        let mut bad = msg.clone();
        let n = bad.body.len();
        bad.body[n - 70] ^= 1;
        assert!(matches!(
            Package::open_signed(&bad, &sk.verifying_key()),
            Err(MeshError::PackageSignature)
        ));

        let other = SigningKey::generate();
        let forged = p.sign(&other, &Certificate::self_signed("provider", &other));
        assert!(Package::open_signed(&forged, &sk.verifying_key()).is_err());
    }
}
