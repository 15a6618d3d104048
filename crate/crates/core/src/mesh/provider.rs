//! The service provider: authority keys, signed packages, the two-stage
//! coordinator attestation and user registration.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use latteo_transport::tcp::Handler;
use latteo_transport::{Frame, MsgType, SessionInfo};
use rand::rngs::OsRng;
use rand::RngCore;

use crate::abe::{self, AttributeKeySet, AuthorityPublicKey, MasterKeyPair, Policy};
use crate::enclave::{measure, AttestPrim, Measurement};
use crate::envelope::{self, gen_symmetric_key, issue_cert, Certificate, SignedMessage, SigningKey, SymmetricKey};
use crate::wire::{DecodeError, Reader, Writer};

use super::apps::CoorProvisioning;
use super::ratls::{self, Challenge, Evidence, EvidenceMode, Stage};
use super::{boot_image, AppStructure, MeshError, Package, PackageKind, BOOT_MANIFEST};

const TAG_REG_REQUEST: u8 = 0x53;
const TAG_REG_TUPLE: u8 = 0x54;
const TAG_REGISTRATION: u8 = 0x55;

#[derive(Debug, Clone)]
pub struct ProviderConfig {
    pub identity: String,
    /// Attribute universe of the provider's authority.
    pub attributes: Vec<String>,
    /// Attributes granted to every coordinator cluster.
    pub granted: Vec<String>,
    /// Policy clients encrypt their request keys under.
    pub aggregator_policy: Policy,
    pub security_bits: u32,
    /// Client count used by the update rule.
    pub clients: usize,
    pub initial_weights: Vec<f64>,
    /// Reject updates whose base weights are not a past global version.
    pub strict_history: bool,
    /// Root key of the only trusted enclave platform.
    pub platform_root: [u8; 32],
}

impl ProviderConfig {
    /// Two attributes, both granted, both required.
    pub fn simple(platform_root: [u8; 32], clients: usize, initial_weights: Vec<f64>) -> Self {
        ProviderConfig {
            identity: "provider".into(),
            attributes: vec!["agg".into(), "latteo".into()],
            granted: vec!["agg".into(), "latteo".into()],
            aggregator_policy: Policy::and(vec![Policy::leaf("agg"), Policy::leaf("latteo")]),
            security_bits: 128,
            clients,
            initial_weights,
            strict_history: false,
            platform_root,
        }
    }

    fn aggregator_manifest(&self) -> Vec<u8> {
        format!(
            "app=aggregator\nclients={}\nstrict={}\n",
            self.clients, self.strict_history as u8
        )
        .into_bytes()
    }
}

pub const COORDINATOR_MANIFEST: &[u8] = b"app=coordinator\n";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReleasedKey {
    CoordinatorAppKey,
    ClusterKeys { cluster_id: String },
}

/// Audit record of a secret leaving the provider.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyRelease {
    pub session_id: u64,
    pub measurement: Measurement,
    pub key: ReleasedKey,
}

#[derive(Debug, Clone)]
pub struct ProviderSecrets {
    pub coordinator_app_key: [u8; 32],
    pub aggregator_app_key: [u8; 32],
    /// Secrets behind the granted attributes.
    pub attribute_keys: Vec<[u8; 32]>,
}

#[derive(Default)]
struct Session {
    high: Option<Challenge>,
    high_done: bool,
    mid: Option<Challenge>,
}

pub struct Provider {
    config: ProviderConfig,
    master: MasterKeyPair,
    signing_key: SigningKey,
    cert: Certificate,
    coor_app_key: SymmetricKey,
    agg_app_key: SymmetricKey,
    enc_coor_app: Vec<u8>,
    enc_agg_app: Vec<u8>,
    boot_app: Vec<u8>,
    coor_structure: AppStructure,
    agg_structure: AppStructure,
    prim: AttestPrim,
    sessions: Mutex<HashMap<u64, Session>>,
    server_table: Mutex<BTreeMap<String, AttributeKeySet>>,
    releases: Mutex<Vec<KeyRelease>>,
}

impl Provider {
    /// Generates authority and signing keys, encrypts both applications and
    /// signs their structures.
    pub fn setup(config: ProviderConfig, coor_app: &[u8], agg_app: &[u8]) -> Result<Self, MeshError> {
        if coor_app.is_empty() || agg_app.is_empty() {
            return Err(MeshError::Config("applications must be non-empty".into()));
        }
        if config.clients == 0 {
            return Err(MeshError::Config("client count must be positive".into()));
        }
        if config.initial_weights.is_empty() || config.initial_weights.iter().any(|w| !w.is_finite()) {
            return Err(MeshError::Config("initial weights must be finite and non-empty".into()));
        }
        let names: Vec<&str> = config.attributes.iter().map(String::as_str).collect();
        let master = abe::setup(config.security_bits, &names)?;
        // Fail now rather than at the first coordinator.
        abe::keygen(&master.secret, "probe", &granted(&config))?;
        config.aggregator_policy.validate().map_err(abe::AbeError::from)?;

        let signing_key = SigningKey::generate();
        let cert = Certificate::self_signed(&config.identity, &signing_key);
        let coor_app_key = gen_symmetric_key();
        let mut agg_app_key = gen_symmetric_key();
        while agg_app_key == coor_app_key {
            agg_app_key = gen_symmetric_key();
        }
        let boot_app = boot_image(&signing_key.verifying_key());
        let coor_structure = AppStructure::new(&signing_key, COORDINATOR_MANIFEST);
        let agg_structure = AppStructure::new(&signing_key, &config.aggregator_manifest());
        let prim = AttestPrim::new(
            vec![
                measure(&boot_app, BOOT_MANIFEST),
                measure(coor_app, &coor_structure.manifest),
                measure(agg_app, &agg_structure.manifest),
            ],
            config.platform_root,
        );
        Ok(Provider {
            enc_coor_app: envelope::seal(&coor_app_key, coor_app).to_bytes(),
            enc_agg_app: envelope::seal(&agg_app_key, agg_app).to_bytes(),
            config,
            master,
            signing_key,
            cert,
            coor_app_key,
            agg_app_key,
            boot_app,
            coor_structure,
            agg_structure,
            prim,
            sessions: Mutex::default(),
            server_table: Mutex::default(),
            releases: Mutex::default(),
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn verifying_key(&self) -> [u8; 32] {
        self.signing_key.verifying_key()
    }

    pub fn root_cert(&self) -> &Certificate {
        &self.cert
    }

    /// Expected measurements of boot loader, coordinator and aggregator.
    pub fn attest_prim(&self) -> &AttestPrim {
        &self.prim
    }

    pub fn boot_measurement(&self) -> Measurement {
        self.prim.expected[0]
    }

    pub fn coordinator_measurement(&self) -> Measurement {
        self.prim.expected[1]
    }

    pub fn aggregator_measurement(&self) -> Measurement {
        self.prim.expected[2]
    }

    pub fn retrieve_mpks(&self) -> Vec<AuthorityPublicKey> {
        vec![self.master.public.clone()]
    }

    pub fn package_coordinator(&self) -> SignedMessage {
        self.package(PackageKind::Coordinator)
    }

    pub fn package_aggregator(&self) -> SignedMessage {
        self.package(PackageKind::Aggregator)
    }

    fn package(&self, kind: PackageKind) -> SignedMessage {
        let (enc_app, structure) = match kind {
            PackageKind::Coordinator => (&self.enc_coor_app, &self.coor_structure),
            PackageKind::Aggregator => (&self.enc_agg_app, &self.agg_structure),
        };
        Package {
            kind,
            boot_app: self.boot_app.clone(),
            enc_app: enc_app.clone(),
            structure: structure.clone(),
        }
        .sign(&self.signing_key, &self.cert)
    }

    /// Cluster ids with the attribute names granted to each.
    pub fn server_table(&self) -> Vec<(String, Vec<String>)> {
        self.server_table
            .lock()
            .unwrap()
            .iter()
            .map(|(e, ks)| (e.clone(), ks.names().iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    /// Every secret this provider can hand out, for scanning host-visible
    /// bytes for leaks.
    pub fn audit_secrets(&self) -> ProviderSecrets {
        let attribute_keys = abe::keygen(&self.master.secret, "audit", &granted(&self.config))
            .map(|ks| ks.keys.iter().map(|k| k.secret_bytes()).collect())
            .unwrap_or_default();
        ProviderSecrets {
            coordinator_app_key: *self.coor_app_key.as_bytes(),
            aggregator_app_key: *self.agg_app_key.as_bytes(),
            attribute_keys,
        }
    }

    pub fn releases(&self) -> Vec<KeyRelease> {
        self.releases.lock().unwrap().clone()
    }

    /// Open registration: certifies `user_vk` for `identity` and signs the
    /// public parameters a client needs.
    pub fn register_user(&self, identity: &str, user_vk: &[u8; 32]) -> Registration {
        let tuple = RegistrationTuple {
            identity: identity.to_string(),
            attributes: self.config.attributes.clone(),
            policy: self.config.aggregator_policy.clone(),
            mpks: self.retrieve_mpks(),
            model_dim: self.config.initial_weights.len() as u32,
        };
        Registration {
            tuple: SignedMessage::sign(&self.signing_key, self.cert.clone(), tuple.to_bytes()),
            cert: issue_cert(&self.signing_key, &self.config.identity, identity, user_vk),
            root: self.cert.clone(),
        }
    }

    fn challenge(&self, session: u64, payload: &[u8]) -> Option<Frame> {
        let stage = Stage::from_u8(*payload.first()?)?;
        let ch = Challenge::fresh(stage, EvidenceMode::Quote);
        let mut sessions = self.sessions.lock().unwrap();
        let s = sessions.entry(session).or_default();
        match stage {
            Stage::High => s.high = Some(ch.clone()),
            // The second handshake continues the attested connection.
            Stage::Mid if s.high_done => s.mid = Some(ch.clone()),
            _ => return None,
        }
        Some(Frame::new(MsgType::AttestChallenge, ch.to_bytes()))
    }

    fn attest(&self, session: u64, payload: &[u8]) -> Option<Frame> {
        let ev = Evidence::from_bytes(payload).ok()?;
        let (ch, stage) = {
            let mut sessions = self.sessions.lock().unwrap();
            let s = sessions.get_mut(&session)?;
            match (&s.high, &s.mid) {
                (Some(c), _) if c.nonce == ev.nonce() => (s.high.take()?, Stage::High),
                (_, Some(c)) if c.nonce == ev.nonce() => (s.mid.take()?, Stage::Mid),
                _ => return None,
            }
        };
        let expected = match stage {
            Stage::High => self.boot_measurement(),
            _ => self.coordinator_measurement(),
        };
        let prim = self.prim.narrowed(expected)?;
        let enclave_key = ratls::check_quote(&prim, &ch, &ev)?;
        let (payload, key) = match stage {
            Stage::High => (self.coor_app_key.as_bytes().to_vec(), ReleasedKey::CoordinatorAppKey),
            _ => {
                let cluster_id = fresh_cluster_id();
                let keyset = abe::keygen(&self.master.secret, &cluster_id, &granted(&self.config)).ok()?;
                let prov = CoorProvisioning {
                    keyset: keyset.clone(),
                    agg_app_key: self.agg_app_key.clone(),
                    agg_prim: self.prim.narrowed(self.boot_measurement())?,
                    mpks: self.retrieve_mpks(),
                    root: self.cert.clone(),
                    initial_weights: self.config.initial_weights.clone(),
                };
                self.server_table.lock().unwrap().insert(cluster_id.clone(), keyset);
                (prov.to_bytes(), ReleasedKey::ClusterKeys { cluster_id })
            }
        };
        if stage == Stage::High {
            self.sessions.lock().unwrap().get_mut(&session)?.high_done = true;
        }
        self.releases.lock().unwrap().push(KeyRelease {
            session_id: session,
            measurement: ev.measurement(),
            key,
        });
        let d = ratls::deliver(&ch, &enclave_key, &payload);
        Some(Frame::new(MsgType::KeyDelivery, d.to_bytes()))
    }
}

fn granted(config: &ProviderConfig) -> Vec<&str> {
    config.granted.iter().map(String::as_str).collect()
}

fn fresh_cluster_id() -> String {
    format!("cluster-{:016x}", OsRng.next_u64())
}

impl Handler for Provider {
    /// Any failure drops the connection without a reply.
    fn handle(&self, session: &SessionInfo, frame: Frame) -> Option<Frame> {
        let sid = session.session_id;
        let reply = match frame.msg_type {
            MsgType::PackageCoor => Some(Frame::new(MsgType::PackageCoor, self.package_coordinator().to_bytes())),
            MsgType::PackageAgg => Some(Frame::new(MsgType::PackageAgg, self.package_aggregator().to_bytes())),
            MsgType::AttestChallenge => self.challenge(sid, &frame.payload),
            MsgType::AttestQuote => self.attest(sid, &frame.payload),
            MsgType::UserRequest => {
                let (identity, vk) = decode_registration_request(&frame.payload).ok()?;
                Some(Frame::new(MsgType::UserRequest, self.register_user(&identity, &vk).to_bytes()))
            }
            _ => None,
        };
        if reply.is_none() {
            self.sessions.lock().unwrap().remove(&sid);
        }
        reply
    }
}

pub fn encode_registration_request(identity: &str, user_vk: &[u8; 32]) -> Vec<u8> {
    let mut w = Writer::with_tag(TAG_REG_REQUEST);
    w.str(identity).raw(user_vk);
    w.finish()
}

pub fn decode_registration_request(b: &[u8]) -> Result<(String, [u8; 32]), DecodeError> {
    let mut r = Reader::new(b);
    r.expect_tag("registration request", TAG_REG_REQUEST)?;
    let identity = r.str("identity")?.to_string();
    let vk = r.array("verifying key")?;
    r.finish()?;
    Ok((identity, vk))
}

/// The public parameters a registered client works with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistrationTuple {
    pub identity: String,
    pub attributes: Vec<String>,
    pub policy: Policy,
    pub mpks: Vec<AuthorityPublicKey>,
    pub model_dim: u32,
}

impl RegistrationTuple {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_REG_TUPLE);
        w.str(&self.identity).u32(self.attributes.len() as u32);
        for a in &self.attributes {
            w.str(a);
        }
        w.bytes(&self.policy.to_bytes());
        crate::agg::write_mpks(&mut w, &self.mpks);
        w.u32(self.model_dim);
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_tag("registration tuple", TAG_REG_TUPLE)?;
        let identity = r.str("identity")?.to_string();
        let n = r.u32("attribute count")? as usize;
        let mut attributes = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            attributes.push(r.str("attribute")?.to_string());
        }
        let policy = Policy::from_bytes(r.bytes("policy")?)?;
        let mpks = crate::agg::read_mpks(&mut r)?;
        let model_dim = r.u32("model dimension")?;
        r.finish()?;
        Ok(RegistrationTuple {
            identity,
            attributes,
            policy,
            mpks,
            model_dim,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registration {
    /// Signed [`RegistrationTuple`].
    pub tuple: SignedMessage,
    /// The user's certificate, issued by the provider.
    pub cert: Certificate,
    pub root: Certificate,
}

impl Registration {
    /// Checks the tuple came from the provider holding `provider_vk`.
    pub fn open(&self, provider_vk: &[u8; 32]) -> Result<RegistrationTuple, MeshError> {
        if &self.tuple.signer.verifying_key != provider_vk
            || &self.root.verifying_key != provider_vk
            || self.tuple.verify(&[], &self.root).is_err()
            || envelope::validate_chain(&self.cert, &[], &self.root).is_err()
        {
            return Err(MeshError::PackageSignature);
        }
        Ok(RegistrationTuple::from_bytes(&self.tuple.body)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_REGISTRATION);
        w.bytes(&self.tuple.to_bytes())
            .bytes(&self.cert.to_bytes())
            .bytes(&self.root.to_bytes());
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_tag("registration", TAG_REGISTRATION)?;
        let tuple = SignedMessage::from_bytes(r.bytes("tuple")?)?;
        let cert = Certificate::from_bytes(r.bytes("certificate")?)?;
        let root = Certificate::from_bytes(r.bytes("root")?)?;
        r.finish()?;
        Ok(Registration { tuple, cert, root })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::Platform;
    use crate::mesh::{aggregator_image, coordinator_image};

    fn provider() -> Provider {
        let p = Platform::new();
        Provider::setup(
            ProviderConfig::simple(p.root_key(), 2, vec![0.0; 4]),
            &coordinator_image(),
            &aggregator_image(),
        )
        .unwrap()
    }

    #[test]
    fn setup_populates_three_measurements_and_distinct_structures() {
        let p = provider();
        assert_eq!(p.attest_prim().expected.len(), 3);
        assert_ne!(p.coor_app_key, p.agg_app_key);
        assert_ne!(p.coor_structure.token, p.agg_structure.token);
        assert!(p.coor_structure.verify(&p.verifying_key()));
        assert!(p.agg_structure.verify(&p.verifying_key()));
        assert!(p.server_table().is_empty());
    }

    #[test]
    fn encrypted_apps_open_under_their_keys_only() {
        let p = provider();
        let coor = envelope::Sealed::from_bytes(&p.enc_coor_app).unwrap();
        assert_eq!(envelope::open(&p.coor_app_key, &coor).unwrap(), coordinator_image());
        assert!(envelope::open(&p.agg_app_key, &coor).is_err());
        let agg = envelope::Sealed::from_bytes(&p.enc_agg_app).unwrap();
        assert_eq!(envelope::open(&p.agg_app_key, &agg).unwrap(), aggregator_image());
    }

    #[test]
    fn packages_are_signed_and_deterministic() {
        let p = provider();
        let a = p.package_coordinator();
        assert_eq!(a, p.package_coordinator());
        assert!(envelope::verify(&p.verifying_key(), &a.body, &a.signature));
        let pkg = Package::open_signed(&a, &p.verifying_key()).unwrap();
        assert_eq!(pkg.kind, PackageKind::Coordinator);
        let agg = Package::open_signed(&p.package_aggregator(), &p.verifying_key()).unwrap();
        assert_eq!(agg.kind, PackageKind::Aggregator);
        assert_ne!(agg.enc_app, pkg.enc_app);
    }

    #[test]
    fn setup_rejects_empty_apps_and_bad_security() {
        let root = Platform::new().root_key();
        let cfg = ProviderConfig::simple(root, 2, vec![0.0]);
        assert!(Provider::setup(cfg.clone(), &[], &aggregator_image()).is_err());
        let mut bad = cfg;
        bad.security_bits = 0;
        assert!(matches!(
            Provider::setup(bad, &coordinator_image(), &aggregator_image()),
            Err(MeshError::Abe(abe::AbeError::UnsupportedSecurity(0)))
        ));
    }

    #[test]
    fn registration_tuple_verifies_under_provider_key() {
        let p = provider();
        let user = SigningKey::generate();
        let reg = p.register_user("alice", &user.verifying_key());
        let back = Registration::from_bytes(&reg.to_bytes()).unwrap();
        let t = back.open(&p.verifying_key()).unwrap();
        assert_eq!(t.identity, "alice");
        assert_eq!(t.mpks, p.retrieve_mpks());
        assert_eq!(t.model_dim, 4);
        assert_eq!(back.cert.verifying_key, user.verifying_key());
        assert!(reg.open(&SigningKey::generate().verifying_key()).is_err());
    }

    #[test]
    fn mid_stage_requires_completed_high_stage_on_the_session() {
        let p = provider();
        let s = SessionInfo {
            session_id: 77,
            peer: "t".into(),
        };
        assert!(p
            .handle(&s, Frame::new(MsgType::AttestChallenge, vec![Stage::Mid as u8]))
            .is_none());
        assert!(p
            .handle(&s, Frame::new(MsgType::AttestChallenge, vec![Stage::High as u8]))
            .is_some());
        assert!(p
            .handle(&s, Frame::new(MsgType::AttestChallenge, vec![Stage::Mid as u8]))
            .is_none());
        assert!(p.handle(&s, Frame::new(MsgType::ServerResponse, vec![])).is_none());
    }
}
