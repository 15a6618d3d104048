//! Enclave programs of the mesh: the boot loader, the coordinator and a
//! rogue program that exfiltrates whatever it is given.
//!
//! Inputs are [`AppCmd`], outputs [`AppOutput`]; both cross the enclave
//! boundary and are visible to the host.


use crate::abe::{AttributeKeySet, AuthorityPublicKey};
use crate::agg::AggHandoff;
use crate::enclave::{AttestPrim, EnclaveCtx, EnclaveProgram, ProgramInit};
use crate::envelope::{self, Certificate, Sealed, SymmetricKey};
use crate::wire::{DecodeError, Reader, Writer};

use super::ratls::{self, Challenge, Delivery, Evidence, EvidenceMode, PendingChannel, Stage};
use super::AppStructure;

const TAG_COOR_PROVISIONING: u8 = 0x52;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppCmd {
    Load { enc_app: Vec<u8>, structure: AppStructure },
    RaChallenge(Challenge),
    RaDelivery(Delivery),
    /// Coordinator: open an attestation of an aggregator that claims to run
    /// on `claimed_host`.
    AggChallenge { claimed_host: String },
    AggEvidence(Evidence),
    Status,
}

impl AppCmd {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            AppCmd::Load { enc_app, structure } => {
                w.u8(1).bytes(enc_app).bytes(&structure.to_bytes());
            }
            AppCmd::RaChallenge(c) => {
                w.u8(2).bytes(&c.to_bytes());
            }
            AppCmd::RaDelivery(d) => {
                w.u8(3).bytes(&d.to_bytes());
            }
            AppCmd::AggChallenge { claimed_host } => {
                w.u8(4).str(claimed_host);
            }
            AppCmd::AggEvidence(e) => {
                w.u8(5).bytes(&e.to_bytes());
            }
            AppCmd::Status => {
                w.u8(6);
            }
        }
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        let cmd = match r.u8("command")? {
            1 => AppCmd::Load {
                enc_app: r.bytes("encrypted app")?.to_vec(),
                structure: AppStructure::from_bytes(r.bytes("app structure")?)?,
            },
            2 => AppCmd::RaChallenge(Challenge::from_bytes(r.bytes("challenge")?)?),
            3 => AppCmd::RaDelivery(Delivery::from_bytes(r.bytes("delivery")?)?),
            4 => AppCmd::AggChallenge {
                claimed_host: r.str("host")?.to_string(),
            },
            5 => AppCmd::AggEvidence(Evidence::from_bytes(r.bytes("evidence")?)?),
            6 => AppCmd::Status,
            t => return Err(DecodeError::Tag { what: "command", tag: t }),
        };
        r.finish()?;
        Ok(cmd)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppOutput {
    Reject(String),
    Loaded,
    Evidence(Evidence),
    /// The decrypted application has been exec'd.
    Launched,
    Provisioned { cluster_id: String },
    Challenge(Challenge),
    Release(Delivery),
    Status { program: String, cluster_id: Option<String>, releases: u64 },
    /// Emitted only by rogue code: plaintext it managed to obtain.
    Leak(Vec<u8>),
}

impl AppOutput {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            AppOutput::Reject(s) => {
                w.u8(0).str(s);
            }
            AppOutput::Loaded => {
                w.u8(1);
            }
            AppOutput::Evidence(e) => {
                w.u8(2).bytes(&e.to_bytes());
            }
            AppOutput::Launched => {
                w.u8(3);
            }
            AppOutput::Provisioned { cluster_id } => {
                w.u8(4).str(cluster_id);
            }
            AppOutput::Challenge(c) => {
                w.u8(5).bytes(&c.to_bytes());
            }
            AppOutput::Release(d) => {
                w.u8(6).bytes(&d.to_bytes());
            }
            AppOutput::Status {
                program,
                cluster_id,
                releases,
            } => {
                w.u8(7)
                    .str(program)
                    .str(cluster_id.as_deref().unwrap_or(""))
                    .u64(*releases);
            }
            AppOutput::Leak(b) => {
                w.u8(8).bytes(b);
            }
        }
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        let out = match r.u8("output")? {
            0 => AppOutput::Reject(r.str("reason")?.to_string()),
            1 => AppOutput::Loaded,
            2 => AppOutput::Evidence(Evidence::from_bytes(r.bytes("evidence")?)?),
            3 => AppOutput::Launched,
            4 => AppOutput::Provisioned {
                cluster_id: r.str("cluster")?.to_string(),
            },
            5 => AppOutput::Challenge(Challenge::from_bytes(r.bytes("challenge")?)?),
            6 => AppOutput::Release(Delivery::from_bytes(r.bytes("delivery")?)?),
            7 => {
                let program = r.str("program")?.to_string();
                let c = r.str("cluster")?;
                AppOutput::Status {
                    program,
                    cluster_id: (!c.is_empty()).then(|| c.to_string()),
                    releases: r.u64("releases")?,
                }
            }
            8 => AppOutput::Leak(r.bytes("leak")?.to_vec()),
            t => return Err(DecodeError::Tag { what: "output", tag: t }),
        };
        r.finish()?;
        Ok(out)
    }
}

fn reject(reason: &str) -> Vec<u8> {
    AppOutput::Reject(reason.to_string()).to_bytes()
}

/// What the provider hands a coordinator after the second attestation.
#[derive(Clone)]
pub struct CoorProvisioning {
    pub keyset: AttributeKeySet,
    pub agg_app_key: SymmetricKey,
    /// Verification inputs for aggregator evidence.
    pub agg_prim: AttestPrim,
    pub mpks: Vec<AuthorityPublicKey>,
    pub root: Certificate,
    pub initial_weights: Vec<f64>,
}

impl CoorProvisioning {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_COOR_PROVISIONING);
        w.bytes(&self.keyset.to_bytes())
            .raw(self.agg_app_key.as_bytes())
            .bytes(&self.agg_prim.to_bytes());
        crate::agg::write_mpks(&mut w, &self.mpks);
        w.bytes(&self.root.to_bytes());
        crate::agg::write_weights(&mut w, &self.initial_weights);
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_tag("coordinator provisioning", TAG_COOR_PROVISIONING)?;
        let keyset = AttributeKeySet::from_bytes(r.bytes("key set")?)?;
        let agg_app_key = SymmetricKey::from_bytes(r.array("app key")?);
        let agg_prim = AttestPrim::from_bytes(r.bytes("attestation inputs")?)?;
        let mpks = crate::agg::read_mpks(&mut r)?;
        let root = Certificate::from_bytes(r.bytes("root")?)?;
        let initial_weights = crate::agg::read_weights(&mut r)?;
        r.finish()?;
        Ok(CoorProvisioning {
            keyset,
            agg_app_key,
            agg_prim,
            mpks,
            root,
            initial_weights,
        })
    }

    fn handoff(&self) -> AggHandoff {
        AggHandoff {
            keyset: self.keyset.clone(),
            app_key: self.agg_app_key.clone(),
            mpks: self.mpks.clone(),
            root: self.root.clone(),
            initial_weights: self.initial_weights.clone(),
        }
    }
}

/// Plaintext loader. Holds an encrypted app until an attested delivery
/// supplies its key, then execs it under the signed manifest.
pub struct BootApp {
    provider_vk: [u8; 32],
    loaded: Option<(Sealed, AppStructure)>,
    pending: Option<PendingChannel>,
}

impl BootApp {
    pub fn construct(init: &ProgramInit<'_>) -> Result<Box<dyn EnclaveProgram>, String> {
        let provider_vk = init
            .body
            .try_into()
            .map_err(|_| "boot body must be a 32-byte verifying key".to_string())?;
        Ok(Box::new(BootApp {
            provider_vk,
            loaded: None,
            pending: None,
        }))
    }

    fn launch(&mut self, ctx: &mut EnclaveCtx<'_>, d: &Delivery) -> Vec<u8> {
        let (Some(pending), Some((enc_app, structure))) = (self.pending.take(), &self.loaded) else {
            return reject("no handshake in progress");
        };
        let Some(payload) = pending.open(d) else {
            return reject("delivery does not open");
        };
        let (key, handoff) = match pending.stage() {
            Stage::High => match <[u8; 32]>::try_from(payload.as_slice()) {
                Ok(k) => (SymmetricKey::from_bytes(k), Vec::new()),
                Err(_) => return reject("malformed app key"),
            },
            Stage::Aggregator => match AggHandoff::from_bytes(&payload) {
                Ok(h) => (h.app_key.clone(), payload),
                Err(_) => return reject("malformed handoff"),
            },
            Stage::Mid => return reject("loader does not take part in this stage"),
        };
        match envelope::open(&key, enc_app) {
            Ok(image) => {
                ctx.log("app decrypted, launching");
                ctx.exec(image, structure.manifest.clone(), handoff);
                AppOutput::Launched.to_bytes()
            }
            Err(_) => reject("encrypted app does not open"),
        }
    }
}

impl EnclaveProgram for BootApp {
    fn step(&mut self, ctx: &mut EnclaveCtx<'_>, input: &[u8]) -> Vec<u8> {
        let Ok(cmd) = AppCmd::from_bytes(input) else {
            return reject("malformed command");
        };
        match cmd {
            AppCmd::Load { enc_app, structure } => {
                if !structure.verify(&self.provider_vk) {
                    return reject("app structure signature invalid");
                }
                let Ok(sealed) = Sealed::from_bytes(&enc_app) else {
                    return reject("malformed encrypted app");
                };
                self.loaded = Some((sealed, structure));
                AppOutput::Loaded.to_bytes()
            }
            AppCmd::RaChallenge(ch) => {
                if self.loaded.is_none() {
                    return reject("nothing loaded");
                }
                if ch.stage == Stage::Mid {
                    return reject("loader does not take part in this stage");
                }
                match PendingChannel::respond(ctx, ch) {
                    Some((p, ev)) => {
                        self.pending = Some(p);
                        AppOutput::Evidence(ev).to_bytes()
                    }
                    None => reject("quoting failed"),
                }
            }
            AppCmd::RaDelivery(d) => self.launch(ctx, &d),
            AppCmd::Status => AppOutput::Status {
                program: super::BOOT_PROGRAM.into(),
                cluster_id: None,
                releases: 0,
            }
            .to_bytes(),
            _ => reject("unsupported command"),
        }
    }
}

/// The coordinator application: takes attribute keys from the provider and
/// passes them on to aggregators it has attested.
pub struct CoorApp {
    pending_mid: Option<PendingChannel>,
    provisioning: Option<CoorProvisioning>,
    /// The one open aggregator challenge. A new challenge supersedes it, so
    /// evidence produced for an abandoned handshake is never accepted later.
    pending_agg: Option<Challenge>,
    releases: u64,
}

impl CoorApp {
    pub fn construct(_: &ProgramInit<'_>) -> Result<Box<dyn EnclaveProgram>, String> {
        Ok(Box::new(CoorApp {
            pending_mid: None,
            provisioning: None,
            pending_agg: None,
            releases: 0,
        }))
    }

    fn attest_aggregator(&mut self, ctx: &mut EnclaveCtx<'_>, ev: &Evidence) -> Vec<u8> {
        let Some(prov) = &self.provisioning else {
            return reject("coordinator not provisioned");
        };
        let Some(ch) = self.pending_agg.take_if(|ch| ch.nonce == ev.nonce()) else {
            return reject("unknown or stale nonce");
        };
        let key = match ch.mode {
            EvidenceMode::LocalReport => ratls::check_local(ctx, &prov.agg_prim.expected, &ch, ev),
            EvidenceMode::Quote => ratls::check_quote(&prov.agg_prim, &ch, ev),
        };
        let Some(key) = key else {
            ctx.log("aggregator evidence rejected");
            return reject("aggregator evidence rejected");
        };
        let d = ratls::deliver(&ch, &key, &prov.handoff().to_bytes());
        self.releases += 1;
        ctx.log(format!("aggregator keys released ({:?} path)", ch.mode));
        AppOutput::Release(d).to_bytes()
    }
}

impl EnclaveProgram for CoorApp {
    fn step(&mut self, ctx: &mut EnclaveCtx<'_>, input: &[u8]) -> Vec<u8> {
        let Ok(cmd) = AppCmd::from_bytes(input) else {
            return reject("malformed command");
        };
        match cmd {
            AppCmd::RaChallenge(ch) if ch.stage == Stage::Mid => {
                match PendingChannel::respond(ctx, ch) {
                    Some((p, ev)) => {
                        self.pending_mid = Some(p);
                        AppOutput::Evidence(ev).to_bytes()
                    }
                    None => reject("quoting failed"),
                }
            }
            AppCmd::RaDelivery(d) => {
                let Some(p) = self.pending_mid.take() else {
                    return reject("no handshake in progress");
                };
                match p.open(&d).map(|b| CoorProvisioning::from_bytes(&b)) {
                    Some(Ok(prov)) => {
                        let cluster_id = prov.keyset.cluster_id.clone();
                        ctx.log(format!("provisioned for cluster {cluster_id}"));
                        self.provisioning = Some(prov);
                        AppOutput::Provisioned { cluster_id }.to_bytes()
                    }
                    _ => reject("delivery does not open"),
                }
            }
            AppCmd::AggChallenge { claimed_host } => {
                if self.provisioning.is_none() {
                    return reject("coordinator not provisioned");
                }
                let mode = if claimed_host == ctx.host_id() {
                    EvidenceMode::LocalReport
                } else {
                    EvidenceMode::Quote
                };
                let ch = Challenge::fresh(Stage::Aggregator, mode);
                self.pending_agg = Some(ch.clone());
                AppOutput::Challenge(ch).to_bytes()
            }
            AppCmd::AggEvidence(ev) => self.attest_aggregator(ctx, &ev),
            AppCmd::Status => AppOutput::Status {
                program: super::COORDINATOR_PROGRAM.into(),
                cluster_id: self.provisioning.as_ref().map(|p| p.keyset.cluster_id.clone()),
                releases: self.releases,
            }
            .to_bytes(),
            _ => reject("unsupported command"),
        }
    }
}

/// Attacker code: answers any challenge with genuine evidence of itself and
/// publishes whatever a delivery contains.
pub struct RogueApp {
    pending: Option<PendingChannel>,
}

impl RogueApp {
    pub fn construct(_: &ProgramInit<'_>) -> Result<Box<dyn EnclaveProgram>, String> {
        Ok(Box::new(RogueApp { pending: None }))
    }
}

impl EnclaveProgram for RogueApp {
    fn step(&mut self, ctx: &mut EnclaveCtx<'_>, input: &[u8]) -> Vec<u8> {
        match AppCmd::from_bytes(input) {
            Ok(AppCmd::Load { .. }) => AppOutput::Loaded.to_bytes(),
            Ok(AppCmd::RaChallenge(ch)) => match PendingChannel::respond(ctx, ch) {
                Some((p, ev)) => {
                    self.pending = Some(p);
                    AppOutput::Evidence(ev).to_bytes()
                }
                None => reject("quoting failed"),
            },
            Ok(AppCmd::RaDelivery(d)) => match self.pending.take().and_then(|p| p.open(&d)) {
                Some(pt) => AppOutput::Leak(pt).to_bytes(),
                None => reject("delivery does not open"),
            },
            _ => reject("unsupported command"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::measure;

    #[test]
    fn commands_and_outputs_decode_back() {
        let ch = Challenge::fresh(Stage::Aggregator, EvidenceMode::LocalReport);
        for cmd in [
            AppCmd::RaChallenge(ch.clone()),
            AppCmd::AggChallenge {
                claimed_host: "h1".into(),
            },
            AppCmd::Status,
        ] {
            assert_eq!(AppCmd::from_bytes(&cmd.to_bytes()).unwrap(), cmd);
        }
        for out in [
            AppOutput::Reject("no".into()),
            AppOutput::Challenge(ch),
            AppOutput::Status {
                program: "p".into(),
                cluster_id: None,
                releases: 3,
            },
            AppOutput::Status {
                program: "p".into(),
                cluster_id: Some("c".into()),
                releases: 0,
            },
        ] {
            assert_eq!(AppOutput::from_bytes(&out.to_bytes()).unwrap(), out);
        }
        assert!(AppCmd::from_bytes(&[9]).is_err());
    }

    #[test]
    fn rogue_images_measure_differently() {
        use super::super::*;
        let m = b"app=coordinator\n";
        assert_ne!(
            measure(&coordinator_image(), m),
            measure(&rogue_coordinator_image(), m)
        );
        assert_ne!(
            measure(&aggregator_image(), m),
            measure(&rogue_aggregator_image(), m)
        );
    }
}
