//! Table-driven reference for registration, request relay and the enclave
//! functionality. Every call either answers from the tables or returns
//! [`Bottom`]. All randomness comes from a seeded generator held in the
//! state, so a reply depends only on the state and the request.

use std::collections::{BTreeMap, BTreeSet};

use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};

use crate::abe::Policy;
use crate::envelope::SigningKey;

/// Random 128-bit ciphertext, key or enclave handle.
pub type Handle = [u8; 16];

pub const HANDLE_BITS: u32 = 128;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Party {
    Environment,
    Provider(String),
    Edge(String),
    User(String),
    Enclave(Handle),
    Adversary,
    Simulator,
}

/// The failure symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("bottom")]
pub struct Bottom;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppKind {
    Coordinator,
    Aggregator,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnclaveInput {
    /// Boot loader: fetch the app key for `spid` and decrypt the app.
    Launch { spid: String, kind: AppKind },
    /// Running coordinator: receive attribute keys and the aggregator app key.
    Provision,
    /// Running aggregator: serve one client request.
    Request { c1: Handle, c2: Handle, user: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnclaveOutput {
    Launched,
    Provisioned,
    Response { c3: Handle },
    Reject,
}

impl EnclaveOutput {
    fn to_bytes(&self) -> Vec<u8> {
        match self {
            EnclaveOutput::Launched => vec![1],
            EnclaveOutput::Provisioned => vec![2],
            EnclaveOutput::Response { c3 } => [&[3u8][..], c3].concat(),
            EnclaveOutput::Reject => vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    SystemSetup {
        providers: Vec<String>,
        edges: Vec<String>,
        users: Vec<String>,
        /// Edges whose enclaves run on the trusted platform.
        tee_parties: Vec<String>,
        lambda: u32,
        sid: u64,
    },
    AbeSetup { spid: String, attributes: Vec<String> },
    AbeKeyGen { attribute: String },
    AbeEnc { policy: Policy, mpk: Handle, m: Vec<u8> },
    AbeDec { keys: Vec<Handle>, policy: Policy, c: Handle },
    SymmKeygen,
    SymmEnc { k: Handle, m: Vec<u8> },
    SymmDec { k: Handle, c: Handle },
    SpSetup {
        spid: String,
        enc_coor_app: Handle,
        k_c: Handle,
        enc_agg_app: Handle,
        k_a: Handle,
        boot_app: Vec<u8>,
        attest_prim: Vec<u8>,
    },
    RetrieveMpks,
    RegisterCoorEnc { spid: String, e: String },
    RegisterAggEnc { spid: String, e: String },
    UserRequest { c1: Handle, c2: Handle, cert: Vec<u8>, e: String, u: String },
    ServerResponse { c3: Handle, u: String },
    Install { idx: u64, prog: Vec<u8> },
    Resume { eid: Handle, input: EnclaveInput },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Done,
    Handle(Handle),
    Plaintext(Vec<u8>),
    Mpks(Vec<(Handle, Vec<String>)>),
    Apps { enc_app: Handle, boot_app: Vec<u8> },
    Forwarded,
    Resumed { output: EnclaveOutput, signature: [u8; 64] },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SRow {
    pub spid: String,
    pub attributes: Vec<String>,
    pub mpk: Handle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpAppRow {
    pub spid: String,
    pub enc_coor_app: Handle,
    pub k_c: Handle,
    pub enc_agg_app: Handle,
    pub k_a: Handle,
    pub boot_app: Vec<u8>,
    pub attest_prim: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbeSkRow {
    pub spid: String,
    pub sk: Handle,
    pub attribute: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbeERow {
    pub mpk: Handle,
    pub policy: Policy,
    pub c: Handle,
    pub m: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymmERow {
    pub k: Handle,
    pub c: Handle,
    pub m: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ERow {
    pub spid: String,
    pub e: String,
    pub kind: AppKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mem {
    Empty,
    Coordinator {
        spid: String,
        keys: Option<(Vec<Handle>, Handle)>,
    },
    Aggregator {
        spid: String,
        keys: Vec<Handle>,
        ids: BTreeMap<String, u64>,
        version: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeeEntry {
    pub idx: u64,
    pub prog: Vec<u8>,
    pub mem: Mem,
}

/// Prefix of an ideal client payload carrying an update.
pub const PAYLOAD_UPDATE: u8 = b'U';
/// Prefix of an ideal client payload asking for weights only.
pub const PAYLOAD_WEIGHTS: u8 = b'W';

#[derive(Clone)]
pub struct IdealState {
    rng: StdRng,
    used: BTreeSet<Handle>,
    setup: bool,
    sid: u64,
    tee_key: Option<SigningKey>,
    pub providers: BTreeSet<String>,
    pub edges: BTreeSet<String>,
    pub users: BTreeSet<String>,
    pub reg: BTreeSet<String>,
    pub s_table: Vec<SRow>,
    pub sp_app_table: Vec<SpAppRow>,
    pub abe_sk_table: Vec<AbeSkRow>,
    pub abe_e_table: Vec<AbeERow>,
    pub symm_k_table: BTreeSet<Handle>,
    pub symm_e_table: Vec<SymmERow>,
    /// Edge servers registered for a provider's service.
    pub e_table: Vec<ERow>,
    /// Enclave table keyed by (eid, installing party), in install order.
    pub tee: Vec<((Handle, Party), TeeEntry)>,
    /// Every value handed to or supplied by a party, in call order.
    pub disclosures: Vec<(Party, Vec<u8>)>,
    mpk_owner: BTreeMap<Handle, String>,
}

impl IdealState {
    pub fn new(seed: u64) -> Self {
        IdealState {
            rng: StdRng::seed_from_u64(seed),
            used: BTreeSet::new(),
            setup: false,
            sid: 0,
            tee_key: None,
            providers: BTreeSet::new(),
            edges: BTreeSet::new(),
            users: BTreeSet::new(),
            reg: BTreeSet::new(),
            s_table: Vec::new(),
            sp_app_table: Vec::new(),
            abe_sk_table: Vec::new(),
            abe_e_table: Vec::new(),
            symm_k_table: BTreeSet::new(),
            symm_e_table: Vec::new(),
            e_table: Vec::new(),
            tee: Vec::new(),
            disclosures: Vec::new(),
            mpk_owner: BTreeMap::new(),
        }
    }

    /// Verification key for enclave output signatures.
    pub fn tee_public_key(&self) -> Option<[u8; 32]> {
        self.tee_key.as_ref().map(SigningKey::verifying_key)
    }

    fn fresh(&mut self) -> Handle {
        loop {
            let mut h = [0u8; 16];
            self.rng.fill_bytes(&mut h);
            if self.used.insert(h) {
                return h;
            }
        }
    }

    fn disclose(&mut self, to: &[Party], value: &[u8]) {
        for p in to {
            self.disclosures.push((p.clone(), value.to_vec()));
        }
    }

    fn is_defined(&self, p: &Party) -> bool {
        match p {
            Party::Environment | Party::Adversary | Party::Simulator => true,
            Party::Provider(s) => self.providers.contains(s),
            Party::Edge(e) => self.edges.contains(e),
            Party::User(u) => self.users.contains(u),
            Party::Enclave(eid) => self.tee.iter().any(|((x, _), _)| x == eid),
        }
    }

    fn latest_app_row(&self, spid: &str) -> Option<&SpAppRow> {
        self.sp_app_table.iter().rev().find(|r| r.spid == spid)
    }

    fn entry_mut(&mut self, eid: &Handle, p: &Party) -> Option<&mut TeeEntry> {
        self.tee.iter_mut().find(|((x, q), _)| x == eid && q == p).map(|(_, t)| t)
    }

    pub fn entry(&self, eid: &Handle) -> Option<&TeeEntry> {
        self.tee.iter().find(|((x, _), _)| x == eid).map(|(_, t)| t)
    }

    /// Dispatches one request from `caller`.
    pub fn call(&mut self, caller: &Party, req: Request) -> Result<Reply, Bottom> {
        if let Request::SystemSetup { providers, edges, users, tee_parties, lambda, sid } = req {
            if *caller != Party::Environment || self.setup || lambda != HANDLE_BITS {
                return Err(Bottom);
            }
            if tee_parties.iter().any(|t| !edges.contains(t)) {
                return Err(Bottom);
            }
            self.providers = providers.into_iter().collect();
            self.edges = edges.into_iter().collect();
            self.users = users.into_iter().collect();
            self.reg = tee_parties.into_iter().collect();
            self.sid = sid;
            let mut seed = [0u8; 32];
            self.rng.fill_bytes(&mut seed);
            self.tee_key = Some(SigningKey::from_bytes(&seed));
            self.setup = true;
            return Ok(Reply::Done);
        }
        if !self.setup || !self.is_defined(caller) {
            return Err(Bottom);
        }
        match req {
            Request::SystemSetup { .. } => unreachable!("handled above"),
            Request::AbeSetup { spid, attributes } => self.abe_setup(caller, spid, attributes),
            Request::AbeKeyGen { attribute } => self.abe_keygen(caller, attribute),
            Request::AbeEnc { policy, mpk, m } => self.abe_enc(caller, policy, mpk, m),
            Request::AbeDec { keys, policy, c } => self.abe_dec(caller, &keys, &policy, c),
            Request::SymmKeygen => {
                let k = self.fresh();
                self.symm_k_table.insert(k);
                self.disclose(&[caller.clone(), Party::Simulator], &k);
                Ok(Reply::Handle(k))
            }
            Request::SymmEnc { k, m } => self.symm_enc(caller, k, m),
            Request::SymmDec { k, c } => self.symm_dec(caller, k, c),
            Request::SpSetup { spid, enc_coor_app, k_c, enc_agg_app, k_a, boot_app, attest_prim } => {
                if *caller != Party::Provider(spid.clone()) {
                    return Err(Bottom);
                }
                self.sp_app_table.push(SpAppRow {
                    spid,
                    enc_coor_app,
                    k_c,
                    enc_agg_app,
                    k_a,
                    boot_app,
                    attest_prim,
                });
                Ok(Reply::Done)
            }
            Request::RetrieveMpks => {
                let list: Vec<_> = self.s_table.iter().map(|r| (r.mpk, r.attributes.clone())).collect();
                for (mpk, _) in &list {
                    self.disclose(&[caller.clone(), Party::Adversary, Party::Simulator], mpk);
                }
                Ok(Reply::Mpks(list))
            }
            Request::RegisterCoorEnc { spid, e } => self.register_edge(caller, spid, e, AppKind::Coordinator),
            Request::RegisterAggEnc { spid, e } => self.register_edge(caller, spid, e, AppKind::Aggregator),
            Request::UserRequest { c1, c2, cert: _, e, u } => {
                if *caller != Party::User(u) || !self.edges.contains(&e) {
                    return Err(Bottom);
                }
                let serving = self
                    .tee
                    .iter()
                    .any(|((_, p), t)| *p == Party::Edge(e.clone()) && matches!(t.mem, Mem::Aggregator { .. }));
                if !serving {
                    return Err(Bottom);
                }
                let to = [Party::Edge(e), Party::Simulator, Party::Adversary];
                self.disclose(&to, &c1);
                self.disclose(&to, &c2);
                Ok(Reply::Forwarded)
            }
            Request::ServerResponse { c3, u } => {
                if !matches!(caller, Party::Edge(_)) || !self.users.contains(&u) {
                    return Err(Bottom);
                }
                self.disclose(&[Party::User(u), Party::Simulator, Party::Adversary], &c3);
                Ok(Reply::Forwarded)
            }
            Request::Install { idx, prog } => {
                let Party::Edge(e) = caller else { return Err(Bottom) };
                if !self.reg.contains(e) || idx != self.sid {
                    return Err(Bottom);
                }
                let eid = self.fresh();
                self.tee.push((
                    (eid, caller.clone()),
                    TeeEntry {
                        idx,
                        prog,
                        mem: Mem::Empty,
                    },
                ));
                self.disclose(&[caller.clone()], &eid);
                Ok(Reply::Handle(eid))
            }
            Request::Resume { eid, input } => self.resume(caller, eid, input),
        }
    }

    fn abe_setup(&mut self, caller: &Party, spid: String, attributes: Vec<String>) -> Result<Reply, Bottom> {
        let distinct: BTreeSet<_> = attributes.iter().collect();
        if *caller != Party::Provider(spid.clone()) || attributes.is_empty() || distinct.len() != attributes.len() {
            return Err(Bottom);
        }
        let mpk = self.fresh();
        // A provider may replace its attribute set.
        self.s_table.retain(|r| r.spid != spid);
        self.s_table.push(SRow {
            spid: spid.clone(),
            attributes,
            mpk,
        });
        self.mpk_owner.insert(mpk, spid);
        self.disclose(&[caller.clone(), Party::Simulator, Party::Adversary], &mpk);
        Ok(Reply::Handle(mpk))
    }

    fn abe_keygen(&mut self, caller: &Party, attribute: String) -> Result<Reply, Bottom> {
        let Party::Provider(spid) = caller else { return Err(Bottom) };
        let known = self
            .s_table
            .iter()
            .any(|r| &r.spid == spid && r.attributes.contains(&attribute));
        if !known {
            return Err(Bottom);
        }
        let sk = self.fresh();
        self.abe_sk_table.push(AbeSkRow {
            spid: spid.clone(),
            sk,
            attribute,
        });
        self.disclose(&[caller.clone()], &sk);
        Ok(Reply::Handle(sk))
    }

    fn abe_enc(&mut self, caller: &Party, policy: Policy, mpk: Handle, m: Vec<u8>) -> Result<Reply, Bottom> {
        let row = self.s_table.iter().find(|r| r.mpk == mpk).ok_or(Bottom)?;
        if policy.validate().is_err() || !policy.leaves().iter().all(|l| row.attributes.iter().any(|a| a == l)) {
            return Err(Bottom);
        }
        let c = self.fresh();
        self.disclose(&[caller.clone()], &m);
        self.abe_e_table.push(AbeERow { mpk, policy, c, m });
        self.disclose(&[caller.clone(), Party::Adversary, Party::Simulator], &c);
        Ok(Reply::Handle(c))
    }

    /// Keys count toward the policy only for the authority that owns the
    /// ciphertext's public key.
    fn abe_dec(&mut self, caller: &Party, keys: &[Handle], policy: &Policy, c: Handle) -> Result<Reply, Bottom> {
        let row = self
            .abe_e_table
            .iter()
            .find(|r| r.c == c && &r.policy == policy)
            .ok_or(Bottom)?;
        let owner = self.mpk_owner.get(&row.mpk).ok_or(Bottom)?;
        let mut held = BTreeSet::new();
        for k in keys {
            let sk = self.abe_sk_table.iter().find(|r| r.sk == *k).ok_or(Bottom)?;
            if &sk.spid == owner {
                held.insert(sk.attribute.as_str());
            }
        }
        if !policy.satisfied_by(|a| held.contains(a)) {
            return Err(Bottom);
        }
        let m = row.m.clone();
        self.disclose(&[caller.clone()], &m);
        Ok(Reply::Plaintext(m))
    }

    fn symm_enc(&mut self, caller: &Party, k: Handle, m: Vec<u8>) -> Result<Reply, Bottom> {
        if !self.symm_k_table.contains(&k) {
            return Err(Bottom);
        }
        let c = self.fresh();
        self.disclose(&[caller.clone()], &m);
        self.symm_e_table.push(SymmERow { k, c, m });
        self.disclose(&[caller.clone(), Party::Adversary, Party::Simulator], &c);
        Ok(Reply::Handle(c))
    }

    fn symm_dec(&mut self, caller: &Party, k: Handle, c: Handle) -> Result<Reply, Bottom> {
        let m = self
            .symm_e_table
            .iter()
            .find(|r| r.k == k && r.c == c)
            .map(|r| r.m.clone())
            .ok_or(Bottom)?;
        self.disclose(&[caller.clone()], &m);
        Ok(Reply::Plaintext(m))
    }

    fn register_edge(&mut self, caller: &Party, spid: String, e: String, kind: AppKind) -> Result<Reply, Bottom> {
        if *caller != Party::Edge(e.clone()) {
            return Err(Bottom);
        }
        let row = self.latest_app_row(&spid).ok_or(Bottom)?;
        let enc_app = match kind {
            AppKind::Coordinator => row.enc_coor_app,
            AppKind::Aggregator => row.enc_agg_app,
        };
        let boot_app = row.boot_app.clone();
        self.e_table.push(ERow { spid, e, kind });
        let to = [caller.clone(), Party::Simulator, Party::Adversary];
        self.disclose(&to, &enc_app);
        self.disclose(&to, &boot_app);
        Ok(Reply::Apps { enc_app, boot_app })
    }

    fn resume(&mut self, caller: &Party, eid: Handle, input: EnclaveInput) -> Result<Reply, Bottom> {
        let entry = self.entry_mut(&eid, caller).ok_or(Bottom)?.clone();
        let (output, mem) = self.run(eid, &entry, input);
        let t = self.entry_mut(&eid, caller).expect("entry checked above");
        t.mem = mem;
        let signed = [
            &entry.idx.to_be_bytes()[..],
            &eid,
            &entry.prog,
            &output.to_bytes(),
        ]
        .concat();
        let signature = self.tee_key.as_ref().expect("set up").sign(&signed);
        Ok(Reply::Resumed { output, signature })
    }

    /// Program semantics. Only a provider's own boot loader may read that
    /// provider's rows; any other program gets nothing.
    fn run(&mut self, eid: Handle, entry: &TeeEntry, input: EnclaveInput) -> (EnclaveOutput, Mem) {
        let me = Party::Enclave(eid);
        let keep = entry.mem.clone();
        match (input, &entry.mem) {
            (EnclaveInput::Launch { spid, kind }, Mem::Empty) => {
                let Some(row) = self.latest_app_row(&spid).cloned() else {
                    return (EnclaveOutput::Reject, keep);
                };
                if entry.prog != row.boot_app {
                    return (EnclaveOutput::Reject, keep);
                }
                match kind {
                    AppKind::Coordinator => {
                        self.disclose(&[me.clone()], &row.k_c);
                        if self.symm_dec(&me, row.k_c, row.enc_coor_app).is_err() {
                            return (EnclaveOutput::Reject, keep);
                        }
                        (EnclaveOutput::Launched, Mem::Coordinator { spid, keys: None })
                    }
                    AppKind::Aggregator => {
                        // Attestation by a provisioned coordinator of the same
                        // provider happens inside the functionality.
                        let provisioned = self.tee.iter().find_map(|(_, t)| match &t.mem {
                            Mem::Coordinator { spid: s, keys: Some(k) } if *s == spid => Some(k.clone()),
                            _ => None,
                        });
                        let Some((sks, k_a)) = provisioned else {
                            return (EnclaveOutput::Reject, keep);
                        };
                        self.disclose(&[me.clone()], &k_a);
                        for sk in &sks {
                            self.disclose(&[me.clone()], sk);
                        }
                        if self.symm_dec(&me, k_a, row.enc_agg_app).is_err() {
                            return (EnclaveOutput::Reject, keep);
                        }
                        (
                            EnclaveOutput::Launched,
                            Mem::Aggregator {
                                spid,
                                keys: sks,
                                ids: BTreeMap::new(),
                                version: 0,
                            },
                        )
                    }
                }
            }
            (EnclaveInput::Provision, Mem::Coordinator { spid, keys: None }) => {
                let Some(row) = self.latest_app_row(spid).cloned() else {
                    return (EnclaveOutput::Reject, keep);
                };
                let sks: Vec<Handle> = self
                    .abe_sk_table
                    .iter()
                    .filter(|r| &r.spid == spid)
                    .map(|r| r.sk)
                    .collect();
                for sk in &sks {
                    self.disclose(&[me.clone()], sk);
                }
                self.disclose(&[me.clone()], &row.k_a);
                (
                    EnclaveOutput::Provisioned,
                    Mem::Coordinator {
                        spid: spid.clone(),
                        keys: Some((sks, row.k_a)),
                    },
                )
            }
            (EnclaveInput::Request { c1, c2, user }, Mem::Aggregator { spid, keys, ids, version }) => {
                match self.serve(&me, keys, c1, c2, &user, ids, *version) {
                    Some((c3, ids, version)) => (
                        EnclaveOutput::Response { c3 },
                        Mem::Aggregator {
                            spid: spid.clone(),
                            keys: keys.clone(),
                            ids,
                            version,
                        },
                    ),
                    None => (EnclaveOutput::Reject, keep),
                }
            }
            _ => (EnclaveOutput::Reject, keep),
        }
    }

    /// Unwraps the request key, opens the payload, applies it and seals the
    /// reply. Returns the new id table and version.
    #[allow(clippy::too_many_arguments)]
    fn serve(
        &mut self,
        me: &Party,
        keys: &[Handle],
        c1: Handle,
        c2: Handle,
        user: &str,
        ids: &BTreeMap<String, u64>,
        version: u64,
    ) -> Option<(Handle, BTreeMap<String, u64>, u64)> {
        let policy = self.abe_e_table.iter().find(|r| r.c == c2)?.policy.clone();
        let Ok(Reply::Plaintext(ku)) = self.abe_dec(me, keys, &policy, c2) else {
            return None;
        };
        let ku: Handle = ku.try_into().ok()?;
        let Ok(Reply::Plaintext(payload)) = self.symm_dec(me, ku, c1) else {
            return None;
        };
        let version = match payload.first() {
            Some(&PAYLOAD_WEIGHTS) => version,
            Some(&PAYLOAD_UPDATE) => version + 1,
            _ => return None,
        };
        let mut ids = ids.clone();
        let next = ids.len() as u64 + 1;
        let id = *ids.entry(user.to_string()).or_insert(next);
        let response = [&b"R"[..], &id.to_be_bytes(), &version.to_be_bytes(), &payload].concat();
        let Ok(Reply::Handle(c3)) = self.symm_enc(me, ku, response) else {
            return None;
        };
        Some((c3, ids, version))
    }
}

/// Free-function form of [`IdealState::call`].
pub fn ideal_call(state: &mut IdealState, caller: &Party, req: Request) -> Result<Reply, Bottom> {
    state.call(caller, req)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp() -> Party {
        Party::Provider("sp".into())
    }

    fn user() -> Party {
        Party::User("u".into())
    }

    fn ready() -> IdealState {
        let mut s = IdealState::new(1);
        s.call(
            &Party::Environment,
            Request::SystemSetup {
                providers: vec!["sp".into(), "other".into()],
                edges: vec!["e".into(), "bare".into()],
                users: vec!["u".into()],
                tee_parties: vec!["e".into()],
                lambda: 128,
                sid: 9,
            },
        )
        .unwrap();
        s
    }

    fn handle(r: Result<Reply, Bottom>) -> Handle {
        match r {
            Ok(Reply::Handle(h)) => h,
            o => panic!("expected handle, got {o:?}"),
        }
    }

    fn abe_provider(s: &mut IdealState, spid: &str) -> (Handle, Vec<Handle>) {
        let p = Party::Provider(spid.into());
        let attrs = vec!["agg".to_string(), "svc".to_string()];
        let mpk = handle(s.call(&p, Request::AbeSetup { spid: spid.into(), attributes: attrs.clone() }));
        let sks = attrs
            .into_iter()
            .map(|a| handle(s.call(&p, Request::AbeKeyGen { attribute: a })))
            .collect();
        (mpk, sks)
    }

    #[test]
    fn symmetric_roundtrip_and_unknown_key() {
        let mut s = ready();
        let k = handle(s.call(&user(), Request::SymmKeygen));
        let c = handle(s.call(&user(), Request::SymmEnc { k, m: b"m".to_vec() }));
        assert_eq!(s.call(&user(), Request::SymmDec { k, c }), Ok(Reply::Plaintext(b"m".to_vec())));
        assert_eq!(s.call(&user(), Request::SymmDec { k: c, c }), Err(Bottom));
        assert_eq!(s.call(&user(), Request::SymmEnc { k: [0; 16], m: vec![] }), Err(Bottom));
    }

    #[test]
    fn abe_decryption_needs_registered_satisfying_keys_of_the_right_authority() {
        let mut s = ready();
        let (mpk, sks) = abe_provider(&mut s, "sp");
        let (_, foreign) = abe_provider(&mut s, "other");
        let policy = Policy::and(vec![Policy::leaf("agg"), Policy::leaf("svc")]);
        let c = handle(s.call(&user(), Request::AbeEnc { policy: policy.clone(), mpk, m: b"k".to_vec() }));
        let dec = |s: &mut IdealState, keys: Vec<Handle>| s.call(&user(), Request::AbeDec { keys, policy: policy.clone(), c });
        assert_eq!(dec(&mut s, sks.clone()), Ok(Reply::Plaintext(b"k".to_vec())));
        assert_eq!(dec(&mut s, vec![sks[0]]), Err(Bottom));
        // Never generated.
        assert_eq!(dec(&mut s, vec![sks[0], [7; 16]]), Err(Bottom));
        // Same attribute names, other authority.
        assert_eq!(dec(&mut s, foreign), Err(Bottom));
        // Attribute outside the authority's list.
        let bad = Policy::leaf("nope");
        assert_eq!(s.call(&user(), Request::AbeEnc { policy: bad, mpk, m: vec![] }), Err(Bottom));
    }

    #[test]
    fn registration_requires_provider_setup_and_updates_edge_table() {
        let mut s = ready();
        let e = Party::Edge("e".into());
        assert_eq!(
            s.call(&e, Request::RegisterCoorEnc { spid: "sp".into(), e: "e".into() }),
            Err(Bottom)
        );
        assert!(s.e_table.is_empty());
        s.call(
            &sp(),
            Request::SpSetup {
                spid: "sp".into(),
                enc_coor_app: [1; 16],
                k_c: [2; 16],
                enc_agg_app: [3; 16],
                k_a: [4; 16],
                boot_app: b"boot".to_vec(),
                attest_prim: vec![],
            },
        )
        .unwrap();
        assert_eq!(
            s.call(&e, Request::RegisterAggEnc { spid: "sp".into(), e: "e".into() }),
            Ok(Reply::Apps { enc_app: [3; 16], boot_app: b"boot".to_vec() })
        );
        assert_eq!(s.e_table.len(), 1);
        // Only the edge itself may register.
        assert_eq!(
            s.call(&user(), Request::RegisterCoorEnc { spid: "sp".into(), e: "e".into() }),
            Err(Bottom)
        );
    }

    #[test]
    fn undefined_callers_and_calls_before_setup_are_refused() {
        let mut s = IdealState::new(0);
        assert_eq!(s.call(&user(), Request::SymmKeygen), Err(Bottom));
        let mut s = ready();
        assert_eq!(s.call(&Party::User("mallory".into()), Request::SymmKeygen), Err(Bottom));
        assert_eq!(s.call(&Party::Enclave([5; 16]), Request::SymmKeygen), Err(Bottom));
        // Install only from registered enclave hosts, with the session index.
        assert_eq!(s.call(&Party::Edge("bare".into()), Request::Install { idx: 9, prog: vec![] }), Err(Bottom));
        assert_eq!(s.call(&Party::Edge("e".into()), Request::Install { idx: 8, prog: vec![] }), Err(Bottom));
        let eid = handle(s.call(&Party::Edge("e".into()), Request::Install { idx: 9, prog: vec![1] }));
        // Resume is keyed by the installing party.
        let input = EnclaveInput::Provision;
        assert_eq!(s.call(&Party::Edge("bare".into()), Request::Resume { eid, input }), Err(Bottom));
    }

    #[test]
    fn resume_outputs_are_signed_over_program_and_output() {
        let mut s = ready();
        let e = Party::Edge("e".into());
        let eid = handle(s.call(&e, Request::Install { idx: 9, prog: b"rogue".to_vec() }));
        let Ok(Reply::Resumed { output, signature }) = s.call(&e, Request::Resume { eid, input: EnclaveInput::Provision })
        else {
            panic!("resume failed")
        };
        assert_eq!(output, EnclaveOutput::Reject);
        let body = [&9u64.to_be_bytes()[..], &eid, b"rogue", &[0]].concat();
        assert!(crate::envelope::verify(&s.tee_public_key().unwrap(), &body, &signature));
    }

    #[test]
    fn same_seed_same_state_same_replies() {
        let run = || {
            let mut s = ready();
            let (mpk, _) = abe_provider(&mut s, "sp");
            let k = handle(s.call(&user(), Request::SymmKeygen));
            (mpk, k)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn replies_depend_only_on_state_and_request() {
        let mut a = ready();
        handle(a.call(&sp(), Request::AbeSetup { spid: "sp".into(), attributes: vec!["x".into()] }));
        let k = handle(a.call(&user(), Request::SymmKeygen));
        let mut b = a.clone();
        let req = Request::SymmEnc { k, m: b"m".to_vec() };
        assert_eq!(a.call(&user(), req.clone()), b.call(&user(), req));
        assert_eq!(a.disclosures, b.disclosures);
        assert_eq!(a.symm_e_table, b.symm_e_table);
    }
}
