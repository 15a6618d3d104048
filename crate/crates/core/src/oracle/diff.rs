//! Runs one script against the real stack and against [`IdealState`] and
//! compares what each step makes observable: success or failure, which
//! parties can read each tracked plaintext, and how the shared tables grew.
//!
//! Party labels are `sp:<id>`, `edge:<id>`, `user:<id>`, `adversary` and
//! `enclave:<edge>#<line>.<k>` for the k-th enclave installed on `<edge>`
//! while running script line `<line>`. Tracked plaintexts are the app keys
//! and apps (`K_C:`, `K_A:`, `CoorApp:`, `AggApp:`), the attribute keys
//! (`A:<sp>`), and per request line the update (`U:<line>`) and the reply
//! (`R:<line>`).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use latteo_transport::{Frame, MsgType, TransportError};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::abe::Policy;
use crate::agg::client::open_response;
use crate::agg::{AggregatorHost, Client, ClientPayload};
use crate::enclave::{Eid, HostEvent, Platform, TeeHost};
use crate::envelope::SigningKey;
use crate::mesh::apps::AppOutput;
use crate::mesh::{
    self, onboard_aggregator, onboard_coordinator, CoordinatorHost, HostBehavior, InProcessLink, Link,
    LinkEvent, Provider, ProviderConfig, ReleasedKey,
};

use super::ideal::{
    AppKind, EnclaveInput, EnclaveOutput, Handle, IdealState, Mem, Party, Reply, Request, HANDLE_BITS,
    PAYLOAD_UPDATE, PAYLOAD_WEIGHTS,
};
use super::script::{Action, Behavior, RequestKind, Script, ScriptError, Step};

pub const TABLE_EDGES: &str = "eTable";
pub const TABLE_ENCLAVES: &str = "tee";
pub const TABLE_APP_KEY_RELEASES: &str = "coordinator_app_key_releases";
pub const TABLE_CLUSTER_KEY_RELEASES: &str = "cluster_key_releases";
pub const TABLE_AGG_KEY_RELEASES: &str = "aggregator_key_releases";
pub const TABLE_CLIENT_IDS: &str = "client_ids";
pub const TABLE_UPDATES: &str = "updates";

const ATTRIBUTES: [&str; 2] = ["agg", "latteo"];
const SID: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    Bottom,
}

/// What one step made observable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub status: Status,
    /// Tracked plaintext label to the parties that can read it so far.
    pub visibility: BTreeMap<String, BTreeSet<String>>,
    /// Rows added to each projected table by this step.
    pub table_delta: BTreeMap<&'static str, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Equivalent { steps: usize },
    Diverged {
        line: usize,
        action: String,
        aspect: &'static str,
        real: String,
        ideal: String,
    },
}

impl Verdict {
    pub fn is_equivalent(&self) -> bool {
        matches!(self, Verdict::Equivalent { .. })
    }
}

/// Both worlds' observations, step by step, and the verdict.
#[derive(Debug, Clone)]
pub struct DiffReport {
    pub real: Vec<Observation>,
    pub ideal: Vec<Observation>,
    pub verdict: Verdict,
}

/// Parses `text` and runs it. Scripts naming undeclared parties are
/// rejected before either world runs.
pub fn differential_run(text: &str, seed: u64) -> Result<DiffReport, ScriptError> {
    Ok(run_script(&Script::parse(text)?, seed))
}

pub fn run_script(script: &Script, seed: u64) -> DiffReport {
    let mut real = RealWorld::new(seed);
    let mut ideal = IdealWorld::new(script, seed);
    let mut report = DiffReport {
        real: Vec::new(),
        ideal: Vec::new(),
        verdict: Verdict::Equivalent { steps: script.steps.len() },
    };
    for step in &script.steps {
        let r = real.step(step);
        let i = ideal.step(step);
        let diverged = |aspect, real: String, ideal: String| Verdict::Diverged {
            line: step.line,
            action: step.action.to_string(),
            aspect,
            real,
            ideal,
        };
        let verdict = if r.status != i.status {
            Some(diverged("status", format!("{:?}", r.status), format!("{:?}", i.status)))
        } else if r.visibility != i.visibility {
            Some(diverged("visibility", format!("{:?}", r.visibility), format!("{:?}", i.visibility)))
        } else if r.table_delta != i.table_delta {
            Some(diverged("tables", format!("{:?}", r.table_delta), format!("{:?}", i.table_delta)))
        } else {
            None
        };
        report.real.push(r);
        report.ideal.push(i);
        if let Some(v) = verdict {
            report.verdict = v;
            break;
        }
    }
    report
}

fn delta(before: &BTreeMap<&'static str, u64>, after: &BTreeMap<&'static str, u64>) -> BTreeMap<&'static str, u64> {
    after
        .iter()
        .map(|(k, v)| (*k, v - before.get(k).copied().unwrap_or(0)))
        .collect()
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

fn enclave_label(e: &str, line: usize, k: usize) -> String {
    format!("enclave:{e}#{line}.{k}")
}

/// Cumulative visibility, fed by labelled plaintexts and party views.
#[derive(Default)]
struct Visibility {
    needles: Vec<(String, Vec<u8>)>,
    sets: BTreeMap<String, BTreeSet<String>>,
}

impl Visibility {
    fn track(&mut self, label: &str, needle: Vec<u8>) {
        self.needles.push((label.to_string(), needle));
    }

    fn learn(&mut self, label: &str, party: &str) {
        self.sets.entry(label.to_string()).or_default().insert(party.to_string());
    }

    /// Marks `party` for every tracked plaintext found inside `bytes`.
    fn scan(&mut self, party: &str, bytes: &[u8]) {
        let hits: Vec<String> = self
            .needles
            .iter()
            .filter(|(_, n)| contains(bytes, n))
            .map(|(l, _)| l.clone())
            .collect();
        for l in hits {
            self.learn(&l, party);
        }
    }

    /// Marks `party` for every tracked plaintext equal to `value`.
    fn matches(&mut self, party: &str, value: &[u8]) {
        let hits: Vec<String> = self
            .needles
            .iter()
            .filter(|(_, n)| n.as_slice() == value)
            .map(|(l, _)| l.clone())
            .collect();
        for l in hits {
            self.learn(&l, party);
        }
    }
}

// ---------------------------------------------------------------- real world

/// A link to a party that is not there.
struct Unreachable;

impl Link for Unreachable {
    fn exchange(&mut self, _: Frame) -> Result<Frame, TransportError> {
        Err(TransportError::NoSuchEndpoint("coordinator".into()))
    }
}

type Log = Arc<Mutex<Vec<LinkEvent>>>;

struct RealWorld {
    platform: Platform,
    foreign: Platform,
    providers: BTreeMap<String, Arc<Provider>>,
    hosts: BTreeMap<String, (TeeHost, bool)>,
    users: BTreeMap<String, (Client, String)>,
    coordinators: BTreeMap<String, Vec<Arc<CoordinatorHost>>>,
    aggregators: Vec<(String, AggregatorHost)>,
    last_coordinator_evidence: Option<Vec<u8>>,
    last_aggregator_evidence: Option<Vec<u8>>,
    packages: u64,
    host_cursor: BTreeMap<String, usize>,
    log_cursor: HashMap<(String, Eid), usize>,
    labels: HashMap<(String, Eid), String>,
    vis: Visibility,
    rng: StdRng,
}

impl RealWorld {
    fn new(seed: u64) -> Self {
        RealWorld {
            platform: Platform::new(),
            foreign: Platform::new(),
            providers: BTreeMap::new(),
            hosts: BTreeMap::new(),
            users: BTreeMap::new(),
            coordinators: BTreeMap::new(),
            aggregators: Vec::new(),
            last_coordinator_evidence: None,
            last_aggregator_evidence: None,
            packages: 0,
            host_cursor: BTreeMap::new(),
            log_cursor: HashMap::new(),
            labels: HashMap::new(),
            vis: Visibility::default(),
            rng: StdRng::seed_from_u64(seed ^ 0x5eed),
        }
    }

    fn tables(&self) -> BTreeMap<&'static str, u64> {
        let mut t = BTreeMap::new();
        t.insert(TABLE_EDGES, self.packages);
        let installs = self
            .hosts
            .values()
            .filter(|(_, trusted)| *trusted)
            .flat_map(|(h, _)| h.transcript())
            .filter(|e| matches!(e, HostEvent::Install { .. }))
            .count();
        t.insert(TABLE_ENCLAVES, installs as u64);
        let releases: Vec<_> = self.providers.values().flat_map(|p| p.releases()).collect();
        let app = releases.iter().filter(|r| r.key == ReleasedKey::CoordinatorAppKey).count();
        t.insert(TABLE_APP_KEY_RELEASES, app as u64);
        t.insert(TABLE_CLUSTER_KEY_RELEASES, (releases.len() - app) as u64);
        let agg: u64 = self.coordinators.values().flatten().map(|c| c.releases()).sum();
        t.insert(TABLE_AGG_KEY_RELEASES, agg);
        let (mut ids, mut updates) = (0, 0);
        for (_, a) in &self.aggregators {
            let s = a.status().expect("provisioned aggregators answer status");
            ids += s.issued_ids as u64;
            updates += s.version;
        }
        t.insert(TABLE_CLIENT_IDS, ids);
        t.insert(TABLE_UPDATES, updates);
        t
    }

    fn step(&mut self, step: &Step) -> Observation {
        let before = self.tables();
        let mut views: Vec<(String, Vec<u8>)> = Vec::new();
        let status = self.act(step, &mut views);
        self.observe_hosts(step, &mut views);
        for (party, bytes) in &views {
            self.vis.scan(party, bytes);
        }
        Observation {
            status,
            visibility: self.vis.sets.clone(),
            table_delta: delta(&before, &self.tables()),
        }
    }

    /// Frames on a link are seen by the adversary and by both ends.
    fn collect_frames(log: &Log, ends: &[String], views: &mut Vec<(String, Vec<u8>)>) -> u64 {
        let mut packages = 0;
        for ev in log.lock().unwrap().iter() {
            let f = match ev {
                LinkEvent::Sent(f) => f,
                LinkEvent::Received(f) => {
                    if matches!(f.msg_type, MsgType::PackageCoor | MsgType::PackageAgg) && !f.payload.is_empty() {
                        packages += 1;
                    }
                    f
                }
                LinkEvent::Dropped => continue,
            };
            views.push(("adversary".into(), f.payload.clone()));
            for end in ends {
                views.push((end.clone(), f.payload.clone()));
            }
        }
        packages
    }

    fn act(&mut self, step: &Step, views: &mut Vec<(String, Vec<u8>)>) -> Status {
        match &step.action {
            Action::Provider { sp } => {
                let mut config = ProviderConfig::simple(self.platform.root_key(), 2, vec![0.5, -1.25, 2.0, 0.75]);
                config.identity = sp.clone();
                let p = Provider::setup(config, &mesh::coordinator_image(), &mesh::aggregator_image())
                    .expect("valid provider configuration");
                let secrets = p.audit_secrets();
                let owner = format!("sp:{sp}");
                let mut own = |label: String, needle: Vec<u8>| {
                    self.vis.track(&label, needle);
                    self.vis.learn(&label, &owner);
                };
                own(format!("K_C:{sp}"), secrets.coordinator_app_key.to_vec());
                own(format!("K_A:{sp}"), secrets.aggregator_app_key.to_vec());
                for k in secrets.attribute_keys {
                    own(format!("A:{sp}"), k.to_vec());
                }
                own(format!("CoorApp:{sp}"), mesh::coordinator_image());
                own(format!("AggApp:{sp}"), mesh::aggregator_image());
                self.providers.insert(sp.clone(), Arc::new(p));
                Status::Ok
            }
            Action::Edge { e, trusted } => {
                let platform = if *trusted { &self.platform } else { &self.foreign };
                self.hosts.insert(e.clone(), (platform.host(e, mesh::registry()), *trusted));
                Status::Ok
            }
            Action::User { u, sp } => {
                let p = &self.providers[sp];
                let sk = SigningKey::generate();
                let reg = p.register_user(u, &sk.verifying_key());
                let client = Client::enroll(sk, &reg, &p.verifying_key()).expect("fresh registration opens");
                self.users.insert(u.clone(), (client, sp.clone()));
                Status::Ok
            }
            Action::Coordinator { e, sp, behavior } => {
                let provider = self.providers[sp].clone();
                let host = self.hosts[e].0.clone();
                let log: Log = Arc::default();
                let mut link = InProcessLink::new(provider.clone(), e).with_log(log.clone());
                let behavior = match behavior {
                    Behavior::Honest => HostBehavior::Honest,
                    Behavior::Tamper => HostBehavior::TamperPackage,
                    Behavior::Swap => HostBehavior::SwapCoordinatorBeforeMidRa,
                    Behavior::Replay => HostBehavior::ReplayEvidence(
                        self.last_coordinator_evidence.clone().unwrap_or_else(|| b"stale".to_vec()),
                    ),
                };
                let s = onboard_coordinator(&host, &mut link, &provider.verifying_key(), behavior);
                self.packages += Self::collect_frames(&log, &[format!("edge:{e}"), format!("sp:{sp}")], views);
                views.extend(s.transcript.iter().map(|t| (format!("edge:{e}"), t.bytes().to_vec())));
                if let Some(ev) = &s.last_evidence {
                    self.last_coordinator_evidence = Some(ev.clone());
                }
                match (&s.handle, s.is_provisioned()) {
                    (Some(h), true) => {
                        let c = CoordinatorHost::new(host, h.clone());
                        self.coordinators.entry(sp.clone()).or_default().push(Arc::new(c));
                        Status::Ok
                    }
                    _ => Status::Bottom,
                }
            }
            Action::Aggregator { e, sp, behavior } => {
                let provider = self.providers[sp].clone();
                let host = self.hosts[e].0.clone();
                let plog: Log = Arc::default();
                let clog: Log = Arc::default();
                let mut plink = InProcessLink::new(provider.clone(), e).with_log(plog.clone());
                let behavior = match behavior {
                    Behavior::Honest => HostBehavior::Honest,
                    Behavior::Tamper => HostBehavior::TamperPackage,
                    Behavior::Swap => HostBehavior::SwapAggregator,
                    Behavior::Replay => HostBehavior::ReplayEvidence(
                        self.last_aggregator_evidence.clone().unwrap_or_else(|| b"stale".to_vec()),
                    ),
                };
                let vk = provider.verifying_key();
                let s = match self.coordinators.get(sp).and_then(|c| c.last()) {
                    Some(c) => {
                        let mut clink = InProcessLink::new(c.clone(), e).with_log(clog.clone());
                        onboard_aggregator(&host, &mut plink, &mut clink, &vk, behavior)
                    }
                    None => onboard_aggregator(&host, &mut plink, &mut Unreachable, &vk, behavior),
                };
                self.packages += Self::collect_frames(&plog, &[format!("edge:{e}"), format!("sp:{sp}")], views);
                Self::collect_frames(&clog, &[format!("edge:{e}")], views);
                views.extend(s.transcript.iter().map(|t| (format!("edge:{e}"), t.bytes().to_vec())));
                if let Some(ev) = &s.last_evidence {
                    self.last_aggregator_evidence = Some(ev.clone());
                }
                match (&s.handle, s.is_provisioned()) {
                    (Some(h), true) => {
                        self.aggregators.push((e.clone(), AggregatorHost::new(host, h.eid)));
                        Status::Ok
                    }
                    _ => Status::Bottom,
                }
            }
            Action::Request { u, e, kind } => self.request(step.line, u, e, *kind, views),
        }
    }

    fn request(&mut self, line: usize, u: &str, e: &str, kind: RequestKind, views: &mut Vec<(String, Vec<u8>)>) -> Status {
        let user = format!("user:{u}");
        let (client, sp) = self.users.get(u).expect("declared user");
        let update = match kind {
            RequestKind::Weights => None,
            _ => {
                let pre = client
                    .weights
                    .clone()
                    .unwrap_or_else(|| self.providers[sp.as_str()].config().initial_weights.clone());
                let trained: Vec<f64> = pre.iter().map(|w| w + self.rng.gen_range(-1.0..1.0)).collect();
                let payload = ClientPayload::Aggregation { pre: pre.clone(), trained: trained.clone() }.to_bytes();
                let label = format!("U:{line}");
                self.vis.track(&label, payload);
                self.vis.learn(&label, &user);
                Some((pre, trained))
            }
        };
        let (req, pending) = client
            .build_request(update.as_ref().map(|(p, t)| (p.as_slice(), t.as_slice())))
            .expect("well-formed request");
        let mut bytes = req.to_bytes();
        if kind == RequestKind::Garbage {
            let i = bytes.len() - 20;
            bytes[i] ^= 0x01;
        }
        let Some((_, agg)) = self.aggregators.iter().rev().find(|(x, _)| x == e) else {
            return Status::Bottom;
        };
        let agg = agg.clone();
        let log: Log = Arc::default();
        let mut link = InProcessLink::new(Arc::new(agg.clone()), u).with_log(log.clone());
        let reply = link.exchange(Frame::new(MsgType::UserRequest, bytes));
        Self::collect_frames(&log, &[format!("edge:{e}")], views);
        let eid = agg.eid();
        let label = self.labels.get(&(e.to_string(), eid)).cloned().expect("aggregator enclaves are labelled");
        let lines = agg.host().introspect_log(eid);
        let seen = self.log_cursor.entry((e.to_string(), eid)).or_insert(0);
        let fresh = lines[*seen..].join("\n");
        *seen = lines.len();
        if update.is_some() {
            let payload_hex = hex::encode(&self.vis.needles.last().expect("tracked above").1);
            if fresh.contains(&payload_hex) {
                self.vis.learn(&format!("U:{line}"), &label);
            }
        }
        let Ok(frame) = reply else { return Status::Bottom };
        match open_response(&pending, &frame.payload) {
            Ok(resp) => {
                // Byte-equal replies from earlier lines become readable too,
                // matching the value semantics of the ideal world.
                let bytes = resp.to_bytes();
                self.vis.track(&format!("R:{line}"), bytes.clone());
                self.vis.matches(&user, &bytes);
                self.vis.matches(&label, &bytes);
                if let Some((c, _)) = self.users.get_mut(u) {
                    c.absorb(&resp);
                }
                Status::Ok
            }
            Err(_) => Status::Bottom,
        }
    }

    /// Labels new enclaves, reads what they announced, and hands new host
    /// transcript bytes to the host's view.
    fn observe_hosts(&mut self, step: &Step, views: &mut Vec<(String, Vec<u8>)>) {
        let sp = match &step.action {
            Action::Coordinator { sp, .. } | Action::Aggregator { sp, .. } => Some(sp.clone()),
            _ => None,
        };
        let role = match &step.action {
            Action::Coordinator { .. } => Some(AppKind::Coordinator),
            Action::Aggregator { .. } => Some(AppKind::Aggregator),
            _ => None,
        };
        for (e, (host, _)) in &self.hosts {
            let events = host.transcript();
            let cursor = self.host_cursor.entry(e.clone()).or_insert(0);
            let mut k = 0;
            for ev in &events[*cursor..] {
                views.push((format!("edge:{e}"), ev.bytes().to_vec()));
                match ev {
                    HostEvent::Install { eid, .. } => {
                        self.labels.insert((e.clone(), *eid), enclave_label(e, step.line, k));
                        k += 1;
                    }
                    HostEvent::Output { eid, bytes } => {
                        let (Some(sp), Some(role)) = (&sp, role) else { continue };
                        let Some(label) = self.labels.get(&(e.clone(), *eid)) else { continue };
                        let learned: &[&str] = match (AppOutput::from_bytes(bytes), role) {
                            (Ok(AppOutput::Launched), AppKind::Coordinator) => &["K_C", "CoorApp"],
                            (Ok(AppOutput::Launched), AppKind::Aggregator) => &["K_A", "A", "AggApp"],
                            (Ok(AppOutput::Provisioned { .. }), _) => &["K_A", "A"],
                            _ => &[],
                        };
                        for what in learned {
                            self.vis.learn(&format!("{what}:{sp}"), label);
                        }
                    }
                    HostEvent::Input { .. } => {}
                }
            }
            *cursor = events.len();
        }
    }
}

// --------------------------------------------------------------- ideal world

struct SpInfo {
    mpk: Handle,
}

struct IdealWorld {
    st: IdealState,
    sps: BTreeMap<String, SpInfo>,
    users: BTreeMap<String, String>,
    labels: BTreeMap<Handle, String>,
    scanned: usize,
    vis: Visibility,
    policy: Policy,
}

impl IdealWorld {
    fn new(script: &Script, seed: u64) -> Self {
        let mut st = IdealState::new(seed);
        let edges = script.edges();
        st.call(
            &Party::Environment,
            Request::SystemSetup {
                providers: script.providers(),
                edges: edges.iter().map(|(e, _)| e.clone()).collect(),
                users: script.users(),
                tee_parties: edges.iter().filter(|(_, t)| *t).map(|(e, _)| e.clone()).collect(),
                lambda: HANDLE_BITS,
                sid: SID,
            },
        )
        .expect("first setup succeeds");
        IdealWorld {
            st,
            sps: BTreeMap::new(),
            users: BTreeMap::new(),
            labels: BTreeMap::new(),
            scanned: 0,
            vis: Visibility::default(),
            policy: Policy::and(ATTRIBUTES.iter().map(|a| Policy::leaf(*a)).collect()),
        }
    }

    fn tables(&self) -> BTreeMap<&'static str, u64> {
        let mut t = BTreeMap::new();
        t.insert(TABLE_EDGES, self.st.e_table.len() as u64);
        t.insert(TABLE_ENCLAVES, self.st.tee.len() as u64);
        let mems = || self.st.tee.iter().map(|(_, t)| &t.mem);
        let count = |f: &dyn Fn(&Mem) -> bool| mems().filter(|m| f(m)).count() as u64;
        t.insert(TABLE_APP_KEY_RELEASES, count(&|m| matches!(m, Mem::Coordinator { .. })));
        t.insert(
            TABLE_CLUSTER_KEY_RELEASES,
            count(&|m| matches!(m, Mem::Coordinator { keys: Some(_), .. })),
        );
        t.insert(TABLE_AGG_KEY_RELEASES, count(&|m| matches!(m, Mem::Aggregator { .. })));
        let (mut ids, mut updates) = (0, 0);
        for m in mems() {
            if let Mem::Aggregator { ids: i, version, .. } = m {
                ids += i.len() as u64;
                updates += version;
            }
        }
        t.insert(TABLE_CLIENT_IDS, ids);
        t.insert(TABLE_UPDATES, updates);
        t
    }

    fn step(&mut self, step: &Step) -> Observation {
        let before = self.tables();
        let status = match self.act(step) {
            Some(()) => Status::Ok,
            None => Status::Bottom,
        };
        for (party, value) in self.st.disclosures[self.scanned..].to_vec() {
            let label = match &party {
                Party::Provider(s) => format!("sp:{s}"),
                Party::Edge(e) => format!("edge:{e}"),
                Party::User(u) => format!("user:{u}"),
                Party::Enclave(eid) => self.labels.get(eid).cloned().expect("enclaves are labelled"),
                Party::Adversary => "adversary".into(),
                // The simulator's view is internal to the reference.
                Party::Simulator | Party::Environment => continue,
            };
            self.vis.matches(&label, &value);
        }
        self.scanned = self.st.disclosures.len();
        Observation {
            status,
            visibility: self.vis.sets.clone(),
            table_delta: delta(&before, &self.tables()),
        }
    }

    fn handle(r: Result<Reply, super::ideal::Bottom>) -> Option<Handle> {
        match r {
            Ok(Reply::Handle(h)) => Some(h),
            _ => None,
        }
    }

    fn install(&mut self, e: &str, line: usize, k: usize, prog: Vec<u8>) -> Option<Handle> {
        let eid = Self::handle(self.st.call(&Party::Edge(e.into()), Request::Install { idx: SID, prog }))?;
        self.labels.insert(eid, enclave_label(e, line, k));
        Some(eid)
    }

    fn resume(&mut self, e: &str, eid: Handle, input: EnclaveInput) -> Option<EnclaveOutput> {
        match self.st.call(&Party::Edge(e.into()), Request::Resume { eid, input }) {
            Ok(Reply::Resumed { output: EnclaveOutput::Reject, .. }) | Err(_) => None,
            Ok(Reply::Resumed { output, .. }) => Some(output),
            Ok(_) => None,
        }
    }

    fn act(&mut self, step: &Step) -> Option<()> {
        let line = step.line;
        match &step.action {
            Action::Provider { sp } => {
                let p = Party::Provider(sp.clone());
                let attributes: Vec<String> = ATTRIBUTES.iter().map(|a| a.to_string()).collect();
                let mpk = Self::handle(self.st.call(&p, Request::AbeSetup { spid: sp.clone(), attributes: attributes.clone() }))?;
                for a in attributes {
                    let sk = Self::handle(self.st.call(&p, Request::AbeKeyGen { attribute: a }))?;
                    self.vis.track(&format!("A:{sp}"), sk.to_vec());
                }
                let k_c = Self::handle(self.st.call(&p, Request::SymmKeygen))?;
                let k_a = Self::handle(self.st.call(&p, Request::SymmKeygen))?;
                self.vis.track(&format!("K_C:{sp}"), k_c.to_vec());
                self.vis.track(&format!("K_A:{sp}"), k_a.to_vec());
                let coor_app = format!("coordinator application of {sp}").into_bytes();
                let agg_app = format!("aggregator application of {sp}").into_bytes();
                self.vis.track(&format!("CoorApp:{sp}"), coor_app.clone());
                self.vis.track(&format!("AggApp:{sp}"), agg_app.clone());
                let enc_coor_app = Self::handle(self.st.call(&p, Request::SymmEnc { k: k_c, m: coor_app }))?;
                let enc_agg_app = Self::handle(self.st.call(&p, Request::SymmEnc { k: k_a, m: agg_app }))?;
                let boot_app = format!("boot loader of {sp}").into_bytes();
                self.st
                    .call(
                        &p,
                        Request::SpSetup {
                            spid: sp.clone(),
                            enc_coor_app,
                            k_c,
                            enc_agg_app,
                            k_a,
                            boot_app,
                            attest_prim: b"boot,coordinator,aggregator".to_vec(),
                        },
                    )
                    .ok()?;
                self.sps.insert(sp.clone(), SpInfo { mpk });
                Some(())
            }
            Action::Edge { .. } => Some(()),
            Action::User { u, sp } => {
                self.st.call(&Party::User(u.clone()), Request::RetrieveMpks).ok()?;
                self.users.insert(u.clone(), sp.clone());
                Some(())
            }
            Action::Coordinator { e, sp, behavior } => {
                let edge = Party::Edge(e.clone());
                let reg = Request::RegisterCoorEnc { spid: sp.clone(), e: e.clone() };
                let Ok(Reply::Apps { boot_app, .. }) = self.st.call(&edge, reg) else { return None };
                // Delivery from the functionality is authentic; a corrupted
                // copy is discarded by the host.
                if *behavior == Behavior::Tamper {
                    return None;
                }
                let mut eid = self.install(e, line, 0, boot_app)?;
                let launch = EnclaveInput::Launch { spid: sp.clone(), kind: AppKind::Coordinator };
                self.resume(e, eid, launch)?;
                match behavior {
                    Behavior::Swap => eid = self.install(e, line, 1, b"rogue coordinator".to_vec())?,
                    // Recorded evidence answers no fresh challenge.
                    Behavior::Replay => return None,
                    _ => {}
                }
                self.resume(e, eid, EnclaveInput::Provision).map(|_| ())
            }
            Action::Aggregator { e, sp, behavior } => {
                let edge = Party::Edge(e.clone());
                let reg = Request::RegisterAggEnc { spid: sp.clone(), e: e.clone() };
                let Ok(Reply::Apps { boot_app, .. }) = self.st.call(&edge, reg) else { return None };
                let prog = match behavior {
                    Behavior::Tamper => return None,
                    Behavior::Swap => b"rogue aggregator".to_vec(),
                    _ => boot_app,
                };
                let eid = self.install(e, line, 0, prog)?;
                if *behavior == Behavior::Replay {
                    return None;
                }
                let launch = EnclaveInput::Launch { spid: sp.clone(), kind: AppKind::Aggregator };
                self.resume(e, eid, launch).map(|_| ())
            }
            Action::Request { u, e, kind } => self.request(line, u, e, *kind),
        }
    }

    fn request(&mut self, line: usize, u: &str, e: &str, kind: RequestKind) -> Option<()> {
        let user = Party::User(u.to_string());
        let sp = self.users.get(u)?.clone();
        let mpk = self.sps.get(&sp)?.mpk;
        self.st.call(&user, Request::RetrieveMpks).ok()?;
        let k_u = Self::handle(self.st.call(&user, Request::SymmKeygen))?;
        let payload = match kind {
            RequestKind::Weights => vec![PAYLOAD_WEIGHTS],
            _ => {
                let p = [&[PAYLOAD_UPDATE][..], &(line as u64).to_be_bytes()].concat();
                self.vis.track(&format!("U:{line}"), p.clone());
                p
            }
        };
        let mut c1 = Self::handle(self.st.call(&user, Request::SymmEnc { k: k_u, m: payload }))?;
        let c2 = Self::handle(self.st.call(
            &user,
            Request::AbeEnc {
                policy: self.policy.clone(),
                mpk,
                m: k_u.to_vec(),
            },
        ))?;
        if kind == RequestKind::Garbage {
            c1[15] ^= 0x01;
        }
        let forward = Request::UserRequest {
            c1,
            c2,
            cert: u.as_bytes().to_vec(),
            e: e.to_string(),
            u: u.to_string(),
        };
        self.st.call(&user, forward).ok()?;
        let edge = Party::Edge(e.to_string());
        let eid = self
            .st
            .tee
            .iter()
            .rev()
            .find(|((_, p), t)| *p == edge && matches!(t.mem, Mem::Aggregator { .. }))
            .map(|((eid, _), _)| *eid)?;
        let input = EnclaveInput::Request { c1, c2, user: u.to_string() };
        let EnclaveOutput::Response { c3 } = self.resume(e, eid, input)? else { return None };
        self.st.call(&edge, Request::ServerResponse { c3, u: u.to_string() }).ok()?;
        let Ok(Reply::Plaintext(r)) = self.st.call(&user, Request::SymmDec { k: k_u, c: c3 }) else {
            return None;
        };
        self.vis.track(&format!("R:{line}"), r);
        Some(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracked_plaintexts_found_inside_larger_views() {
        let mut v = Visibility::default();
        v.track("x", b"secret".to_vec());
        v.scan("edge:a", b"..secret..");
        v.scan("edge:b", b"secre");
        v.matches("user:c", b"..secret..");
        assert_eq!(v.sets["x"], BTreeSet::from(["edge:a".to_string()]));
    }

    #[test]
    fn table_delta_is_per_step() {
        let a = BTreeMap::from([(TABLE_EDGES, 2), (TABLE_UPDATES, 0)]);
        let b = BTreeMap::from([(TABLE_EDGES, 3), (TABLE_UPDATES, 0)]);
        assert_eq!(delta(&a, &b), BTreeMap::from([(TABLE_EDGES, 1), (TABLE_UPDATES, 0)]));
    }
}
