//! Brings up an honest in-process deployment: provider, one coordinator
//! and any number of aggregators on one simulated platform.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::agg::{AggError, AggregatorHost, Client};
use crate::enclave::{Platform, TeeHost};
use crate::envelope::SigningKey;
use crate::mesh::{
    self, onboard_aggregator, onboard_coordinator, CoordinatorHost, HostBehavior, InProcessLink,
    LinkEvent, MeshError, OnboardingSession, Provider, ProviderConfig,
};

pub const COORDINATOR_HOST: &str = "coordinator-host";

pub struct Deployment {
    pub platform: Platform,
    pub provider: Arc<Provider>,
    pub coordinator: Arc<CoordinatorHost>,
    pub aggregators: Vec<AggregatorHost>,
    pub sessions: Vec<OnboardingSession>,
    hosts: HashMap<String, TeeHost>,
    /// Every frame exchanged during onboarding.
    pub network: Arc<Mutex<Vec<LinkEvent>>>,
}

impl Deployment {
    /// `config.platform_root` is overwritten with `platform`'s root.
    /// Aggregators named [`COORDINATOR_HOST`] share the coordinator's machine.
    pub fn start(platform: Platform, mut config: ProviderConfig, aggregator_hosts: &[&str]) -> Result<Self, MeshError> {
        config.platform_root = platform.root_key();
        let provider = Arc::new(Provider::setup(
            config,
            &mesh::coordinator_image(),
            &mesh::aggregator_image(),
        )?);
        let vk = provider.verifying_key();
        let network: Arc<Mutex<Vec<LinkEvent>>> = Arc::default();
        let coor_host = platform.host(COORDINATOR_HOST, mesh::registry());
        let mut link = InProcessLink::new(provider.clone(), COORDINATOR_HOST).with_log(network.clone());
        let s = onboard_coordinator(&coor_host, &mut link, &vk, HostBehavior::Honest);
        if let Some(r) = s.failure() {
            return Err(MeshError::Onboarding(r.to_string()));
        }
        let handle = s.handle.clone().expect("provisioned session has an enclave");
        let mut d = Deployment {
            coordinator: Arc::new(CoordinatorHost::new(coor_host.clone(), handle)),
            platform,
            provider,
            aggregators: Vec::new(),
            sessions: vec![s],
            hosts: HashMap::from([(COORDINATOR_HOST.to_string(), coor_host)]),
            network,
        };
        for h in aggregator_hosts {
            d.add_aggregator(h)?;
        }
        Ok(d)
    }

    /// The machine named `host_id`, created on first use.
    pub fn host(&mut self, host_id: &str) -> TeeHost {
        self.hosts
            .entry(host_id.to_string())
            .or_insert_with(|| self.platform.host(host_id, mesh::registry()))
            .clone()
    }

    pub fn hosts(&self) -> impl Iterator<Item = &TeeHost> {
        self.hosts.values()
    }

    pub fn add_aggregator(&mut self, host_id: &str) -> Result<&AggregatorHost, MeshError> {
        let host = self.host(host_id);
        let vk = self.provider.verifying_key();
        let mut p = InProcessLink::new(self.provider.clone(), host_id).with_log(self.network.clone());
        let mut c = InProcessLink::new(self.coordinator.clone(), host_id).with_log(self.network.clone());
        let s = onboard_aggregator(&host, &mut p, &mut c, &vk, HostBehavior::Honest);
        let eid = s.handle.as_ref().map(|h| h.eid);
        self.finish_session(s)?;
        self.aggregators.push(AggregatorHost::new(host, eid.expect("provisioned session has an enclave")));
        Ok(self.aggregators.last().unwrap())
    }

    fn finish_session(&mut self, s: OnboardingSession) -> Result<(), MeshError> {
        let failure = s.failure().map(str::to_string);
        self.sessions.push(s);
        match failure {
            Some(r) => Err(MeshError::Onboarding(r)),
            None => Ok(()),
        }
    }

    /// Registers a fresh client with the provider.
    pub fn register(&self, identity: &str) -> Result<Client, AggError> {
        let sk = SigningKey::generate();
        let reg = self.provider.register_user(identity, &sk.verifying_key());
        Client::enroll(sk, &reg, &self.provider.verifying_key())
    }
}
