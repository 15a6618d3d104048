use std::sync::Arc;
use std::thread;

use latteo_core::deploy::{Deployment, COORDINATOR_HOST};
use latteo_core::enclave::{HostEvent, Platform};
use latteo_core::mesh::apps::AppOutput;
use latteo_core::mesh::{
    self, onboard_aggregator, onboard_coordinator, CoordinatorHost, HostBehavior, InProcessLink,
    Phase, Provider, ProviderConfig, ReleasedKey,
};
use latteo_transport::tcp::{self, ServerConfig, TcpConnection};

fn provider_on(platform: &Platform) -> Arc<Provider> {
    Arc::new(
        Provider::setup(
            ProviderConfig::simple(platform.root_key(), 2, vec![0.0; 4]),
            &mesh::coordinator_image(),
            &mesh::aggregator_image(),
        )
        .unwrap(),
    )
}

/// Deliveries output by the coordinator enclave, read off its host transcript.
fn enclave_releases(d: &Deployment) -> u64 {
    let eid = d.coordinator.handle().eid;
    let host = d.hosts().find(|h| h.host_id() == COORDINATOR_HOST).unwrap();
    host.transcript()
        .iter()
        .filter(|e| matches!(e, HostEvent::Output { eid: x, .. } if *x == eid))
        .filter(|e| matches!(AppOutput::from_bytes(e.bytes()), Ok(AppOutput::Release(_))))
        .count() as u64
}

fn cluster_releases(p: &Provider) -> usize {
    p.releases()
        .iter()
        .filter(|r| matches!(r.key, ReleasedKey::ClusterKeys { .. }))
        .count()
}

#[test]
fn honest_coordinator_reaches_provisioned_through_both_stages() {
    let platform = Platform::new();
    let provider = provider_on(&platform);
    let host = platform.host("h0", mesh::registry());
    let mut link = InProcessLink::new(provider.clone(), "h0");
    let s = onboard_coordinator(&host, &mut link, &provider.verifying_key(), HostBehavior::Honest);
    assert!(s.is_provisioned(), "{:?}", s.phase());
    assert_eq!(
        s.history(),
        &[
            Phase::PackageSent,
            Phase::EnclaveBooted,
            Phase::HighRa,
            Phase::CoorRunning,
            Phase::MidRa,
            Phase::Provisioned
        ]
    );
    let table = provider.server_table();
    assert_eq!(table.len(), 1);
    assert_eq!(Some(&table[0].0), s.cluster_id.as_ref());
    assert_eq!(table[0].1, vec!["agg".to_string(), "latteo".to_string()]);
    // The enclave now runs the coordinator, not the loader.
    let eid = s.handle.as_ref().unwrap().eid;
    assert_eq!(host.running_measurement(eid), Some(provider.coordinator_measurement()));
    let keys: Vec<_> = provider.releases().into_iter().map(|r| r.key).collect();
    assert_eq!(keys.len(), 2);
    assert_eq!(keys[0], ReleasedKey::CoordinatorAppKey);
}

#[test]
fn swapping_the_coordinator_before_second_attestation_yields_no_keys() {
    let platform = Platform::new();
    let provider = provider_on(&platform);
    for _ in 0..5 {
        let host = platform.host("h0", mesh::registry());
        let mut link = InProcessLink::new(provider.clone(), "h0");
        let s = onboard_coordinator(
            &host,
            &mut link,
            &provider.verifying_key(),
            HostBehavior::SwapCoordinatorBeforeMidRa,
        );
        assert!(s.failure().unwrap().contains("mid-level attestation rejected"), "{:?}", s.phase());
        assert!(!s.history().contains(&Phase::MidRa));
    }
    assert_eq!(cluster_releases(&provider), 0);
    assert!(provider.server_table().is_empty());
}

#[test]
fn untrusted_platform_fails_first_attestation() {
    let trusted = Platform::new();
    let provider = provider_on(&trusted);
    let rogue_platform = Platform::new();
    let host = rogue_platform.host("h0", mesh::registry());
    let mut link = InProcessLink::new(provider.clone(), "h0");
    let s = onboard_coordinator(&host, &mut link, &provider.verifying_key(), HostBehavior::Honest);
    assert!(s.failure().unwrap().contains("high-level attestation rejected"));
    assert!(!s.history().contains(&Phase::HighRa));
    assert!(provider.releases().is_empty());
}

#[test]
fn tampered_package_is_refused_before_anything_is_installed() {
    let platform = Platform::new();
    let provider = provider_on(&platform);
    let host = platform.host("h0", mesh::registry());
    let mut link = InProcessLink::new(provider.clone(), "h0");
    let s = onboard_coordinator(&host, &mut link, &provider.verifying_key(), HostBehavior::TamperPackage);
    assert_eq!(s.failure(), Some("package signature invalid"));
    assert!(host.transcript().is_empty());
    assert!(provider.releases().is_empty());
}

#[test]
fn replayed_evidence_never_yields_keys() {
    let platform = Platform::new();
    let provider = provider_on(&platform);
    let vk = provider.verifying_key();
    let host = platform.host("h0", mesh::registry());
    let first = onboard_coordinator(&host, &mut InProcessLink::new(provider.clone(), "h0"), &vk, HostBehavior::Honest);
    assert!(first.is_provisioned());
    let recorded = first.last_evidence.clone().unwrap();

    let s = onboard_coordinator(
        &host,
        &mut InProcessLink::new(provider.clone(), "h0"),
        &vk,
        HostBehavior::ReplayEvidence(recorded),
    );
    assert!(s.failure().unwrap().contains("mid-level attestation rejected"));
    assert_eq!(cluster_releases(&provider), 1);
}

#[test]
fn aggregator_on_coordinator_host_uses_local_reports() {
    let d = Deployment::start(Platform::new(), ProviderConfig::simple([0; 32], 2, vec![0.0; 3]), &[COORDINATOR_HOST])
        .unwrap();
    let s = d.sessions.last().unwrap();
    assert!(s.is_provisioned());
    assert_eq!(s.local_attestation, Some(true));
    assert_eq!(
        s.history(),
        &[Phase::PackageSent, Phase::EnclaveBooted, Phase::AggAttested, Phase::Provisioned]
    );
    assert_eq!(s.cluster_id, d.sessions[0].cluster_id);
    let eid = s.handle.as_ref().unwrap().eid;
    let host = d.aggregators[0].host();
    assert_eq!(host.running_measurement(eid), Some(d.provider.aggregator_measurement()));
    assert_eq!(d.coordinator.releases(), 1);
}

#[test]
fn aggregator_on_another_host_uses_quotes() {
    let d = Deployment::start(Platform::new(), ProviderConfig::simple([0; 32], 2, vec![0.0; 3]), &["agg-1", "agg-2"])
        .unwrap();
    for s in &d.sessions[1..] {
        assert!(s.is_provisioned());
        assert_eq!(s.local_attestation, Some(false));
    }
    assert_eq!(d.coordinator.releases(), 2);
}

#[test]
fn rogue_or_replayed_aggregators_get_nothing_from_the_coordinator() {
    let mut d = Deployment::start(Platform::new(), ProviderConfig::simple([0; 32], 2, vec![0.0; 3]), &["agg-1"])
        .unwrap();
    let vk = d.provider.verifying_key();
    let recorded = d.sessions[1].last_evidence.clone().unwrap();
    let before = d.coordinator.releases();
    for (host_id, behavior) in [
        ("agg-2", HostBehavior::SwapAggregator),
        (COORDINATOR_HOST, HostBehavior::SwapAggregator),
        ("agg-1", HostBehavior::ReplayEvidence(recorded)),
    ] {
        let host = d.host(host_id);
        let mut p = InProcessLink::new(d.provider.clone(), host_id);
        let mut c = InProcessLink::new(d.coordinator.clone(), host_id);
        let s = onboard_aggregator(&host, &mut p, &mut c, &vk, behavior);
        assert!(s.failure().unwrap().contains("aggregator attestation rejected"), "{:?}", s.phase());
    }
    // The coordinator enclave itself never emitted a delivery for them.
    assert_eq!(enclave_releases(&d), before);
    assert_eq!(d.coordinator.releases(), before);
}

#[test]
fn second_onboarding_leaves_the_first_enclave_running() {
    let mut d = Deployment::start(Platform::new(), ProviderConfig::simple([0; 32], 2, vec![0.0; 3]), &["agg-1"])
        .unwrap();
    let first = d.sessions[0].handle.clone().unwrap();
    let host = d.host(COORDINATOR_HOST);
    let s = onboard_coordinator(
        &host,
        &mut InProcessLink::new(d.provider.clone(), COORDINATOR_HOST),
        &d.provider.verifying_key(),
        HostBehavior::Honest,
    );
    assert!(s.is_provisioned());
    let second = s.handle.unwrap();
    assert_ne!(first.eid, second.eid);
    assert_ne!(s.cluster_id, d.sessions[0].cluster_id);
    assert_eq!(host.running_measurement(first.eid), Some(d.provider.coordinator_measurement()));
    assert_eq!(d.provider.server_table().len(), 2);
    // The original coordinator still provisions aggregators.
    d.add_aggregator("agg-2").unwrap();
}

#[test]
fn concurrent_coordinator_onboardings_each_get_a_cluster() {
    let platform = Platform::new();
    let provider = provider_on(&platform);
    let vk = provider.verifying_key();
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let provider = provider.clone();
            let host = platform.host(&format!("h{i}"), mesh::registry());
            thread::spawn(move || {
                let mut link = InProcessLink::new(provider, "h");
                onboard_coordinator(&host, &mut link, &vk, HostBehavior::Honest)
            })
        })
        .collect();
    let sessions: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert!(sessions.iter().all(|s| s.is_provisioned()));
    assert_eq!(provider.server_table().len(), 8);
    assert_eq!(cluster_releases(&provider), 8);
}

#[test]
fn onboarding_over_tcp() {
    let platform = Platform::new();
    let provider = provider_on(&platform);
    let vk = provider.verifying_key();
    let p = provider.clone();
    let server = tcp::serve("127.0.0.1:0", move |s: &_, f| latteo_transport::tcp::Handler::handle(&*p, s, f), ServerConfig::default())
        .unwrap();
    let addr = server.local_addr().to_string();
    let host = platform.host("h0", mesh::registry());
    let mut conn = TcpConnection::connect(&addr, std::time::Duration::from_secs(5)).unwrap();
    let s = onboard_coordinator(&host, &mut conn, &vk, HostBehavior::Honest);
    assert!(s.is_provisioned(), "{:?}", s.phase());

    let coordinator = Arc::new(CoordinatorHost::new(host.clone(), s.handle.clone().unwrap()));
    let c = coordinator.clone();
    let coor_server = tcp::serve("127.0.0.1:0", move |s: &_, f| latteo_transport::tcp::Handler::handle(&*c, s, f), ServerConfig::default())
        .unwrap();
    let agg_host = platform.host("h1", mesh::registry());
    let mut p_conn = TcpConnection::connect(&addr, std::time::Duration::from_secs(5)).unwrap();
    let mut c_conn =
        TcpConnection::connect(&coor_server.local_addr().to_string(), std::time::Duration::from_secs(5)).unwrap();
    let s = onboard_aggregator(&agg_host, &mut p_conn, &mut c_conn, &vk, HostBehavior::Honest);
    assert!(s.is_provisioned(), "{:?}", s.phase());
    assert_eq!(coordinator.releases(), 1);
    coor_server.shutdown();
    server.shutdown();
}
