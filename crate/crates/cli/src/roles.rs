//! The four service roles as separate processes talking framed TCP.
//!
//! Every enclave host and the provider load one platform secret, so quotes
//! produced in one process verify against the root key the provider trusts.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use latteo_core::abe::Policy;
use latteo_core::agg::client::open_response;
use latteo_core::agg::{AggResponse, AggregatorHost, Client};
use latteo_core::enclave::Platform;
use latteo_core::envelope::SigningKey;
use latteo_core::mesh::provider::encode_registration_request;
use latteo_core::mesh::{
    self, onboard_aggregator, onboard_coordinator, CoordinatorHost, HostBehavior, Provider, ProviderConfig, Registration,
};
use latteo_learn::data::{synthetic_two_class, SIDE};
use latteo_learn::mlp::{TinyMlp, DEFAULT_HIDDEN};
use latteo_learn::train::TrainConfig;
use latteo_transport::tcp::{self, Handler, ServerConfig, TcpConnection, TcpServer};
use latteo_transport::{Endpoint, Frame, MsgType};

use crate::config::{ClientSection, Config, ProviderRef};
use crate::{ClientArgs, CliError, ServeArgs};

fn protocol(e: impl std::fmt::Display) -> CliError {
    CliError::Protocol(e.to_string())
}

pub fn read_hex32(path: &Path) -> Result<[u8; 32], CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let bytes = hex::decode(text.trim()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    bytes
        .try_into()
        .map_err(|_| CliError::Config(format!("{}: expected 32 bytes", path.display())))
}

fn platform(cfg: &Config) -> Result<Platform, CliError> {
    let path = cfg
        .platform
        .secret_file
        .as_deref()
        .ok_or_else(|| CliError::Config("platform.secret_file is required for service roles".into()))?;
    Ok(Platform::from_secret(read_hex32(path)?))
}

fn provider_vk(r: &ProviderRef) -> Result<[u8; 32], CliError> {
    if !r.provider_vk.is_empty() {
        let b = hex::decode(r.provider_vk.trim()).map_err(|e| CliError::Config(format!("provider_vk: {e}")))?;
        return b.try_into().map_err(|_| CliError::Config("provider_vk: expected 32 bytes".into()));
    }
    match &r.provider_vk_file {
        Some(p) => read_hex32(p),
        None => Err(CliError::Config("set provider_vk or provider_vk_file".into())),
    }
}

fn tcp_listen(configured: &str) -> Result<String, CliError> {
    match Endpoint::listen_from_env(configured).map_err(|e| CliError::Config(e.to_string()))? {
        Endpoint::Tcp(a) => Ok(a),
        Endpoint::Loopback(n) => Err(CliError::Config(format!("mem:{n}: service roles listen on TCP"))),
    }
}

fn connect(addr: &str) -> Result<TcpConnection, CliError> {
    TcpConnection::connect(addr, Duration::from_secs(10)).map_err(|e| protocol(format!("{addr}: {e}")))
}

/// Binds, announces the address on stdout and serves for the requested time.
fn serve<H: Handler>(listen: &str, handler: H, args: &ServeArgs) -> Result<(), CliError> {
    let server: TcpServer = tcp::serve(listen, handler, ServerConfig::default())?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "listening on {}", server.local_addr())?;
    out.flush()?;
    drop(out);
    match args.serve_secs {
        Some(s) => std::thread::sleep(Duration::from_secs(s)),
        None => loop {
            std::thread::park();
        },
    }
    server.shutdown();
    Ok(())
}

pub fn initial_model(seed: u64) -> TinyMlp {
    TinyMlp::new(SIDE * SIDE, DEFAULT_HIDDEN, 2, seed)
}

pub fn provider(cfg: &Config, args: &ServeArgs) -> Result<(), CliError> {
    let s = &cfg.provider;
    let aggregator_policy = Policy::parse(&s.policy).map_err(|e| CliError::Config(format!("provider.policy: {e}")))?;
    let initial_weights = match s.initial_weights.is_empty() {
        true => initial_model(s.model_seed).params,
        false => s.initial_weights.clone(),
    };
    let config = ProviderConfig {
        identity: s.identity.clone(),
        attributes: s.attributes.clone(),
        granted: s.granted.clone(),
        aggregator_policy,
        security_bits: s.security_bits,
        clients: s.clients,
        initial_weights,
        strict_history: s.strict_history,
        platform_root: platform(cfg)?.root_key(),
    };
    let p = Arc::new(
        Provider::setup(config, &mesh::coordinator_image(), &mesh::aggregator_image())
            .map_err(|e| CliError::Config(e.to_string()))?,
    );
    if let Some(path) = &s.vk_file {
        std::fs::write(path, hex::encode(p.verifying_key()))?;
    }
    let listen = tcp_listen(&s.listen)?;
    serve(&listen, move |sess: &_, f: Frame| p.handle(sess, f), args)
}

pub fn coordinator(cfg: &Config, args: &ServeArgs) -> Result<(), CliError> {
    let s = &cfg.coordinator;
    let vk = provider_vk(&s.provider)?;
    let host = platform(cfg)?.host(&s.host_id, mesh::registry());
    let listen = tcp_listen(&s.listen)?;
    let mut link = connect(&s.provider.provider)?;
    let session = onboard_coordinator(&host, &mut link, &vk, HostBehavior::Honest);
    if let Some(r) = session.failure() {
        return Err(protocol(format!("coordinator onboarding failed: {r}")));
    }
    let handle = session.handle.clone().expect("provisioned session has an enclave");
    let coordinator = CoordinatorHost::new(host, handle);
    serve(&listen, coordinator, args)
}

pub fn aggregator(cfg: &Config, args: &ServeArgs) -> Result<(), CliError> {
    let s = &cfg.aggregator;
    let vk = provider_vk(&s.provider)?;
    let host = platform(cfg)?.host(&s.host_id, mesh::registry());
    let listen = tcp_listen(&s.listen)?;
    let mut plink = connect(&s.provider.provider)?;
    let mut clink = connect(&s.coordinator)?;
    let session = onboard_aggregator(&host, &mut plink, &mut clink, &vk, HostBehavior::Honest);
    if let Some(r) = session.failure() {
        return Err(protocol(format!("aggregator onboarding failed: {r}")));
    }
    let eid = session.handle.as_ref().expect("provisioned session has an enclave").eid;
    serve(&listen, AggregatorHost::new(host, eid), args)
}

/// Registers with the provider over `link` and enrolls.
pub fn register(link: &mut TcpConnection, identity: &str, sk: SigningKey, provider_vk: &[u8; 32]) -> Result<Client, CliError> {
    let req = Frame::new(MsgType::UserRequest, encode_registration_request(identity, &sk.verifying_key()));
    let reply = link.request(&req).map_err(|e| protocol(format!("registration: {e}")))?;
    let reg = Registration::from_bytes(&reply.payload).map_err(protocol)?;
    Client::enroll(sk, &reg, provider_vk).map_err(protocol)
}

/// One request/response with the aggregator; the reply opening is the
/// implicit attestation.
pub fn exchange(link: &mut TcpConnection, client: &mut Client, update: Option<(&[f64], &[f64])>) -> Result<AggResponse, CliError> {
    let (req, pending) = client.build_request(update).map_err(protocol)?;
    let reply = link
        .request(&Frame::new(MsgType::UserRequest, req.to_bytes()))
        .map_err(|e| protocol(format!("aggregator: {e}")))?;
    let resp = open_response(&pending, &reply.payload).map_err(|e| protocol(format!("aggregator not attested: {e}")))?;
    client.absorb(&resp);
    Ok(resp)
}

pub fn client(cfg: &Config, args: &ClientArgs) -> Result<(), CliError> {
    let s: &ClientSection = &cfg.client;
    let vk = provider_vk(&s.provider)?;
    let sk = match &s.signing_key_file {
        Some(p) => SigningKey::from_bytes(&read_hex32(p)?),
        None => SigningKey::generate(),
    };
    let timeout = Duration::from_millis(s.timeout_ms);
    let mut plink = TcpConnection::connect(&s.provider.provider, timeout).map_err(protocol)?;
    let mut client = register(&mut plink, &s.identity, sk, &vk)?;
    let mut alink = TcpConnection::connect(&s.aggregator, timeout).map_err(protocol)?;
    let mut resp = exchange(&mut alink, &mut client, None)?;
    println!("registered client_id={} version={}", resp.client_id, resp.version);

    let t = &cfg.train;
    let data = synthetic_two_class(t.samples, t.seed);
    for round in 0..args.rounds {
        let pre = resp.weights.clone();
        let model = TinyMlp::from_params(SIDE * SIDE, DEFAULT_HIDDEN, 2, pre.clone())?;
        let local = TrainConfig { epochs: 1, lr: t.lr, batch: t.batch, seed: t.seed + round as u64 };
        let trained = crate::commands::train_local(t, &model, &data, &local)?.model;
        exchange(&mut alink, &mut client, Some((&pre, &trained.params)))?;
        resp = exchange(&mut alink, &mut client, None)?;
        let acc = TinyMlp::from_params(SIDE * SIDE, DEFAULT_HIDDEN, 2, resp.weights.clone())?.accuracy(&data.x, &data.y);
        println!("round {} version={} accuracy={acc:.3}", round + 1, resp.version);
    }
    Ok(())
}
