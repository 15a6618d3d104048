//! Subcommand bodies. Flags override the matching config keys.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use latteo_core::envelope::SigningKey;
use latteo_core::oracle::{differential_run, run_script, Script, Verdict};
use latteo_learn::data::{synthetic_two_class, Dataset, SIDE};
use latteo_learn::fractal::{orthogonal_dataset, FractalParams};
use latteo_learn::leakage::{run_attack_experiment, AttackConfig, Defense, Prior};
use latteo_learn::mlp::{write_checkpoint, Entanglement, TinyMlp};
use latteo_learn::train::{train_good, train_vanilla, TrainConfig, TrainReport};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{bench_sweep, emit_csv, BenchConfig, CostOverrides, Scheme, TransportKind};
use crate::config::{self, Config, TrainSection};
use crate::{roles, AttackArgs, BenchArgs, CliError, Command, Cli, KeyKind, KeygenArgs, OracleArgs, TrainArgs};

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let path = config::locate(cli.config.as_deref());
    let cfg = config::load(path.as_deref())?;
    match cli.command {
        Command::Keygen(a) => keygen(&a),
        Command::Provider(a) => roles::provider(&cfg, &a),
        Command::Coordinator(a) => roles::coordinator(&cfg, &a),
        Command::Aggregator(a) => roles::aggregator(&cfg, &a),
        Command::Client(a) => roles::client(&cfg, &a),
        Command::Train(a) => train(cfg, &a),
        Command::Attack(a) => attack(&cfg, &a),
        Command::Bench(a) => bench(&cfg, &a),
        Command::Oracle(a) => oracle(&cfg, &a),
    }
}

/// Writes `bytes` to `path`, or to stdout without one. Callers render the
/// whole output first so a failed run leaves no partial file.
fn deliver(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, bytes)?,
        None => std::io::stdout().lock().write_all(bytes)?,
    }
    Ok(())
}

fn keygen(a: &KeygenArgs) -> Result<(), CliError> {
    let secret = match a.kind {
        KeyKind::Platform => {
            let mut s = [0u8; 32];
            rand::rngs::OsRng.fill_bytes(&mut s);
            s
        }
        KeyKind::User => SigningKey::generate().to_bytes(),
    };
    let mut opts = OpenOptions::new();
    opts.write(true);
    match a.force {
        true => opts.create(true).truncate(true),
        false => opts.create_new(true),
    };
    let mut f = opts.open(&a.out).map_err(|e| match e.kind() {
        std::io::ErrorKind::AlreadyExists => {
            CliError::Usage(format!("{} exists; pass --force to replace it", a.out.display()))
        }
        _ => e.into(),
    })?;
    writeln!(f, "{}", hex::encode(secret))?;
    if a.kind == KeyKind::User {
        println!("{}", hex::encode(SigningKey::from_bytes(&secret).verifying_key()));
    }
    Ok(())
}

fn parse_defense(s: &str) -> Result<Defense, CliError> {
    Defense::parse(s).ok_or_else(|| CliError::Usage(format!("unknown defense {s:?}; expected vanilla or good")))
}

/// Local training under the configured defense.
pub fn train_local(t: &TrainSection, model: &TinyMlp, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, CliError> {
    match parse_defense(&t.defense)? {
        Defense::Vanilla => Ok(train_vanilla(model, data, cfg)?),
        Defense::Good => {
            let params = FractalParams {
                systems: t.fractal_systems,
                per_system: t.fractal_per_system,
                resolution: SIDE,
                seed: cfg.seed,
            };
            let orth = orthogonal_dataset(&params, model.classes)?;
            Ok(train_good(model, data, &orth, Entanglement { tau: t.tau, sign: t.sign }, cfg)?)
        }
    }
}

fn train(mut cfg: Config, a: &TrainArgs) -> Result<(), CliError> {
    let t = &mut cfg.train;
    if let Some(d) = &a.defense {
        t.defense = d.clone();
    }
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.seed = a.seed.unwrap_or(t.seed);
    let data = match &t.data {
        Some(p) => Dataset::from_bytes(&std::fs::read(p)?)?,
        None => synthetic_two_class(t.samples, t.seed),
    };
    let held_out = synthetic_two_class(200, t.seed + 1000);
    let model = roles::initial_model(t.seed);
    let tcfg = TrainConfig { epochs: t.epochs, lr: t.lr, batch: t.batch, seed: t.seed };
    let report = train_local(t, &model, &data, &tcfg)?;
    let m = &report.model;
    println!(
        "defense={} steps={} final_loss={:.4} train_accuracy={:.3} held_out_accuracy={:.3}",
        t.defense,
        report.steps,
        report.final_loss,
        m.accuracy(&data.x, &data.y),
        m.accuracy(&held_out.x, &held_out.y)
    );
    if let Some(out) = &a.out {
        std::fs::write(out, write_checkpoint(m))?;
    }
    Ok(())
}

fn attack(cfg: &Config, a: &AttackArgs) -> Result<(), CliError> {
    let s = &cfg.attack;
    let defense = parse_defense(a.defense.as_deref().unwrap_or(&s.defense))?;
    let prior_name = a.prior.as_deref().unwrap_or(&s.prior);
    let prior = Prior::parse(prior_name)
        .ok_or_else(|| CliError::Usage(format!("unknown prior {prior_name:?}; expected none or tv")))?;
    let seeds = a.seeds.unwrap_or(s.seeds);
    let acfg = AttackConfig {
        defense,
        prior,
        seeds: (0..seeds).collect(),
        tau: s.tau,
        sign: s.sign,
        lr: s.lr,
        batch: s.batch,
        clients: s.clients,
        local_epochs: s.local_epochs,
        iters: s.iters,
        step: s.step,
        lambda_tv: s.lambda_tv,
        ..AttackConfig::default()
    };
    let rows = run_attack_experiment(&acfg)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    deliver(a.out.as_deref(), &bytes)
}

fn bench(cfg: &Config, a: &BenchArgs) -> Result<(), CliError> {
    let s = &cfg.bench;
    let names: Vec<String> = match &a.scheme {
        Some(x) => vec![x.clone()],
        None => s.schemes.clone(),
    };
    let schemes = match names.is_empty() {
        true => Scheme::ALL.to_vec(),
        false => names
            .iter()
            .map(|n| Scheme::parse(n).ok_or_else(|| CliError::Usage(format!("unknown scheme {n:?}; expected dca or ratls_sim"))))
            .collect::<Result<_, _>>()?,
    };
    let transport_name = a.transport.as_deref().unwrap_or(&s.transport);
    let transport = TransportKind::parse(transport_name)
        .ok_or_else(|| CliError::Usage(format!("unknown transport {transport_name:?}; expected loopback or tcp")))?;
    let latency_ms = a.latency_ms.unwrap_or(s.latency_ms);
    if !(latency_ms >= 0.0 && latency_ms.is_finite()) {
        return Err(CliError::Usage(format!("latency {latency_ms} ms must be a non-negative number")));
    }
    let us = |v: Option<u64>| v.map(Duration::from_micros);
    let base = BenchConfig {
        n_clients: 1,
        scheme: Scheme::Dca,
        transport,
        latency: Duration::from_secs_f64(latency_ms / 1e3),
        timeout: Duration::from_millis(a.timeout_ms.unwrap_or(s.timeout_ms)),
        seed: a.seed.unwrap_or(s.seed),
        registrations_per_client: s.registrations_per_client,
        connection_budget: s.connection_budget,
        costs: CostOverrides { verify: us(s.verify_cost_us), request: us(s.request_cost_us), quote: us(s.quote_cost_us) },
    };
    let n_clients = a.n_clients.clone().unwrap_or_else(|| s.n_clients.clone());
    if n_clients.is_empty() {
        return Err(CliError::Usage("no swarm sizes given".into()));
    }
    let rows = bench_sweep(&base, &n_clients, &schemes)?;
    let mut bytes = Vec::new();
    emit_csv(&rows, &mut bytes)?;
    deliver(a.out.as_deref(), &bytes)
}

/// Summary of a batch of differential runs.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSummary {
    pub scripts: usize,
    pub steps: usize,
    pub divergences: Vec<(usize, Verdict)>,
}

/// Runs `count` random scripts; script `i` and its worlds derive from `seed`.
pub fn oracle_batch(count: usize, seed: u64) -> OracleSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = OracleSummary { scripts: count, steps: 0, divergences: Vec::new() };
    for i in 0..count {
        let script = Script::random(&mut rng);
        match run_script(&script, rng.next_u64()).verdict {
            Verdict::Equivalent { steps } => summary.steps += steps,
            v => summary.divergences.push((i, v)),
        }
    }
    summary
}

fn oracle(cfg: &Config, a: &OracleArgs) -> Result<(), CliError> {
    let seed = a.seed.unwrap_or(cfg.oracle.seed);
    if let Some(path) = &a.script {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let report = differential_run(&text, seed).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        return match report.verdict {
            Verdict::Equivalent { steps } => {
                println!("equivalent over {steps} steps");
                Ok(())
            }
            v => Err(CliError::Protocol(format!("diverged: {v:?}"))),
        };
    }
    let summary = oracle_batch(a.scripts.unwrap_or(cfg.oracle.scripts), seed);
    println!(
        "scripts={} steps={} divergences={}",
        summary.scripts,
        summary.steps,
        summary.divergences.len()
    );
    match summary.divergences.first() {
        None => Ok(()),
        Some((i, v)) => Err(CliError::Protocol(format!("script {i} diverged: {v:?}"))),
    }
}
