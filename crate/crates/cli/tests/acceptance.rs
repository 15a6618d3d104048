//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Each check computes its own oracle.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use latteo_cli::bench::{bench_run, BenchConfig, Scheme};
use latteo_cli::commands::oracle_batch;
use latteo_core::abe::{self, Policy};
use latteo_core::agg::{client::open_response, implicit_attest, ClientPayload, ModelState};
use latteo_core::deploy::{Deployment, COORDINATOR_HOST};
use latteo_core::enclave::{HostEvent, Platform};
use latteo_core::envelope::{gen_symmetric_key, seal, wrap_key};
use latteo_core::mesh::apps::AppOutput;
use latteo_core::mesh::{
    self, onboard_aggregator, onboard_coordinator, HostBehavior, InProcessLink, Link, LinkEvent, Provider, ProviderConfig,
    ReleasedKey,
};
use latteo_learn::data::synthetic_two_class;
use latteo_learn::fractal::{orthogonal_dataset, FractalParams};
use latteo_learn::leakage::{extract_gradient, median, run_attack_experiment, AttackConfig, Defense, GradientObservation, Prior};
use latteo_learn::mlp::{Entanglement, TinyMlp, DEFAULT_HIDDEN};
use latteo_learn::snnl::{c_snnl, c_snnl_grad};
use latteo_learn::train::{train_good, train_vanilla, TrainConfig};
use latteo_transport::{Frame, MsgType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Independent evaluator of the policy tree.
fn satisfies(p: &Policy, has: &BTreeSet<String>) -> bool {
    match p {
        Policy::Leaf(a) => has.contains(a),
        Policy::And(cs) => cs.iter().all(|c| satisfies(c, has)),
        Policy::Or(cs) => cs.iter().any(|c| satisfies(c, has)),
        Policy::Threshold { k, children } => children.iter().filter(|c| satisfies(c, has)).count() >= *k,
    }
}

fn abe_policy_semantics() -> Outcome {
    let start = Instant::now();
    let names: Vec<String> = (0..8).map(|i| format!("attr{i}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mk = abe::setup(128, &refs).map_err(|e| e.to_string())?;
    let mpk = [mk.public.clone()];
    let subsets: Vec<(BTreeSet<String>, abe::AttributeKeySet)> = (0u16..256)
        .map(|mask| {
            let granted: Vec<&str> = (0..8).filter(|i| mask >> i & 1 == 1).map(|i| refs[i]).collect();
            let ks = abe::keygen(&mk.secret, "cluster", &granted).unwrap();
            (granted.iter().map(|s| s.to_string()).collect(), ks)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut mismatches, mut decryptions) = (0, 0);
    for _ in 0..100 {
        let policy = Policy::random(&mut rng, &names, 4);
        let payload: [u8; 32] = rng.gen();
        let ct = abe::encrypt(&mpk, &policy, &payload).map_err(|e| e.to_string())?;
        for (attrs, ks) in &subsets {
            let got = abe::decrypt(&mpk, ks, &ct);
            let opened = matches!(&got, Ok(p) if p == &payload);
            if opened != satisfies(&policy, attrs) {
                mismatches += 1;
            }
            decryptions += 1;
        }
    }
    let elapsed = start.elapsed();
    check(
        mismatches == 0 && elapsed < Duration::from_secs(120),
        format!("{decryptions} decryptions, {mismatches} mismatches, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

fn happy_path() -> Outcome {
    let dim = 8;
    let d = Deployment::start(Platform::new(), ProviderConfig::simple([0; 32], 4, vec![0.0; dim]), &["agg-1"])
        .map_err(|e| e.to_string())?;
    if !d.sessions.iter().all(|s| s.is_provisioned()) {
        return Err("onboarding incomplete".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut clients: Vec<_> = (0..5).map(|i| d.register(&format!("user-{i}")).unwrap()).collect();
    let mut link = InProcessLink::new(Arc::new(d.aggregators[0].clone()), "users").with_log(d.network.clone());
    let (mut attested, mut secrets) = (0, Vec::<Vec<u8>>::new());
    for cycle in 0..50 {
        let c = &mut clients[cycle % 5];
        let (req, pending) = match c.weights.clone() {
            None => c.build_request(None).unwrap(),
            Some(pre) => {
                let trained: Vec<f64> = pre.iter().map(|w| w + rng.gen_range(-1.0..1.0)).collect();
                let out = c.build_request(Some((&pre, &trained))).unwrap();
                secrets.push(trained.iter().flat_map(|x| x.to_le_bytes()).collect());
                secrets.push(ClientPayload::Aggregation { pre, trained }.to_bytes());
                out
            }
        };
        let reply = link.exchange(Frame::new(MsgType::UserRequest, req.to_bytes())).map_err(|e| e.to_string())?;
        if implicit_attest(&pending, &reply.payload) {
            attested += 1;
            c.absorb(&open_response(&pending, &reply.payload).unwrap());
        }
    }
    let mut exposed: Vec<Vec<u8>> = d.hosts().flat_map(|h| h.transcript().iter().map(|e| e.bytes().to_vec()).collect::<Vec<_>>()).collect();
    exposed.extend(d.network.lock().unwrap().iter().filter_map(|e| match e {
        LinkEvent::Sent(f) | LinkEvent::Received(f) => Some(f.payload.clone()),
        _ => None,
    }));
    let leaks = secrets.iter().filter(|s| exposed.iter().any(|b| contains(b, s))).count();
    check(
        attested == 50 && leaks == 0 && !secrets.is_empty(),
        format!("{attested}/50 implicitly attested, {} update plaintexts, {leaks} found outside the enclave", secrets.len()),
    )
}

fn coordinator_deliveries(d: &Deployment) -> usize {
    let eid = d.coordinator.handle().eid;
    let host = d.hosts().find(|h| h.host_id() == COORDINATOR_HOST).unwrap();
    host.transcript()
        .iter()
        .filter(|e| matches!(e, HostEvent::Output { eid: x, .. } if *x == eid))
        .filter(|e| matches!(AppOutput::from_bytes(e.bytes()), Ok(AppOutput::Release(_))))
        .count()
}

fn enclave_swapping() -> Outcome {
    // Coordinator swapped between the two attestations: attribute keys must stay with the provider.
    let platform = Platform::new();
    let provider = Arc::new(
        Provider::setup(
            ProviderConfig::simple(platform.root_key(), 2, vec![0.0; 4]),
            &mesh::coordinator_image(),
            &mesh::aggregator_image(),
        )
        .map_err(|e| e.to_string())?,
    );
    let mut refused = 0;
    for i in 0..25 {
        let host = platform.host(&format!("h{i}"), mesh::registry());
        let mut link = InProcessLink::new(provider.clone(), "h");
        let s = onboard_coordinator(&host, &mut link, &provider.verifying_key(), HostBehavior::SwapCoordinatorBeforeMidRa);
        refused += s.failure().is_some() as usize;
    }
    let attribute_releases = provider
        .releases()
        .iter()
        .filter(|r| matches!(r.key, ReleasedKey::ClusterKeys { .. }))
        .count();
    // Rogue aggregator code: the coordinator must not provision it.
    let mut d = Deployment::start(Platform::new(), ProviderConfig::simple([0; 32], 2, vec![0.0; 4]), &["agg-1"])
        .map_err(|e| e.to_string())?;
    let vk = d.provider.verifying_key();
    let before = coordinator_deliveries(&d);
    for i in 0..25 {
        let host_id = if i % 5 == 0 { COORDINATOR_HOST.to_string() } else { format!("rogue-{i}") };
        let host = d.host(&host_id);
        let mut p = InProcessLink::new(d.provider.clone(), &host_id);
        let mut c = InProcessLink::new(d.coordinator.clone(), &host_id);
        let s = onboard_aggregator(&host, &mut p, &mut c, &vk, HostBehavior::SwapAggregator);
        refused += s.failure().is_some() as usize;
    }
    let app_key_releases = coordinator_deliveries(&d) - before;
    check(
        refused == 50 && attribute_releases == 0 && app_key_releases == 0,
        format!("{refused}/50 swaps refused, attribute keys released {attribute_releases}, aggregator keys released {app_key_releases}"),
    )
}

fn update_rule_fold() -> Outcome {
    let mut worst_rel: f64 = 0.0;
    let mut bit_exact = true;
    for k in [4usize, 3] {
        let dim = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let w0: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = Deployment::start(Platform::new(), ProviderConfig::simple([0; 32], k, w0.clone()), &["agg-1"])
            .map_err(|e| e.to_string())?;
        let agg = &d.aggregators[0];
        let mut submitted = std::collections::HashMap::new();
        for i in 0..100 {
            let c = d.register(&format!("u{i}")).unwrap();
            let pre: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let trained: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (req, p) = c.build_request(Some((&pre, &trained))).unwrap();
            let f = agg.submit(&req.to_bytes()).map_err(|e| e.to_string())?.ok_or("dropped")?;
            let id = open_response(&p, &f.payload).map_err(|e| e.to_string())?.client_id;
            submitted.insert(id, (pre, trained));
        }
        let status = agg.status().map_err(|e| e.to_string())?;
        if status.log.len() != 100 {
            return Err(format!("log has {} entries", status.log.len()));
        }
        // Closed form, folded in logged order: w ← w − (pre − trained)/K.
        let mut oracle = w0.clone();
        for e in &status.log {
            let (pre, trained) = &submitted[&e.client_id];
            for j in 0..dim {
                oracle[j] -= (pre[j] - trained[j]) / k as f64;
            }
        }
        let probe = d.register("probe").unwrap();
        let (req, p) = probe.build_request(None).unwrap();
        let got = open_response(&p, &agg.submit(&req.to_bytes()).unwrap().unwrap().payload).unwrap().weights;
        for (g, o) in got.iter().zip(&oracle) {
            if k.is_power_of_two() {
                bit_exact &= g.to_bits() == o.to_bits();
            } else {
                worst_rel = worst_rel.max((g - o).abs() / o.abs().max(f64::MIN_POSITIVE));
            }
        }
        let mut replay = ModelState::new(w0, k, false).map_err(|e| e.to_string())?;
        for e in &status.log {
            let (pre, trained) = &submitted[&e.client_id];
            replay.apply_update(e.client_id, pre, trained).map_err(|e| e.to_string())?;
        }
        bit_exact &= replay.weights().iter().zip(&got).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    check(
        bit_exact && worst_rel <= 1e-12,
        format!("K=4 bit-exact: {bit_exact}; K=3 max relative error {worst_rel:.2e}"),
    )
}

fn gradient_extraction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.gen_range(1..64);
        let k = rng.gen_range(1..=16);
        let w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pre: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let trained: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut state = ModelState::new(w.clone(), k, false).map_err(|e| e.to_string())?;
        state.apply_update(1, &pre, &trained).map_err(|e| e.to_string())?;
        let obs = GradientObservation { w_t: state.weights().to_vec(), w_prev: w, clients: k, client_id: Some(1) };
        let got = extract_gradient(&obs).map_err(|e| e.to_string())?;
        let delta: Vec<f64> = pre.iter().zip(&trained).map(|(p, t)| p - t).collect();
        let scale = delta.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let err = got.iter().zip(&delta).fold(0.0f64, |m, (g, d)| m.max((g - d).abs()));
        worst = worst.max(err / scale);
    }
    check(worst <= 1e-12, format!("max relative error {worst:.2e} over 100 cases"))
}

fn attack_rows(defense: Defense, prior: Prior) -> Result<(f64, f64), String> {
    let cfg = AttackConfig { defense, prior, seeds: (0..10).collect(), ..AttackConfig::default() };
    let rows = run_attack_experiment(&cfg).map_err(|e| e.to_string())?;
    let ssim: Vec<f64> = rows.iter().map(|r| r.ssim).collect();
    let mse: Vec<f64> = rows.iter().map(|r| r.mse).collect();
    Ok((median(&ssim), median(&mse)))
}

fn reconstruction_attack(vanilla: &(f64, f64), elapsed: Duration) -> Outcome {
    check(
        vanilla.0 >= 0.7 && elapsed < Duration::from_secs(600),
        format!("vanilla median SSIM {:.3} over 10 seeds, {:.1}s", vanilla.0, elapsed.as_secs_f64()),
    )
}

fn good_mitigation(vanilla: &(f64, f64)) -> Outcome {
    let good = attack_rows(Defense::Good, Prior::None)?;
    let (vt, gt) = (attack_rows(Defense::Vanilla, Prior::Tv)?, attack_rows(Defense::Good, Prior::Tv)?);
    let ssim_ratio = good.0 / vanilla.0;
    let mse_ratio = good.1 / vanilla.1;
    check(
        ssim_ratio <= 0.5 && mse_ratio >= 1.5,
        format!(
            "SSIM {:.3} vs {:.3} (ratio {ssim_ratio:.2}, need <= 0.5), MSE {:.4} vs {:.4} (ratio {mse_ratio:.1}, need >= 1.5); \
             with TV prior: SSIM ratio {:.2}, MSE ratio {:.1}",
            good.0,
            vanilla.0,
            good.1,
            vanilla.1,
            gt.0 / vt.0,
            gt.1 / vt.1
        ),
    )
}

fn good_utility() -> Outcome {
    let runs: Vec<(f64, f64)> = (0..10)
        .map(|seed| {
            let train = synthetic_two_class(100, seed);
            let test = synthetic_two_class(200, seed + 1000);
            let orth = orthogonal_dataset(&FractalParams { systems: 10, per_system: 10, resolution: 8, seed }, 2).unwrap();
            let model = TinyMlp::new(train.dim, DEFAULT_HIDDEN, 2, seed);
            let cfg = TrainConfig { epochs: 40, lr: 0.1, batch: 16, seed };
            let v = train_vanilla(&model, &train, &cfg).unwrap().model;
            let g = train_good(&model, &train, &orth, Entanglement::new(0.5), &cfg).unwrap().model;
            (v.accuracy(&test.x, &test.y), g.accuracy(&test.x, &test.y))
        })
        .collect();
    let v = runs.iter().map(|r| r.0).sum::<f64>() / 10.0;
    let g = runs.iter().map(|r| r.1).sum::<f64>() / 10.0;
    check(
        v - g <= 0.05,
        format!("held-out accuracy vanilla {:.1}%, GOOD {:.1}% over 10 seeds", 100.0 * v, 100.0 * g),
    )
}

fn snnl_numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut worst, mut drift): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let (n, dim) = (rng.gen_range(3..9), 5);
        let mut latents: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(0.05..2.0)).collect()).collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        labels[1] = labels[0];
        let g = c_snnl_grad(&latents, &labels).map_err(|e| e.to_string())?;
        let h = 1e-5;
        for i in 0..n {
            for t in 0..dim {
                let x = latents[i][t];
                latents[i][t] = x + h;
                let up = c_snnl(&latents, &labels).unwrap();
                latents[i][t] = x - h;
                let down = c_snnl(&latents, &labels).unwrap();
                latents[i][t] = x;
                let fd = (up - down) / (2.0 * h);
                worst = worst.max((fd - g[i][t]).abs() / g[i][t].abs().max(fd.abs()).max(1e-3));
            }
        }
        let scaled: Vec<Vec<f64>> = latents.iter().map(|r| r.iter().map(|x| 10.0 * x).collect()).collect();
        drift = drift.max((c_snnl(&scaled, &labels).unwrap() - c_snnl(&latents, &labels).unwrap()).abs());
    }
    check(
        worst < 1e-4 && drift < 1e-8,
        format!("max relative gradient error {worst:.2e}, scale drift {drift:.2e}"),
    )
}

fn scalability() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for n in [2, 50, 100] {
        let base = BenchConfig { n_clients: n, latency: Duration::from_millis(5), seed: n as u64, ..BenchConfig::default() };
        let dca = bench_run(&base).map_err(|e| e.to_string())?.row;
        let ratls = bench_run(&BenchConfig { scheme: Scheme::RatlsSim, ..base }).map_err(|e| e.to_string())?.row;
        ok &= dca.mean_latency_ms <= ratls.mean_latency_ms;
        ok &= dca.handshake_round_trips == 1 && ratls.handshake_round_trips == 4;
        parts.push(format!(
            "n={n}: {:.2} vs {:.2} ms ({}/{} round trips)",
            dca.mean_latency_ms, ratls.mean_latency_ms, dca.handshake_round_trips, ratls.handshake_round_trips
        ));
    }
    check(ok, parts.join("; "))
}

fn median_time(reps: usize, mut f: impl FnMut()) -> Duration {
    let mut t: Vec<Duration> = (0..reps)
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed()
        })
        .collect();
    t.sort();
    t[reps / 2]
}

fn crypto_latency() -> Outcome {
    let mk = abe::setup(128, &["agg", "latteo"]).map_err(|e| e.to_string())?;
    let mpk = [mk.public.clone()];
    let policy = Policy::parse("agg AND latteo").map_err(|e| e.to_string())?;
    let key = gen_symmetric_key();
    let wrap = median_time(21, || {
        wrap_key(&mpk, &policy, &key).unwrap();
    });
    let blob = vec![0x5au8; 1 << 20];
    let aead = median_time(21, || {
        std::hint::black_box(seal(&key, &blob));
    });
    check(
        wrap < Duration::from_millis(100) && aead < Duration::from_millis(50),
        format!("ABE wrap {:.3} ms, AEAD seal 1 MiB {:.3} ms", wrap.as_secs_f64() * 1e3, aead.as_secs_f64() * 1e3),
    )
}

fn differential_testing() -> Outcome {
    let s = oracle_batch(200, 0);
    check(
        s.divergences.is_empty(),
        format!("{} scripts, {} steps, {} divergences", s.scripts, s.steps, s.divergences.len()),
    )
}

fn main() {
    let attack_start = Instant::now();
    let vanilla = attack_rows(Defense::Vanilla, Prior::None);
    let attack_time = attack_start.elapsed();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("ABE policy semantics", Box::new(abe_policy_semantics)),
        ("end-to-end happy path", Box::new(happy_path)),
        ("enclave-swapping defense", Box::new(enclave_swapping)),
        ("asynchronous update rule", Box::new(update_rule_fold)),
        ("gradient extraction", Box::new(gradient_extraction)),
        ("reconstruction attack", Box::new(|| reconstruction_attack(vanilla.as_ref().map_err(Clone::clone)?, attack_time))),
        ("GOOD mitigation direction", Box::new(|| good_mitigation(vanilla.as_ref().map_err(Clone::clone)?))),
        ("GOOD utility", Box::new(good_utility)),
        ("C-SNNL numerics", Box::new(snnl_numerics)),
        ("scalability direction", Box::new(scalability)),
        ("crypto micro-latency", Box::new(crypto_latency)),
        ("UC differential testing", Box::new(differential_testing)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        match outcome {
            Ok(d) => println!("criterion {}: PASS {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
