//! The `latteo` binary: exit codes, CSV shapes and the four roles as
//! separate processes.

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

fn latteo() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_latteo"));
    c.env_remove("LATTEO_CONFIG").env_remove("LATTEO_LISTEN");
    c
}

fn run(args: &[&str]) -> Output {
    latteo().args(args).output().unwrap()
}

fn csv_rows(out: &Output) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_reader(out.stdout.as_slice());
    r.records().map(|x| x.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn bench_one_scheme_one_size_is_one_row() {
    let out = run(&["bench", "--scheme", "dca", "--n-clients", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "2");
    assert_eq!(rows[0][1], "dca");
    assert_eq!(rows[0][5], "1");
}

#[test]
fn attack_writes_one_row_per_seed() {
    let out = run(&["attack", "--defense", "good", "--prior", "tv", "--seeds", "10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), "defense,prior,seed,ssim,mse,iters,final_loss");
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r[0] == "good" && r[1] == "tv"));
}

#[test]
fn missing_config_exits_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("rows.csv");
    let out = run(&[
        "--config",
        dir.path().join("absent.toml").to_str().unwrap(),
        "bench",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(!out_path.exists());
}

#[test]
fn unknown_flag_prints_help_and_exits_two() {
    let out = run(&["bench", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_scheme_is_a_usage_error() {
    assert_eq!(run(&["bench", "--scheme", "tls13"]).status.code(), Some(2));
}

struct Service(Child);

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts a role and waits for its listening line.
fn start(config: &Path, role: &str, env: &[(&str, &str)]) -> (Service, String) {
    let mut child = latteo()
        .args(["--config", config.to_str().unwrap(), role, "--serve-secs", "120"])
        .envs(env.iter().copied())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("{role} did not start: {line:?}"))
        .to_string();
    (Service(child), addr)
}

#[test]
fn roles_run_as_separate_processes() {
    let dir = tempfile::tempdir().unwrap();
    let secret = dir.path().join("platform.hex");
    let vk = dir.path().join("provider.vk");
    assert!(run(&["keygen", "platform", "--out", secret.to_str().unwrap()]).status.success());
    // Refuses to clobber without --force.
    assert_eq!(run(&["keygen", "platform", "--out", secret.to_str().unwrap()]).status.code(), Some(2));

    let config = dir.path().join("latteo.toml");
    std::fs::write(
        &config,
        format!(
            "[platform]\nsecret_file = {s:?}\n\n[provider]\nlisten = \"127.0.0.1:0\"\nvk_file = {v:?}\n\n\
             [coordinator]\nlisten = \"127.0.0.1:0\"\nprovider_vk_file = {v:?}\n\n\
             [aggregator]\nlisten = \"127.0.0.1:0\"\nprovider_vk_file = {v:?}\n\n\
             [client]\nprovider_vk_file = {v:?}\n\n[train]\ndefense = \"vanilla\"\n",
            s = secret.to_str().unwrap(),
            v = vk.to_str().unwrap()
        ),
    )
    .unwrap();

    let (_p, paddr) = start(&config, "provider", &[]);
    let (_c, caddr) = start(&config, "coordinator", &[("LATTEO__COORDINATOR__PROVIDER", &paddr)]);
    let (_a, aaddr) = start(
        &config,
        "aggregator",
        &[("LATTEO__AGGREGATOR__PROVIDER", &paddr), ("LATTEO__AGGREGATOR__COORDINATOR", &caddr)],
    );
    let out = latteo()
        .args(["--config", config.to_str().unwrap(), "client", "--rounds", "2"])
        .env("LATTEO__CLIENT__PROVIDER", &paddr)
        .env("LATTEO__CLIENT__AGGREGATOR", &aaddr)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("registered client_id="), "{stdout}");
    assert!(stdout.contains("round 2 version=2"), "{stdout}");
}

#[test]
fn coordinator_on_a_foreign_platform_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (good, rogue) = (dir.path().join("good.hex"), dir.path().join("rogue.hex"));
    let vk = dir.path().join("provider.vk");
    for p in [&good, &rogue] {
        assert!(run(&["keygen", "platform", "--out", p.to_str().unwrap()]).status.success());
    }
    let config = |secret: &Path| {
        let path = dir.path().join(format!("{}.toml", secret.file_stem().unwrap().to_str().unwrap()));
        std::fs::write(
            &path,
            format!(
                "[platform]\nsecret_file = {s:?}\n[provider]\nlisten = \"127.0.0.1:0\"\nvk_file = {v:?}\n\
                 [coordinator]\nlisten = \"127.0.0.1:0\"\nprovider_vk_file = {v:?}\n",
                s = secret.to_str().unwrap(),
                v = vk.to_str().unwrap()
            ),
        )
        .unwrap();
        path
    };
    let (_p, paddr) = start(&config(&good), "provider", &[]);
    let out = latteo()
        .args(["--config", config(&rogue).to_str().unwrap(), "coordinator", "--serve-secs", "1"])
        .env("LATTEO__COORDINATOR__PROVIDER", &paddr)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
}
