//! TOML configuration shared by every subcommand.
//!
//! The file is found through `--config`, then `LATTEO_CONFIG`; with neither
//! set, every section takes its defaults. A variable named
//! `LATTEO__<SECTION>__<KEY>` overrides one key, its value read as a TOML
//! literal when it parses as one and as a string otherwise:
//!
//! ```text
//! LATTEO__BENCH__N_CLIENTS=50
//! LATTEO__PROVIDER__POLICY="agg AND latteo"
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

pub const CONFIG_ENV: &str = "LATTEO_CONFIG";
const OVERRIDE_PREFIX: &str = "LATTEO__";

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub platform: PlatformSection,
    pub provider: ProviderSection,
    pub coordinator: CoordinatorSection,
    pub aggregator: AggregatorSection,
    pub client: ClientSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub bench: BenchSection,
    pub oracle: OracleSection,
}

/// The simulated hardware vendor. Every enclave host and the provider load
/// the same secret, written by `latteo keygen platform`.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformSection {
    pub secret_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub listen: String,
    pub identity: String,
    pub attributes: Vec<String>,
    pub granted: Vec<String>,
    pub policy: String,
    pub security_bits: u32,
    /// Divisor of the update rule.
    pub clients: usize,
    /// Seeds the tiny-MLP initial model when `initial_weights` is empty.
    pub model_seed: u64,
    pub initial_weights: Vec<f64>,
    pub strict_history: bool,
    /// Where the provider writes its verifying key, hex encoded.
    pub vk_file: Option<PathBuf>,
}

impl Default for ProviderSection {
    fn default() -> Self {
        ProviderSection {
            listen: "127.0.0.1:7400".into(),
            identity: "provider".into(),
            attributes: vec!["agg".into(), "latteo".into()],
            granted: vec!["agg".into(), "latteo".into()],
            policy: "agg AND latteo".into(),
            security_bits: 128,
            clients: 4,
            model_seed: 0,
            initial_weights: Vec::new(),
            strict_history: false,
            vk_file: None,
        }
    }
}

/// Where to reach the provider and how to trust it.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default)]
pub struct ProviderRef {
    pub provider: String,
    /// Hex verifying key; read from `provider_vk_file` when empty.
    pub provider_vk: String,
    pub provider_vk_file: Option<PathBuf>,
}

impl Default for ProviderRef {
    fn default() -> Self {
        ProviderRef { provider: "127.0.0.1:7400".into(), provider_vk: String::new(), provider_vk_file: None }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default)]
pub struct CoordinatorSection {
    pub listen: String,
    pub host_id: String,
    #[serde(flatten)]
    pub provider: ProviderRef,
}

impl Default for CoordinatorSection {
    fn default() -> Self {
        CoordinatorSection { listen: "127.0.0.1:7401".into(), host_id: "coordinator-host".into(), provider: ProviderRef::default() }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default)]
pub struct AggregatorSection {
    pub listen: String,
    pub host_id: String,
    pub coordinator: String,
    #[serde(flatten)]
    pub provider: ProviderRef,
}

impl Default for AggregatorSection {
    fn default() -> Self {
        AggregatorSection {
            listen: "127.0.0.1:7402".into(),
            host_id: "agg-1".into(),
            coordinator: "127.0.0.1:7401".into(),
            provider: ProviderRef::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default)]
pub struct ClientSection {
    pub identity: String,
    pub aggregator: String,
    /// Hex signing key; a fresh one is generated when empty.
    pub signing_key_file: Option<PathBuf>,
    pub timeout_ms: u64,
    #[serde(flatten)]
    pub provider: ProviderRef,
}

impl Default for ClientSection {
    fn default() -> Self {
        ClientSection {
            identity: "client".into(),
            aggregator: "127.0.0.1:7402".into(),
            signing_key_file: None,
            timeout_ms: 10_000,
            provider: ProviderRef::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub defense: String,
    pub tau: f64,
    /// `+1` adds the entanglement term to the loss, `-1` subtracts it.
    pub sign: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Synthetic samples generated when no dataset file is given.
    pub samples: usize,
    pub data: Option<PathBuf>,
    pub fractal_systems: usize,
    pub fractal_per_system: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            defense: "good".into(),
            tau: 0.5,
            sign: 1.0,
            epochs: 40,
            lr: 0.1,
            batch: 16,
            seed: 0,
            samples: 100,
            data: None,
            fractal_systems: 10,
            fractal_per_system: 10,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub defense: String,
    pub prior: String,
    /// Runs seeds `0..seeds`.
    pub seeds: u64,
    pub tau: f64,
    pub sign: f64,
    pub lr: f64,
    pub batch: usize,
    pub clients: usize,
    pub local_epochs: usize,
    pub iters: usize,
    pub step: f64,
    pub lambda_tv: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            defense: "vanilla".into(),
            prior: "none".into(),
            seeds: 10,
            tau: 0.5,
            sign: 1.0,
            lr: 0.1,
            batch: 8,
            clients: 4,
            local_epochs: 1,
            iters: 400,
            step: 0.05,
            lambda_tv: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub n_clients: Vec<usize>,
    /// Empty runs both schemes.
    pub schemes: Vec<String>,
    pub transport: String,
    /// One-way delay added to every message.
    pub latency_ms: f64,
    /// Budget for one registration attempt, connection wait included.
    pub timeout_ms: u64,
    pub seed: u64,
    pub registrations_per_client: usize,
    /// Sessions the aggregator serves at once.
    pub connection_budget: usize,
    /// Quote verification cost charged to the baseline; measured when unset.
    pub verify_cost_us: Option<u64>,
    /// Enclave time charged per call on the loopback clock; measured when unset.
    pub request_cost_us: Option<u64>,
    pub quote_cost_us: Option<u64>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            n_clients: vec![2, 50, 100],
            schemes: Vec::new(),
            transport: "loopback".into(),
            latency_ms: 5.0,
            timeout_ms: 5_000,
            seed: 0,
            registrations_per_client: 2,
            connection_budget: 256,
            verify_cost_us: None,
            request_cost_us: None,
            quote_cost_us: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub scripts: usize,
    pub seed: u64,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection { scripts: 200, seed: 0 }
    }
}

/// Which file, if any, the command should read.
pub fn locate(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf).or_else(|| {
        std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
    })
}

/// Reads the file (when there is one) and applies environment overrides.
pub fn load(path: Option<&Path>) -> Result<Config, CliError> {
    let mut table = match path {
        None => toml::Table::new(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
    };
    apply_overrides(&mut table, std::env::vars())?;
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
}

fn apply_overrides(table: &mut toml::Table, vars: impl Iterator<Item = (String, String)>) -> Result<(), CliError> {
    for (name, raw) in vars {
        let Some(rest) = name.strip_prefix(OVERRIDE_PREFIX) else { continue };
        let Some((section, key)) = rest.split_once("__") else {
            return Err(CliError::Config(format!("{name}: expected {OVERRIDE_PREFIX}<SECTION>__<KEY>")));
        };
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(toml::Value::String(raw));
        let entry = table
            .entry(section.to_ascii_lowercase())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match entry {
            toml::Value::Table(t) => {
                t.insert(key.to_ascii_lowercase(), value);
            }
            _ => return Err(CliError::Config(format!("{section} is not a section"))),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, vars: &[(&str, &str)]) -> Result<Config, CliError> {
        let mut t: toml::Table = text.parse().unwrap();
        apply_overrides(&mut t, vars.iter().map(|(a, b)| (a.to_string(), b.to_string())))?;
        toml::Value::Table(t).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(parse("", &[]).unwrap(), Config::default());
    }

    #[test]
    fn overrides_win_and_take_typed_values() {
        let c = parse(
            "[bench]\nn_clients = [2]\n",
            &[("LATTEO__BENCH__N_CLIENTS", "[7, 8]"), ("LATTEO__PROVIDER__POLICY", "agg OR latteo"), ("HOME", "/x")],
        )
        .unwrap();
        assert_eq!(c.bench.n_clients, [7, 8]);
        assert_eq!(c.provider.policy, "agg OR latteo");
    }

    #[test]
    fn flattened_provider_reference() {
        let c = parse("[aggregator]\nprovider = \"10.0.0.1:1\"\nhost_id = \"a\"\n", &[]).unwrap();
        assert_eq!(c.aggregator.provider.provider, "10.0.0.1:1");
        assert_eq!(c.aggregator.host_id, "a");
    }

    #[test]
    fn unknown_keys_and_bad_types_are_config_errors() {
        assert!(matches!(parse("[bench]\nbogus = 1\n", &[]), Err(CliError::Config(_))));
        assert!(matches!(parse("", &[("LATTEO__BENCH__TIMEOUT_MS", "\"soon\"")]), Err(CliError::Config(_))));
        assert!(matches!(parse("", &[("LATTEO__NOSECTION", "1")]), Err(CliError::Config(_))));
    }
}
