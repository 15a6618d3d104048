//! End-to-end attack: a victim trains locally on a single private image
//! and submits the result through the aggregation service; an observer who
//! fetches the global model before and after extracts the update and
//! inverts it.

use latteo_core::agg::client::open_response;
use latteo_core::agg::{AggResponse, AggregatorHost, Client};
use latteo_core::deploy::Deployment;
use latteo_core::enclave::Platform;
use latteo_core::mesh::ProviderConfig;
use serde::Serialize;

use super::extract::{extract_gradient, GradientObservation};
use super::reconstruct::{reconstruct, Prior, ReconstructConfig, ReconstructionResult};
use crate::data::{synthetic_two_class, Dataset, SIDE};
use crate::fractal::{orthogonal_dataset, FractalParams};
use crate::mlp::{Entanglement, TinyMlp, DEFAULT_HIDDEN};
use crate::train::{train_good, train_vanilla, TrainConfig, TrainReport};
use crate::LearnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Defense {
    Vanilla,
    Good,
}

impl Defense {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vanilla" => Some(Defense::Vanilla),
            "good" => Some(Defense::Good),
            _ => None,
        }
    }
}

impl Prior {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Prior::None),
            "tv" => Some(Prior::Tv),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Prior::None => "none",
            Prior::Tv => "tv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub defense: Defense,
    pub prior: Prior,
    pub seeds: Vec<u64>,
    /// Entanglement weight when the defense is on.
    pub tau: f64,
    /// Sign of the entanglement term in the minimized loss.
    pub sign: f64,
    /// Victim's local learning rate, known to the observer.
    pub lr: f64,
    /// Mixed batch size: one private image plus `batch / 2` fractals.
    pub batch: usize,
    /// Client count the service divides updates by.
    pub clients: usize,
    /// Epochs of the victim's local training on its image.
    pub local_epochs: usize,
    pub fractal_systems: usize,
    pub fractal_per_system: usize,
    pub iters: usize,
    pub step: f64,
    pub lambda_tv: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            defense: Defense::Vanilla,
            prior: Prior::None,
            seeds: (0..10).collect(),
            tau: 0.5,
            sign: 1.0,
            lr: 0.1,
            batch: 8,
            clients: 4,
            local_epochs: 1,
            fractal_systems: 10,
            fractal_per_system: 10,
            iters: 400,
            step: 0.05,
            lambda_tv: 1e-2,
        }
    }
}

/// One CSV row per `(defense, prior, seed)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackRow {
    pub defense: Defense,
    pub prior: &'static str,
    pub seed: u64,
    pub ssim: f64,
    pub mse: f64,
    pub iters: usize,
    pub final_loss: f64,
}

pub const CSV_HEADER: [&str; 7] = ["defense", "prior", "seed", "ssim", "mse", "iters", "final_loss"];

/// Everything one attack saw, for inspection.
#[derive(Debug, Clone)]
pub struct AttackTrace {
    pub private: Vec<f64>,
    pub observation: GradientObservation,
    pub gradient: Vec<f64>,
    pub result: ReconstructionResult,
    pub row: AttackRow,
}

fn svc(e: impl std::fmt::Display) -> LearnError {
    LearnError::Service(e.to_string())
}

/// One request/response with the aggregation enclave.
fn round_trip(agg: &AggregatorHost, client: &mut Client, update: Option<(&[f64], &[f64])>) -> Result<AggResponse, LearnError> {
    let (req, pending) = client.build_request(update).map_err(svc)?;
    let frame = agg
        .submit(&req.to_bytes())
        .map_err(svc)?
        .ok_or_else(|| svc("request dropped"))?;
    let resp = open_response(&pending, &frame.payload).map_err(svc)?;
    client.absorb(&resp);
    Ok(resp)
}

pub fn attack_once(cfg: &AttackConfig, seed: u64) -> Result<AttackTrace, LearnError> {
    let data = synthetic_two_class(2, seed);
    let private = data.subset(&[(seed % 2) as usize]);
    let orth = orthogonal(cfg, seed)?;
    let global = TinyMlp::new(data.dim, DEFAULT_HIDDEN, 2, seed);

    let config = ProviderConfig::simple([0; 32], cfg.clients, global.params.clone());
    let d = Deployment::start(Platform::new(), config, &["agg-1"]).map_err(svc)?;
    let agg = &d.aggregators[0];
    let mut observer = d.register("observer").map_err(svc)?;
    let mut victim = d.register("victim").map_err(svc)?;

    let w_prev = round_trip(agg, &mut observer, None)?.weights;
    let pre = round_trip(agg, &mut victim, None)?.weights;
    let local = TrainConfig { epochs: cfg.local_epochs, lr: cfg.lr, batch: cfg.batch, seed };
    let model = TinyMlp::from_params(private.dim, DEFAULT_HIDDEN, 2, pre.clone())?;
    let trained = train(cfg, &model, &private, orth.as_ref(), &local)?.model.params;
    let applied = round_trip(agg, &mut victim, Some((&pre, &trained)))?;
    let after = round_trip(agg, &mut observer, None)?;
    if after.version != applied.version {
        return Err(svc("another update interleaved"));
    }

    let observation = GradientObservation {
        w_t: after.weights,
        w_prev,
        clients: cfg.clients,
        client_id: Some(applied.client_id),
    };
    let gradient = extract_gradient(&observation)?;
    let target: Vec<f64> = gradient.iter().map(|g| g / cfg.lr).collect();
    let model = TinyMlp::from_params(global.inputs, global.hidden, global.classes, observation.w_prev.clone())?;
    let rcfg = ReconstructConfig {
        prior: cfg.prior,
        iters: cfg.iters,
        step: cfg.step,
        lambda_tv: cfg.lambda_tv,
        width: SIDE,
        seed,
        ..ReconstructConfig::default()
    };
    let result = reconstruct(&model, &target, &rcfg)?.score(&private.x[0], SIDE)?;
    let row = AttackRow {
        defense: cfg.defense,
        prior: cfg.prior.name(),
        seed,
        ssim: result.ssim,
        mse: result.mse,
        iters: result.reconstruction.iterations,
        final_loss: result.reconstruction.final_loss,
    };
    Ok(AttackTrace { private: private.x[0].clone(), observation, gradient, result, row })
}

fn orthogonal(cfg: &AttackConfig, seed: u64) -> Result<Option<Dataset>, LearnError> {
    if cfg.defense == Defense::Vanilla {
        return Ok(None);
    }
    let params = FractalParams {
        systems: cfg.fractal_systems,
        per_system: cfg.fractal_per_system,
        resolution: SIDE,
        seed: seed ^ 0x0f0f,
    };
    orthogonal_dataset(&params, 2).map(Some)
}

fn train(cfg: &AttackConfig, model: &TinyMlp, data: &Dataset, orth: Option<&Dataset>, tcfg: &TrainConfig) -> Result<TrainReport, LearnError> {
    match orth {
        None => train_vanilla(model, data, tcfg),
        Some(o) => train_good(model, data, o, Entanglement { tau: cfg.tau, sign: cfg.sign }, tcfg),
    }
}

/// Runs every seed, in parallel, and returns rows in seed order.
pub fn run_attack_experiment(cfg: &AttackConfig) -> Result<Vec<AttackRow>, LearnError> {
    if cfg.seeds.is_empty() {
        return Err(LearnError::Config("no seeds".into()));
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = cfg.seeds.iter().map(|&seed| s.spawn(move || attack_once(cfg, seed))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("attack thread panicked").map(|t| t.row))
            .collect()
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipeline_extraction_equals_standalone() {
        let cfg = AttackConfig { iters: 5, ..AttackConfig::default() };
        let t = attack_once(&cfg, 1).unwrap();
        assert_eq!(extract_gradient(&t.observation).unwrap(), t.gradient);
        assert_eq!(t.row.seed, 1);
        assert!(t.gradient.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn one_row_per_seed() {
        let cfg = AttackConfig { seeds: vec![3, 4, 5], iters: 3, defense: Defense::Good, prior: Prior::Tv, ..AttackConfig::default() };
        let rows = run_attack_experiment(&cfg).unwrap();
        assert_eq!(rows.iter().map(|r| r.seed).collect::<Vec<_>>(), [3, 4, 5]);
        assert!(rows.iter().all(|r| r.defense == Defense::Good && r.prior == "tv"));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
