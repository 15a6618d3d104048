//! Plain gradient-descent local training, with or without entanglement
//! against the orthogonal distribution.
//!
//! Each step takes `min(⌈b/2⌉, |private|)` private samples in epoch order
//! and, when entangling, `⌊b/2⌋` orthogonal samples drawn uniformly. The two
//! draws use separate generators, so a zero entanglement weight replays the
//! vanilla trajectory bit for bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, Dataset, Origin};
use crate::mlp::{Entanglement, TinyMlp};
use crate::LearnError;

/// Loss beyond this aborts training.
pub const DIVERGENCE: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 50, lr: 0.1, batch: 16, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub model: TinyMlp,
    pub steps: usize,
    pub final_loss: f64,
}

fn validate(model: &TinyMlp, data: &Dataset, cfg: &TrainConfig) -> Result<(), LearnError> {
    if !(cfg.lr > 0.0) {
        return Err(LearnError::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if cfg.batch == 0 {
        return Err(LearnError::Config("batch size must be positive".into()));
    }
    if data.is_empty() {
        return Err(LearnError::Shape("no private samples".into()));
    }
    if data.dim != model.inputs {
        return Err(LearnError::Shape(format!("model takes {} inputs, data has {}", model.inputs, data.dim)));
    }
    Ok(())
}

fn run(
    model: &TinyMlp,
    private: &Dataset,
    orthogonal: Option<(&Dataset, Entanglement)>,
    cfg: &TrainConfig,
) -> Result<TrainReport, LearnError> {
    validate(model, private, cfg)?;
    let mut model = model.clone();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut orth_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    orth_rng.set_stream(1);
    let per_step = cfg.batch.div_ceil(2).min(private.len());
    let mut order: Vec<usize> = (0..private.len()).collect();
    let (mut steps, mut last) = (0, f64::NAN);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(per_step) {
            let mut batch = Batch::default();
            for &i in chunk {
                batch.push(private.x[i].clone(), private.y[i], Origin::Primary);
            }
            let mut ent = Entanglement::OFF;
            if let Some((orth, e)) = orthogonal {
                if e.tau != 0.0 {
                    for _ in 0..cfg.batch / 2 {
                        let k = orth_rng.gen_range(0..orth.len());
                        batch.push(orth.x[k].clone(), orth.y[k], Origin::Orthogonal);
                    }
                    ent = e;
                }
            }
            let (loss, grad) = model.loss_backward(&batch, ent)?;
            if loss.abs() > DIVERGENCE {
                return Err(LearnError::Diverged { step: steps, loss });
            }
            for (p, g) in model.params.iter_mut().zip(&grad) {
                *p -= cfg.lr * g;
            }
            steps += 1;
            last = loss;
        }
    }
    Ok(TrainReport { model, steps, final_loss: last })
}

pub fn train_vanilla(model: &TinyMlp, private: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, LearnError> {
    run(model, private, None, cfg)
}

/// Local training with the entanglement term over mixed batches.
pub fn train_good(
    model: &TinyMlp,
    private: &Dataset,
    orthogonal: &Dataset,
    ent: Entanglement,
    cfg: &TrainConfig,
) -> Result<TrainReport, LearnError> {
    if !(0.0..=1.0).contains(&ent.tau) {
        return Err(LearnError::Config(format!("entanglement weight {} outside [0, 1]", ent.tau)));
    }
    if orthogonal.is_empty() || orthogonal.dim != private.dim {
        return Err(LearnError::Shape("orthogonal data must be non-empty and match the private dimension".into()));
    }
    if cfg.batch < 2 && ent.tau != 0.0 {
        return Err(LearnError::Config("entangled batches need at least one orthogonal sample".into()));
    }
    run(model, private, Some((orthogonal, ent)), cfg)
}
