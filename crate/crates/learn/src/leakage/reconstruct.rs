//! Gradient inversion: optimize a dummy input and label until their
//! gradient matches the observed one.
//!
//! The search direction comes from central differences over the dummy
//! variables, and Adam takes the step. The dummy label is a logit vector
//! pushed through softmax unless the label is known.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matching::{grad_match_loss, GradientModel, MatchMode};
use super::metrics;
use crate::mlp::softmax;
use crate::LearnError;

pub const MAX_RESTARTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prior {
    /// Euclidean gradient matching.
    None,
    /// Cosine gradient matching with a total-variation penalty.
    Tv,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructConfig {
    pub prior: Prior,
    pub iters: usize,
    /// Adam step size.
    pub step: f64,
    /// Central-difference half width.
    pub h: f64,
    pub lambda_tv: f64,
    /// Image width, for the total-variation term.
    pub width: usize,
    pub known_label: Option<usize>,
    pub seed: u64,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig {
            prior: Prior::None,
            iters: 400,
            step: 0.05,
            h: 1e-4,
            lambda_tv: 1e-2,
            width: 8,
            known_label: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Best dummy input, in `[0, 1]`.
    pub x: Vec<f64>,
    /// Label distribution of the best iterate.
    pub y: Vec<f64>,
    pub iterations: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub reconstruction: Reconstruction,
    pub ssim: f64,
    pub mse: f64,
}

impl Reconstruction {
    pub fn score(self, truth: &[f64], width: usize) -> Result<ReconstructionResult, LearnError> {
        let ssim = metrics::ssim(&self.x, truth, width)?;
        let mse = metrics::mse(&self.x, truth)?;
        Ok(ReconstructionResult { reconstruction: self, ssim, mse })
    }
}

struct Objective<'a, M> {
    model: &'a M,
    target: &'a [f64],
    mode: MatchMode,
    known: Option<Vec<f64>>,
    n_x: usize,
}

impl<M: GradientModel> Objective<'_, M> {
    fn label(&self, v: &[f64]) -> Vec<f64> {
        match &self.known {
            Some(y) => y.clone(),
            None => softmax(&v[self.n_x..]),
        }
    }

    fn loss(&self, v: &[f64]) -> f64 {
        grad_match_loss(self.model, &v[..self.n_x], &self.label(v), self.target, self.mode)
    }
}

pub fn reconstruct<M: GradientModel>(model: &M, target: &[f64], cfg: &ReconstructConfig) -> Result<Reconstruction, LearnError> {
    if cfg.iters == 0 || !(cfg.step > 0.0) || !(cfg.h > 0.0) {
        return Err(LearnError::Config("iterations, step and difference width must be positive".into()));
    }
    let n_x = model.inputs();
    let classes = model.classes();
    let known = match cfg.known_label {
        Some(c) if c >= classes => return Err(LearnError::Config(format!("label {c} of {classes}"))),
        Some(c) => Some((0..classes).map(|k| if k == c { 1.0 } else { 0.0 }).collect()),
        None => None,
    };
    let mode = match cfg.prior {
        Prior::None => MatchMode::Euclid,
        Prior::Tv => MatchMode::CosineTv { lambda: cfg.lambda_tv, width: cfg.width },
    };
    let obj = Objective { model, target, mode, known, n_x };
    let dims = n_x + if obj.known.is_some() { 0 } else { classes };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..=MAX_RESTARTS {
        let mut v: Vec<f64> = (0..n_x).map(|_| rng.gen_range(0.0..1.0)).collect();
        v.extend((n_x..dims).map(|_| rng.gen_range(-1.0..1.0)));
        if let Some(r) = descend(&obj, v, cfg) {
            return Ok(r);
        }
    }
    Err(LearnError::ReconstructionFailed { restarts: MAX_RESTARTS })
}

/// Runs Adam from `v`; `None` as soon as the loss turns non-finite.
fn descend<M: GradientModel>(obj: &Objective<'_, M>, mut v: Vec<f64>, cfg: &ReconstructConfig) -> Option<Reconstruction> {
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let dims = v.len();
    let mut m = vec![0.0; dims];
    let mut s = vec![0.0; dims];
    let mut best = (f64::INFINITY, v.clone(), 0);
    for t in 1..=cfg.iters {
        let loss = obj.loss(&v);
        if !loss.is_finite() {
            return None;
        }
        if loss < best.0 {
            best = (loss, v.clone(), t - 1);
        }
        let mut g = vec![0.0; dims];
        for k in 0..dims {
            let x = v[k];
            v[k] = x + cfg.h;
            let up = obj.loss(&v);
            v[k] = x - cfg.h;
            let down = obj.loss(&v);
            v[k] = x;
            g[k] = (up - down) / (2.0 * cfg.h);
        }
        if g.iter().any(|x| !x.is_finite()) {
            return None;
        }
        let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        for k in 0..dims {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            s[k] = b2 * s[k] + (1.0 - b2) * g[k] * g[k];
            v[k] -= cfg.step * (m[k] / c1) / ((s[k] / c2).sqrt() + eps);
        }
        for x in &mut v[..obj.n_x] {
            *x = x.clamp(0.0, 1.0);
        }
    }
    let loss = obj.loss(&v);
    if !loss.is_finite() {
        return None;
    }
    if loss < best.0 {
        best = (loss, v.clone(), cfg.iters);
    }
    let (final_loss, v, iterations) = best;
    Some(Reconstruction {
        y: obj.label(&v),
        x: v[..obj.n_x].to_vec(),
        iterations,
        final_loss,
    })
}
