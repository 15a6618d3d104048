//! Gradient-matching objectives for inversion.

use crate::mlp::TinyMlp;
use crate::snnl::cosine_similarity;

/// A model whose per-sample parameter gradient the attacker can evaluate.
pub trait GradientModel {
    fn inputs(&self) -> usize;
    fn classes(&self) -> usize;
    /// Parameter gradient of cross-entropy for input `x` and label
    /// distribution `y`.
    fn param_grad(&self, x: &[f64], y: &[f64]) -> Vec<f64>;
}

impl GradientModel for TinyMlp {
    fn inputs(&self) -> usize {
        self.inputs
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn param_grad(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.soft_ce_grad(x, y).1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchMode {
    /// Squared Euclidean distance between gradients.
    Euclid,
    /// `1 − cos` plus `lambda`-weighted total variation of the dummy image.
    CosineTv { lambda: f64, width: usize },
}

/// Sum of absolute differences between horizontal and vertical neighbours
/// of a row-major image `width` pixels wide.
pub fn total_variation(x: &[f64], width: usize) -> f64 {
    let mut tv = 0.0;
    for (k, v) in x.iter().enumerate() {
        if (k + 1) % width != 0 && k + 1 < x.len() {
            tv += (x[k + 1] - v).abs();
        }
        if k + width < x.len() {
            tv += (x[k + width] - v).abs();
        }
    }
    tv
}

pub fn grad_match_loss<M: GradientModel>(model: &M, dummy_x: &[f64], dummy_y: &[f64], target: &[f64], mode: MatchMode) -> f64 {
    let g = model.param_grad(dummy_x, dummy_y);
    match mode {
        MatchMode::Euclid => g.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum(),
        MatchMode::CosineTv { lambda, width } => {
            1.0 - cosine_similarity(&g, target) + lambda * total_variation(dummy_x, width)
        }
    }
}
