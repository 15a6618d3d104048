//! Two-layer perceptron `D -> H -> C` with a rectifier hidden layer. The
//! hidden activations are the latent features the entanglement loss acts on.
//!
//! Parameters live in one flat vector, laid out as `W1 (H×D, row-major)`,
//! `b1 (H)`, `W2 (C×H)`, `b2 (C)`, so a model can be shipped as an update
//! vector unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, Origin};
use crate::snnl;
use crate::LearnError;

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TinyMlp {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
    pub params: Vec<f64>,
}

/// Weight of the entanglement term and the sign it enters the loss with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entanglement {
    pub tau: f64,
    /// `+1.0` adds the term to the minimized loss; `-1.0` subtracts it.
    pub sign: f64,
}

impl Entanglement {
    pub const OFF: Entanglement = Entanglement { tau: 0.0, sign: 1.0 };

    pub fn new(tau: f64) -> Self {
        Entanglement { tau, sign: 1.0 }
    }

    fn active(&self) -> bool {
        self.tau != 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub latents: Vec<f64>,
    /// Hidden pre-activations, kept for the backward pass.
    pre: Vec<f64>,
}

pub fn param_count(inputs: usize, hidden: usize, classes: usize) -> usize {
    hidden * inputs + hidden + classes * hidden + classes
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl TinyMlp {
    /// He-style uniform initialization, zero biases.
    pub fn new(inputs: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; param_count(inputs, hidden, classes)];
        let l1 = (6.0 / inputs as f64).sqrt();
        let l2 = (6.0 / hidden as f64).sqrt();
        for w in &mut params[..hidden * inputs] {
            *w = rng.gen_range(-l1..l1);
        }
        let w2 = hidden * inputs + hidden;
        for w in &mut params[w2..w2 + classes * hidden] {
            *w = rng.gen_range(-l2..l2);
        }
        TinyMlp { inputs, hidden, classes, params }
    }

    pub fn from_params(inputs: usize, hidden: usize, classes: usize, params: Vec<f64>) -> Result<Self, LearnError> {
        let want = param_count(inputs, hidden, classes);
        if params.len() != want {
            return Err(LearnError::Shape(format!("expected {want} parameters, got {}", params.len())));
        }
        Ok(TinyMlp { inputs, hidden, classes, params })
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.inputs;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.classes * self.hidden;
        (b1, w2, b2)
    }

    pub fn forward(&self, x: &[f64]) -> Forward {
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let pre: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &p[j * self.inputs..(j + 1) * self.inputs];
                p[b1 + j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        let latents: Vec<f64> = pre.iter().map(|a| a.max(0.0)).collect();
        let logits = (0..self.classes)
            .map(|c| {
                let row = &p[w2 + c * self.hidden..w2 + (c + 1) * self.hidden];
                p[b2 + c] + row.iter().zip(&latents).map(|(w, h)| w * h).sum::<f64>()
            })
            .collect();
        Forward { logits, latents, pre }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.forward(x).logits;
        (0..z.len()).fold(0, |best, c| if z[c] > z[best] { c } else { best })
    }

    /// Accumulates the gradient reached through sample `x`, given
    /// the upstream gradients at the logits and at the latents.
    fn backprop(&self, x: &[f64], f: &Forward, d_logits: &[f64], d_latents: Option<&[f64]>, grad: &mut [f64]) {
        let (b1, w2, b2) = self.offsets();
        let mut dh = vec![0.0; self.hidden];
        for (c, &dz) in d_logits.iter().enumerate() {
            if dz == 0.0 {
                continue;
            }
            grad[b2 + c] += dz;
            for j in 0..self.hidden {
                grad[w2 + c * self.hidden + j] += dz * f.latents[j];
                dh[j] += dz * self.params[w2 + c * self.hidden + j];
            }
        }
        if let Some(extra) = d_latents {
            for (d, e) in dh.iter_mut().zip(extra) {
                *d += e;
            }
        }
        for j in 0..self.hidden {
            if f.pre[j] <= 0.0 || dh[j] == 0.0 {
                continue;
            }
            grad[b1 + j] += dh[j];
            let row = &mut grad[j * self.inputs..(j + 1) * self.inputs];
            for (g, v) in row.iter_mut().zip(x) {
                *g += dh[j] * v;
            }
        }
    }

    /// Cross-entropy of one sample against a label distribution, and its
    /// parameter gradient.
    pub fn soft_ce_grad(&self, x: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        let f = self.forward(x);
        let p = softmax(&f.logits);
        let loss = -target.iter().zip(&p).map(|(t, q)| t * q.max(1e-300).ln()).sum::<f64>();
        let d: Vec<f64> = p.iter().zip(target).map(|(q, t)| q - t).collect();
        let mut grad = vec![0.0; self.params.len()];
        self.backprop(x, &f, &d, None, &mut grad);
        (loss, grad)
    }

    /// Mean cross-entropy over the primary samples plus the signed,
    /// weighted entanglement loss over every sample's latents.
    pub fn loss_backward(&self, batch: &Batch, ent: Entanglement) -> Result<(f64, Vec<f64>), LearnError> {
        let primary = batch.origin.iter().filter(|o| **o == Origin::Primary).count();
        if primary == 0 {
            return Err(LearnError::Shape("batch has no primary samples".into()));
        }
        let forwards: Vec<Forward> = batch.x.iter().map(|x| self.forward(x)).collect();
        if forwards.iter().flat_map(|f| &f.logits).any(|z| !z.is_finite()) {
            return Err(LearnError::NonFinite(format!("logits on a batch of {}", batch.len())));
        }
        let mut loss = 0.0;
        let mut d_logits = vec![vec![0.0; self.classes]; batch.len()];
        for (i, f) in forwards.iter().enumerate() {
            if batch.origin[i] != Origin::Primary {
                continue;
            }
            let p = softmax(&f.logits);
            loss -= p[batch.y[i]].max(1e-300).ln() / primary as f64;
            for c in 0..self.classes {
                let t = if c == batch.y[i] { 1.0 } else { 0.0 };
                d_logits[i][c] = (p[c] - t) / primary as f64;
            }
        }
        let mut d_latents: Option<Vec<Vec<f64>>> = None;
        if ent.active() {
            let latents: Vec<Vec<f64>> = forwards.iter().map(|f| f.latents.clone()).collect();
            let w = ent.tau * ent.sign;
            loss += w * snnl::c_snnl(&latents, &batch.y)?;
            let g = snnl::c_snnl_grad(&latents, &batch.y)?;
            d_latents = Some(g.into_iter().map(|r| r.into_iter().map(|v| w * v).collect()).collect());
        }
        if !loss.is_finite() {
            return Err(LearnError::NonFinite(format!("loss {loss} on a batch of {}", batch.len())));
        }
        let mut grad = vec![0.0; self.params.len()];
        for (i, f) in forwards.iter().enumerate() {
            let extra = d_latents.as_ref().map(|d| d[i].as_slice());
            self.backprop(&batch.x[i], f, &d_logits[i], extra, &mut grad);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(LearnError::NonFinite(format!("gradient at loss {loss}")));
        }
        Ok((loss, grad))
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        let hits = xs.iter().zip(ys).filter(|(x, y)| self.predict(x) == **y).count();
        hits as f64 / xs.len().max(1) as f64
    }
}

const MAGIC: &[u8; 4] = b"TMLP";
const VERSION: u32 = 1;

/// Checkpoint: magic, version, layer count, then per layer its
/// `(rows, cols)` followed by all parameters as little-endian `f64`.
pub fn write_checkpoint(model: &TinyMlp) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    for (r, c) in [(model.hidden, model.inputs), (model.classes, model.hidden)] {
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<TinyMlp, LearnError> {
    let bad = |m: &str| LearnError::Format(m.to_string());
    let u32_at = |o: usize| -> Result<u32, LearnError> {
        let b = bytes.get(o..o + 4).ok_or_else(|| bad("truncated header"))?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    };
    if bytes.get(..4) != Some(MAGIC) {
        return Err(bad("not a model checkpoint"));
    }
    if u32_at(4)? != VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    if u32_at(8)? != 2 {
        return Err(bad("expected two layers"));
    }
    let (h, d, c, h2) = (u32_at(12)?, u32_at(16)?, u32_at(20)?, u32_at(24)?);
    if h != h2 {
        return Err(bad("layer shapes do not chain"));
    }
    let body = &bytes[28..];
    if body.len() % 8 != 0 {
        return Err(bad("trailing bytes"));
    }
    let params = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    TinyMlp::from_params(d as usize, h as usize, c as usize, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Batch;

    fn batch(rng: &mut ChaCha8Rng, d: usize, n: usize, orth: usize) -> Batch {
        let mut b = Batch::default();
        for i in 0..n + orth {
            let x = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
            let origin = if i < n { Origin::Primary } else { Origin::Orthogonal };
            b.push(x, i % 2, origin);
        }
        b
    }

    #[test]
    fn zero_input_gives_bias_logits() {
        let mut m = TinyMlp::new(4, 3, 2, 1);
        let (b1, _, b2) = m.offsets();
        m.params[b1..b1 + 3].copy_from_slice(&[-1.0, -2.0, -0.5]);
        m.params[b2..].copy_from_slice(&[0.25, -0.75]);
        let f = m.forward(&[0.0; 4]);
        assert_eq!(f.logits, vec![0.25, -0.75]);
        assert_eq!(f.latents, vec![0.0; 3]);
    }

    #[test]
    fn latents_are_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = TinyMlp::new(16, 32, 3, 2);
        for _ in 0..50 {
            let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert!(m.forward(&x).latents.iter().all(|h| *h >= 0.0));
        }
    }

    #[test]
    fn zero_weight_ignores_orthogonal_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = TinyMlp::new(6, 8, 2, 3);
        let mixed = batch(&mut rng, 6, 3, 3);
        let mut primary = Batch::default();
        for i in 0..3 {
            primary.push(mixed.x[i].clone(), mixed.y[i], Origin::Primary);
        }
        let a = m.loss_backward(&mixed, Entanglement::OFF).unwrap();
        let b = m.loss_backward(&primary, Entanglement::OFF).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for tau in [0.0, 0.5] {
            let mut m = TinyMlp::new(5, 6, 3, 7);
            // Positive first-layer biases keep every unit away from the kink.
            let (b1, _, _) = m.offsets();
            for b in &mut m.params[b1..b1 + 6] {
                *b = 2.0;
            }
            let b = batch(&mut rng, 5, 3, 3);
            let ent = Entanglement::new(tau);
            let (_, g) = m.loss_backward(&b, ent).unwrap();
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for k in 0..m.params.len() {
                let v = m.params[k];
                m.params[k] = v + h;
                let up = m.loss_backward(&b, ent).unwrap().0;
                m.params[k] = v - h;
                let down = m.loss_backward(&b, ent).unwrap().0;
                m.params[k] = v;
                let fd = (up - down) / (2.0 * h);
                worst = worst.max((fd - g[k]).abs() / g[k].abs().max(fd.abs()).max(1e-3));
            }
            assert!(worst < 1e-4, "tau {tau}: max relative error {worst}");
        }
    }

    #[test]
    fn one_hot_soft_target_matches_hard_label_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = TinyMlp::new(4, 5, 2, 9);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut b = Batch::default();
        b.push(x.clone(), 1, Origin::Primary);
        let hard = m.loss_backward(&b, Entanglement::OFF).unwrap();
        let soft = m.soft_ce_grad(&x, &[0.0, 1.0]);
        assert_eq!(hard.1, soft.1);
    }

    #[test]
    fn checkpoint_roundtrip_and_rejects_garbage() {
        let m = TinyMlp::new(64, 32, 2, 11);
        let bytes = write_checkpoint(&m);
        assert_eq!(bytes.len(), 28 + 8 * m.params.len());
        assert_eq!(read_checkpoint(&bytes).unwrap(), m);
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(read_checkpoint(b"TMLP").is_err());
    }
}
