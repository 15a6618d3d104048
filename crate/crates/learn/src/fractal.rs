//! Fractal images from random iterated function systems, rendered with the
//! chaos game. Each system is one class of the orthogonal distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::LearnError;

const BURN_IN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FractalParams {
    /// Number of distinct systems.
    pub systems: usize,
    /// Images rendered per system.
    pub per_system: usize,
    /// Pixels per side.
    pub resolution: usize,
    pub seed: u64,
}

/// `p ↦ A·p + t` with `A` row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Affine {
    a: [f64; 4],
    t: [f64; 2],
}

impl Affine {
    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a[0] * p[0] + self.a[1] * p[1] + self.t[0],
            self.a[2] * p[0] + self.a[3] * p[1] + self.t[1],
        ]
    }
}

/// Largest singular value of a 2×2 matrix.
fn spectral_norm(a: &[f64; 4]) -> f64 {
    // Eigenvalues of AᵀA from its trace and determinant.
    let p = a[0] * a[0] + a[2] * a[2];
    let q = a[0] * a[1] + a[2] * a[3];
    let r = a[1] * a[1] + a[3] * a[3];
    let half = (p + r) / 2.0;
    let disc = (((p - r) / 2.0).powi(2) + q * q).sqrt();
    (half + disc).sqrt()
}

fn random_system(rng: &mut ChaCha8Rng) -> (Vec<Affine>, Vec<f64>) {
    let n = rng.gen_range(2..=8);
    let maps: Vec<Affine> = (0..n)
        .map(|_| {
            let mut a = [0.0; 4];
            for v in &mut a {
                *v = rng.gen_range(-1.0..1.0);
            }
            let s = spectral_norm(&a);
            let target = rng.gen_range(0.2..0.9);
            if s > 0.0 {
                for v in &mut a {
                    *v *= target / s;
                }
            }
            Affine { a, t: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)] }
        })
        .collect();
    // Maps that shrink area less are visited more often.
    let weights: Vec<f64> = maps.iter().map(|m| (m.a[0] * m.a[3] - m.a[1] * m.a[2]).abs() + 0.05).collect();
    (maps, weights)
}

fn render(maps: &[Affine], weights: &[f64], res: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let pick = |rng: &mut ChaCha8Rng| {
        let mut u = rng.gen_range(0.0..total);
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    };
    let mut p = [0.0, 0.0];
    for _ in 0..BURN_IN {
        p = maps[pick(rng)].apply(p);
    }
    let count = 10 * res * res;
    let mut pts = Vec::with_capacity(count);
    for _ in 0..count {
        p = maps[pick(rng)].apply(p);
        pts.push(p);
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for q in &pts {
        for d in 0..2 {
            lo[d] = lo[d].min(q[d]);
            hi[d] = hi[d].max(q[d]);
        }
    }
    let mut hist = vec![0.0; res * res];
    for q in &pts {
        let cell = |d: usize| {
            let span = (hi[d] - lo[d]).max(1e-12);
            (((q[d] - lo[d]) / span * res as f64) as usize).min(res - 1)
        };
        hist[cell(1) * res + cell(0)] += 1.0;
    }
    let max = hist.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for h in &mut hist {
            *h /= max;
        }
    }
    hist
}

/// An image with every pixel equal carries no shape.
fn degenerate(img: &[f64]) -> bool {
    img.iter().all(|v| *v == img[0])
}

/// `systems × per_system` images with their system index. A pure function
/// of `params`: system `s` draws from stream `s` of the seed, and a
/// degenerate render moves the system to the next unused stream.
pub fn ifs_generate(params: &FractalParams) -> Result<Vec<(Vec<f64>, usize)>, LearnError> {
    if params.systems == 0 || params.per_system == 0 || params.resolution == 0 {
        return Err(LearnError::Shape("fractal parameters must be positive".into()));
    }
    let mut out = Vec::with_capacity(params.systems * params.per_system);
    let mut stream = params.systems as u64;
    for s in 0..params.systems {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(s as u64);
        let mut images;
        loop {
            let (maps, weights) = random_system(&mut rng);
            images = (0..params.per_system)
                .map(|_| render(&maps, &weights, params.resolution, &mut rng))
                .collect::<Vec<_>>();
            if !images.iter().any(|i| degenerate(i)) {
                break;
            }
            rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(stream);
            stream += 1;
        }
        out.extend(images.into_iter().map(|i| (i, s)));
    }
    Ok(out)
}

/// Fractal dataset labelled round-robin into `classes`: system `s` gets
/// label `s mod classes`, so every primary label has fractal partners.
pub fn orthogonal_dataset(params: &FractalParams, classes: usize) -> Result<Dataset, LearnError> {
    let images = ifs_generate(params)?;
    let dim = params.resolution * params.resolution;
    let (x, y): (Vec<_>, Vec<_>) = images.into_iter().map(|(img, s)| (img, s % classes)).unzip();
    Dataset::new(dim, x, y)
}
