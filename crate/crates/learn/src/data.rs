//! Datasets, mixed training batches and the synthetic two-class image task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::LearnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// The client's private task.
    Primary,
    /// Generated fractal data.
    Orthogonal,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub origin: Vec<Origin>,
}

impl Batch {
    pub fn push(&mut self, x: Vec<f64>, y: usize, origin: Origin) {
        self.x.push(x);
        self.y.push(y);
        self.origin.push(origin);
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, x: Vec<Vec<f64>>, y: Vec<usize>) -> Result<Self, LearnError> {
        if x.len() != y.len() {
            return Err(LearnError::Shape(format!("{} samples, {} labels", x.len(), y.len())));
        }
        if let Some(bad) = x.iter().find(|r| r.len() != dim) {
            return Err(LearnError::Shape(format!("sample of length {} in a {dim}-dim set", bad.len())));
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(LearnError::NonFinite("dataset sample".into()));
        }
        Ok(Dataset { dim, x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            dim: self.dim,
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// `[count u64][dim u64][count·dim f64][count u32 labels]`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * (8 * self.dim + 4));
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in self.x.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for y in &self.y {
            out.extend_from_slice(&(*y as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, LearnError> {
        let word = |o: usize| -> Result<u64, LearnError> {
            let s = b.get(o..o + 8).ok_or_else(|| LearnError::Format("truncated dataset header".into()))?;
            Ok(u64::from_le_bytes(s.try_into().expect("8 bytes")))
        };
        let (n, dim) = (word(0)? as usize, word(8)? as usize);
        let floats = n.checked_mul(dim).and_then(|c| c.checked_mul(8));
        let want = floats.and_then(|f| f.checked_add(16 + 4 * n));
        if want != Some(b.len()) {
            return Err(LearnError::Format(format!("dataset of {n}×{dim} does not match {} bytes", b.len())));
        }
        let body = &b[16..16 + n * dim * 8];
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let x = if dim == 0 { vec![Vec::new(); n] } else { values.chunks(dim).map(|c| c.to_vec()).collect() };
        let y = b[16 + n * dim * 8..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        Dataset::new(dim, x, y)
    }
}

/// Side length of the synthetic images.
pub const SIDE: usize = 8;

/// Two-class 8×8 images: a soft blob in the left half for class 0 or the
/// right half for class 1, a fainter blob anywhere, and light noise. The
/// column-mass difference separates the classes linearly.
pub fn synthetic_two_class(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let col = if label == 0 { rng.gen_range(0.5..2.5) } else { rng.gen_range(4.5..6.5) };
        let row = rng.gen_range(1.0..6.0);
        let sigma = rng.gen_range(0.9..1.5);
        let (r2, c2) = (rng.gen_range(0.0..7.0), rng.gen_range(0.0..7.0));
        let faint = rng.gen_range(0.1..0.3);
        let mut img = vec![0.0; SIDE * SIDE];
        for (k, px) in img.iter_mut().enumerate() {
            let (r, c) = ((k / SIDE) as f64, (k % SIDE) as f64);
            let main = (-((r - row).powi(2) + (c - col).powi(2)) / (2.0 * sigma * sigma)).exp();
            let side = faint * (-((r - r2).powi(2) + (c - c2).powi(2)) / 2.0).exp();
            *px = (0.9 * main + side + rng.gen_range(0.0..0.05)).clamp(0.0, 1.0);
        }
        x.push(img);
        y.push(label);
    }
    Dataset { dim: SIDE * SIDE, x, y }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_file_roundtrip() {
        let d = synthetic_two_class(5, 1);
        let b = d.to_bytes();
        assert_eq!(b.len(), 16 + 5 * 64 * 8 + 5 * 4);
        assert_eq!(Dataset::from_bytes(&b).unwrap(), d);
        assert!(Dataset::from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn synthetic_images_are_in_unit_range_and_balanced() {
        let d = synthetic_two_class(40, 2);
        assert!(d.x.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(d.y.iter().filter(|y| **y == 1).count(), 20);
        assert_eq!(synthetic_two_class(40, 2), d);
    }

    #[test]
    fn left_right_mass_separates_the_classes() {
        let d = synthetic_two_class(200, 3);
        for (x, y) in d.x.iter().zip(&d.y) {
            let diff: f64 = x
                .iter()
                .enumerate()
                .map(|(k, v)| if k % SIDE < SIDE / 2 { *v } else { -*v })
                .sum();
            assert_eq!(diff < 0.0, *y == 1);
        }
    }
}
