//! Reconstruction quality: mean squared error and windowed structural
//! similarity on unit-range images.

use crate::LearnError;

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape(a: &[f64], b: &[f64], width: usize) -> Result<usize, LearnError> {
    if a.len() != b.len() {
        return Err(LearnError::Shape(format!("images of {} and {} pixels", a.len(), b.len())));
    }
    if width == 0 || a.is_empty() || a.len() % width != 0 {
        return Err(LearnError::Shape(format!("{} pixels do not form rows of {width}", a.len())));
    }
    Ok(a.len() / width)
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64, LearnError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(LearnError::Shape(format!("images of {} and {} pixels", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Mean SSIM over every `w×w` window at stride 1, `w = min(7, side)`, with
/// uniform weights and population moments.
pub fn ssim(a: &[f64], b: &[f64], width: usize) -> Result<f64, LearnError> {
    let height = same_shape(a, b, width)?;
    let w = 7.min(width).min(height);
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut windows = 0;
    for r0 in 0..=height - w {
        for c0 in 0..=width - w {
            let px = |img: &[f64], k: usize| img[(r0 + k / w) * width + c0 + k % w];
            let (mut ma, mut mb) = (0.0, 0.0);
            for k in 0..w * w {
                ma += px(a, k);
                mb += px(b, k);
            }
            ma /= n;
            mb /= n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for k in 0..w * w {
                let (da, db) = (px(a, k) - ma, px(b, k) - mb);
                va += da * da;
                vb += db * db;
                cov += da * db;
            }
            va /= n;
            vb /= n;
            cov /= n;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}
