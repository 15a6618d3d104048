//! Cosine soft-nearest-neighbour loss on log-scaled similarities, and its
//! analytic gradient with respect to the latent rows.

use crate::LearnError;

/// Similarities are clamped into `[EPS, 1 - EPS]` before the logarithm.
pub const EPS: f64 = 1e-7;

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    let (dot, nu, nv) = u
        .iter()
        .zip(v)
        .fold((0.0, 0.0, 0.0), |(d, a, b), (x, y)| (d + x * y, a + x * x, b + y * y));
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0)
}

/// Pairwise log-similarities `l[i][j] = ln clamp(cs(x_i, x_j))` and a mask
/// telling whether the clamp was inactive.
struct Pairs {
    log: Vec<f64>,
    live: Vec<bool>,
    n: usize,
}

impl Pairs {
    fn new(rows: &[&[f64]]) -> Self {
        let n = rows.len();
        let mut log = vec![0.0; n * n];
        let mut live = vec![false; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let cs = cosine_similarity(rows[i], rows[j]);
                let c = cs.clamp(EPS, 1.0 - EPS);
                log[i * n + j] = c.ln();
                log[j * n + i] = c.ln();
                let inside = cs > EPS && cs < 1.0 - EPS;
                live[i * n + j] = inside;
                live[j * n + i] = inside;
            }
        }
        Pairs { log, live, n }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.log[i * self.n + j]
    }

    /// Same-label and all-other sums of row `i`, or `None` when `i` has no
    /// same-label partner.
    fn row_sums(&self, i: usize, labels: &[usize]) -> Option<(f64, f64)> {
        let (mut same, mut all, mut partners) = (0.0, 0.0, 0);
        for k in (0..self.n).filter(|&k| k != i) {
            all += self.at(i, k);
            if labels[k] == labels[i] {
                same += self.at(i, k);
                partners += 1;
            }
        }
        (partners > 0).then_some((same, all))
    }
}

fn check(latents: &[Vec<f64>], labels: &[usize]) -> Result<(), LearnError> {
    if latents.len() != labels.len() {
        return Err(LearnError::Shape(format!("{} latents, {} labels", latents.len(), labels.len())));
    }
    if latents.len() < 2 {
        return Err(LearnError::Shape("entanglement loss needs at least two samples".into()));
    }
    Ok(())
}

/// `-Σ_i ln(Σ_{same label} l_ij / Σ_{k≠i} l_ik)`, skipping samples without
/// a same-label partner. Non-negative, since both sums are negative and the
/// numerator is part of the denominator.
pub fn c_snnl(latents: &[Vec<f64>], labels: &[usize]) -> Result<f64, LearnError> {
    check(latents, labels)?;
    let rows: Vec<&[f64]> = latents.iter().map(|r| r.as_slice()).collect();
    let pairs = Pairs::new(&rows);
    let mut loss = 0.0;
    let mut counted = 0;
    for i in 0..rows.len() {
        if let Some((same, all)) = pairs.row_sums(i, labels) {
            loss -= (same / all).ln();
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(LearnError::NoSameLabelPairs);
    }
    Ok(loss)
}

/// Gradient of [`c_snnl`] with respect to every latent row.
pub fn c_snnl_grad(latents: &[Vec<f64>], labels: &[usize]) -> Result<Vec<Vec<f64>>, LearnError> {
    check(latents, labels)?;
    let rows: Vec<&[f64]> = latents.iter().map(|r| r.as_slice()).collect();
    let n = rows.len();
    let pairs = Pairs::new(&rows);
    // dL/dl_ij summed over the two rows the symmetric term appears in.
    let mut coef = vec![0.0; n * n];
    let mut counted = 0;
    for i in 0..n {
        let Some((same, all)) = pairs.row_sums(i, labels) else { continue };
        counted += 1;
        for k in (0..n).filter(|&k| k != i) {
            let mut c = 1.0 / all;
            if labels[k] == labels[i] {
                c -= 1.0 / same;
            }
            coef[i * n + k] += c;
            coef[k * n + i] += c;
        }
    }
    if counted == 0 {
        return Err(LearnError::NoSameLabelPairs);
    }
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut grad = vec![vec![0.0; rows[0].len()]; n];
    for i in 0..n {
        for j in i + 1..n {
            if !pairs.live[i * n + j] {
                continue;
            }
            // Holds the contributions of both row i and row j.
            let c = coef[i * n + j];
            if c == 0.0 {
                continue;
            }
            let cs = pairs.at(i, j).exp();
            let d = c / cs;
            let inv = 1.0 / (norms[i] * norms[j]);
            for (t, (a, b)) in rows[i].iter().zip(rows[j]).enumerate() {
                grad[i][t] += d * (b * inv - cs * a / (norms[i] * norms[i]));
                grad[j][t] += d * (a * inv - cs * b / (norms[j] * norms[j]));
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let latents = (0..n).map(|_| (0..d).map(|_| rng.gen_range(0.05..2.0)).collect()).collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        labels[1] = labels[0];
        (latents, labels)
    }

    /// Direct double loop over the defining sum, without shared helpers.
    fn oracle(latents: &[Vec<f64>], labels: &[usize]) -> f64 {
        let cs = |a: &Vec<f64>, b: &Vec<f64>| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            (dot / (na * nb)).max(1e-7).min(1.0 - 1e-7).ln()
        };
        let mut total = 0.0;
        for i in 0..latents.len() {
            let mut num = 0.0;
            let mut den = 0.0;
            let mut any = false;
            for j in 0..latents.len() {
                if j == i {
                    continue;
                }
                den += cs(&latents[i], &latents[j]);
                if labels[j] == labels[i] {
                    num += cs(&latents[i], &latents[j]);
                    any = true;
                }
            }
            if any {
                total += -(num / den).ln();
            }
        }
        total
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[3.0, -1.0], &[3.0, -1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]) - 0.8).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn four_sample_batch_matches_direct_sum() {
        let latents = vec![
            vec![1.0, 0.2, 0.0],
            vec![0.9, 0.4, 0.1],
            vec![0.1, 1.0, 0.3],
            vec![0.0, 0.7, 0.8],
        ];
        let labels = [0, 0, 1, 1];
        let got = c_snnl(&latents, &labels).unwrap();
        assert!((got - oracle(&latents, &labels)).abs() < 1e-10);
        assert!(got > 0.0);
    }

    #[test]
    fn identical_same_label_pair_is_finite_and_symmetric() {
        let latents = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let v = c_snnl(&latents, &[1, 1]).unwrap();
        assert!(v.is_finite());
        // One row per sample, each ln(1) under the clamp.
        assert_eq!(v, 0.0);
        let g = c_snnl_grad(&latents, &[1, 1]).unwrap();
        assert_eq!(g[0], g[1]);
    }

    #[test]
    fn singletons_everywhere_is_an_error() {
        let latents = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(c_snnl(&latents, &[0, 1]), Err(LearnError::NoSameLabelPairs)));
        assert!(matches!(c_snnl_grad(&latents, &[0, 1]), Err(LearnError::NoSameLabelPairs)));
    }

    #[test]
    fn skipped_sample_moves_only_through_other_rows() {
        // Sample 2 has no partner, so its own row is dropped; it still sits in
        // the denominators of rows 0 and 1.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut latents, _) = random_batch(&mut rng, 3, 4);
        let labels = [0, 0, 1];
        let g = c_snnl_grad(&latents, &labels).unwrap();
        let h = 1e-6;
        latents[2][0] += h;
        let up = c_snnl(&latents, &labels).unwrap();
        latents[2][0] -= 2.0 * h;
        let down = c_snnl(&latents, &labels).unwrap();
        assert!(((up - down) / (2.0 * h) - g[2][0]).abs() < 1e-6);
        // With it exactly orthogonal to everything its terms are clamped.
        let latents = vec![vec![1.0, 0.5, 0.0], vec![0.5, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let g = c_snnl_grad(&latents, &labels).unwrap();
        assert_eq!(g[2], vec![0.0; 3]);
    }

    #[test]
    fn gradient_matches_central_differences_on_100_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let n = rng.gen_range(3..9);
            let (mut latents, labels) = random_batch(&mut rng, n, 5);
            let g = c_snnl_grad(&latents, &labels).unwrap();
            let h = 1e-5;
            for i in 0..n {
                for t in 0..5 {
                    let x = latents[i][t];
                    latents[i][t] = x + h;
                    let up = c_snnl(&latents, &labels).unwrap();
                    latents[i][t] = x - h;
                    let down = c_snnl(&latents, &labels).unwrap();
                    latents[i][t] = x;
                    let fd = (up - down) / (2.0 * h);
                    let err = (fd - g[i][t]).abs() / g[i][t].abs().max(fd.abs()).max(1e-3);
                    worst = worst.max(err);
                }
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    proptest! {
        #[test]
        fn invariant_under_positive_rescaling(seed in any::<u64>(), n in 3usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (latents, labels) = random_batch(&mut rng, n, 4);
            let scaled: Vec<Vec<f64>> = latents.iter().map(|r| r.iter().map(|x| x * 10.0).collect()).collect();
            let a = c_snnl(&latents, &labels).unwrap();
            let b = c_snnl(&scaled, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-8);
        }

        #[test]
        fn permutation_leaves_value_and_permutes_gradient(seed in any::<u64>(), n in 3usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (latents, labels) = random_batch(&mut rng, n, 4);
            let mut order: Vec<usize> = (0..n).collect();
            order.reverse();
            order.swap(0, n / 2);
            let pl: Vec<Vec<f64>> = order.iter().map(|&i| latents[i].clone()).collect();
            let py: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            let a = c_snnl(&latents, &labels).unwrap();
            let b = c_snnl(&pl, &py).unwrap();
            prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
            let ga = c_snnl_grad(&latents, &labels).unwrap();
            let gb = c_snnl_grad(&pl, &py).unwrap();
            for (k, &i) in order.iter().enumerate() {
                for t in 0..4 {
                    prop_assert!((gb[k][t] - ga[i][t]).abs() < 1e-10 * ga[i][t].abs().max(1.0));
                }
            }
        }
    }
}
