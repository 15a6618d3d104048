//! Recovering one client's update from two consecutive global models.

use crate::LearnError;

/// Two consecutive global models with exactly one update between them.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientObservation {
    pub w_t: Vec<f64>,
    pub w_prev: Vec<f64>,
    /// Client count the service scales each update by.
    pub clients: usize,
    /// Id of the client whose update was applied, from the round metadata.
    pub client_id: Option<u64>,
}

/// `K·(W_prev − W_t)`: the aggregator applied `W_t = W_prev − Δ/K`, so this
/// is the client's `pre − trained` delta.
pub fn extract_gradient(obs: &GradientObservation) -> Result<Vec<f64>, LearnError> {
    if obs.w_t.len() != obs.w_prev.len() {
        return Err(LearnError::Shape(format!(
            "consecutive models of length {} and {}",
            obs.w_prev.len(),
            obs.w_t.len()
        )));
    }
    if obs.clients == 0 {
        return Err(LearnError::Config("client count must be positive".into()));
    }
    let k = obs.clients as f64;
    Ok(obs.w_prev.iter().zip(&obs.w_t).map(|(p, t)| k * (p - t)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use latteo_core::agg::ModelState;
    use proptest::prelude::*;

    fn obs(w_prev: Vec<f64>, w_t: Vec<f64>, clients: usize) -> GradientObservation {
        GradientObservation { w_t, w_prev, clients, client_id: None }
    }

    #[test]
    fn hand_example() {
        let g = extract_gradient(&obs(vec![2.0, 2.0], vec![1.5, 1.75], 4)).unwrap();
        assert_eq!(g, vec![2.0, 1.0]);
    }

    #[test]
    fn no_change_means_zero() {
        let g = extract_gradient(&obs(vec![0.3, -7.0], vec![0.3, -7.0], 3)).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn mismatched_lengths_are_refused() {
        assert!(extract_gradient(&obs(vec![1.0], vec![1.0, 2.0], 2)).is_err());
    }

    proptest! {
        #[test]
        fn inverts_the_service_update_exactly_for_power_of_two_counts(
            shift in 0u32..4,
            w in prop::collection::vec(-4.0f64..4.0, 1..16),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // Exactly representable values on a 2^-20 grid keep every step exact.
            let grid = |x: f64| (x * 1048576.0).round() / 1048576.0;
            let w: Vec<f64> = w.into_iter().map(grid).collect();
            let pre: Vec<f64> = w.iter().map(|_| grid(rng.gen_range(-4.0..4.0))).collect();
            let trained: Vec<f64> = pre.iter().map(|p| grid(p + rng.gen_range(-1.0..1.0))).collect();
            let k = 1usize << shift;
            let mut state = ModelState::new(w.clone(), k, false).unwrap();
            state.apply_update(0, &pre, &trained).unwrap();
            let g = extract_gradient(&obs(w, state.weights().to_vec(), k)).unwrap();
            let delta: Vec<f64> = pre.iter().zip(&trained).map(|(p, t)| p - t).collect();
            prop_assert_eq!(g, delta);
        }
    }
}
