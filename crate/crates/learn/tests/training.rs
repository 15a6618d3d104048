use latteo_learn::data::synthetic_two_class;
use latteo_learn::fractal::{orthogonal_dataset, FractalParams};
use latteo_learn::mlp::{Entanglement, TinyMlp, DEFAULT_HIDDEN};
use latteo_learn::train::{train_good, train_vanilla, TrainConfig};

/// Held-out accuracy of vanilla and entangled training from the same start.
fn paired(seed: u64) -> (f64, f64) {
    let train = synthetic_two_class(100, seed);
    let test = synthetic_two_class(200, seed + 1000);
    let orth = orthogonal_dataset(&FractalParams { systems: 10, per_system: 10, resolution: 8, seed }, 2).unwrap();
    let model = TinyMlp::new(train.dim, DEFAULT_HIDDEN, 2, seed);
    let cfg = TrainConfig { epochs: 40, lr: 0.1, batch: 16, seed };
    let v = train_vanilla(&model, &train, &cfg).unwrap().model;
    let g = train_good(&model, &train, &orth, Entanglement::new(0.5), &cfg).unwrap().model;
    (v.accuracy(&test.x, &test.y), g.accuracy(&test.x, &test.y))
}

#[test]
fn entangled_training_stays_within_five_points_of_vanilla() {
    let runs: Vec<(f64, f64)> = (0..10).map(paired).collect();
    let mean = |f: fn(&(f64, f64)) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let (v, g) = (mean(|r| r.0), mean(|r| r.1));
    assert!(v > 0.9, "vanilla accuracy {v}");
    assert!(v - g <= 0.05, "vanilla {v} entangled {g}");
}
