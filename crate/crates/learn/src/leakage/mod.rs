//! Update extraction from consecutive global models, gradient-matching
//! inversion, and reconstruction metrics.

pub mod experiment;
pub mod extract;
pub mod matching;
pub mod metrics;
pub mod reconstruct;

pub use experiment::{attack_once, median, run_attack_experiment, AttackConfig, AttackRow, AttackTrace, Defense};
pub use extract::{extract_gradient, GradientObservation};
pub use matching::{grad_match_loss, total_variation, GradientModel, MatchMode};
pub use metrics::{mse, ssim};
pub use reconstruct::{reconstruct, Prior, ReconstructConfig, Reconstruction, ReconstructionResult};
