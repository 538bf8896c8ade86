//! Attribution, perturbation and statistics built on top of the metric.

pub mod attribution;
pub mod boundary;
pub mod perturb;
pub mod stats;

pub use attribution::{
    important_tokens, integrate_path, integrated_gradients, AttributionResult, Baseline,
    ImportancePolicy,
};
pub use boundary::boundary_distance;
pub use perturb::{
    apply_substitutions, delta_stats, score_pairs, DeltaStats, PairedRecord, Substitution,
    SubstitutionSpec,
};
pub use stats::{histogram_csv, histogram_overlap, spearman, OverlapReport};
