//! Density-ratio out-of-distribution detection over trajectory features.
//!
//! The detector embeds 19 trajectory statistics through a rank-based
//! quantile transform, standardization, and PCA (all fitted on
//! in-distribution data only), models both classes with cross-validated
//! kernel density estimates, and scores new points by the negated
//! log-density ratio. Around that core live threshold calibration, balanced
//! bootstrap evaluation, feature importance ranking, a monotone error
//! envelope with a Chebyshev tail bound, the classical embedding-space
//! baselines, and an adaptive dropout-rate detector on a small stand-in
//! regressor.
//!
//! Everything reuses [`driftwood_core`]'s error type so the CLI can map
//! validation and numerical failures to distinct exit codes.

pub mod baselines;
pub mod detector;
pub mod envelope;
pub mod importance;
pub mod kde;
pub mod linalg;
pub mod metrics;
pub mod preprocess;
pub mod ratein;

pub use driftwood_core::{CoreError, Result};

pub use baselines::{
    baseline_suite_evaluate, composite_similarity, BaselineConfig, BaselineKind, BaselineSuite,
    EmbeddingSet, SuiteReport,
};
pub use detector::{calibrate_threshold, DetectorConfig, DetectorModel, RiskLevel};
pub use envelope::{chebyshev_bound, fit_monotone_envelope, MonotoneEnvelope};
pub use importance::feature_importance;
pub use kde::Kde;
pub use metrics::{auroc, bootstrap_evaluate, ConfusionCounts, EvalReport};
pub use preprocess::Preprocessor;
pub use ratein::{
    dropout_mask, geometric_target, ratein_mi, ratein_optimize_layer, ratein_profile,
    ratein_score, MiEstimate, RateInConfig, RateInProfile, StandInRegressor, DROPOUT_SITES,
};
