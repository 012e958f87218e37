//! The trajectory-aware detector: preprocessing fitted on ID features, one
//! KDE per class, and the negated log-density-ratio score
//!
//! ```text
//! L(z) = ln p_id(z) - ln p_ood(z),   S = -L
//! ```
//!
//! with a threshold calibrated to maximize F1 on a held-out validation
//! split and percentile-based risk stratification against the ID
//! calibration scores.

use serde::{Deserialize, Serialize};
use std::path::Path;

use driftwood_core::{CoreError, Mat, Result};

use crate::kde::{fit_kde, Kde};
use crate::metrics::confusion;
use crate::preprocess::Preprocessor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    #[serde(default = "default_m_components")]
    pub m_components: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// fraction of each class held out for threshold calibration
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_risk_cutoffs")]
    pub risk_cutoffs: (f64, f64),
}

fn default_m_components() -> usize {
    15
}

fn default_folds() -> usize {
    5
}

fn default_val_fraction() -> f64 {
    0.25
}

fn default_risk_cutoffs() -> (f64, f64) {
    (0.90, 0.99)
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            m_components: default_m_components(),
            folds: default_folds(),
            val_fraction: default_val_fraction(),
            risk_cutoffs: default_risk_cutoffs(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_components == 0 {
            return Err(CoreError::validation("need at least one component"));
        }
        if self.folds < 2 {
            return Err(CoreError::validation("need at least 2 CV folds"));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 0.5) {
            return Err(CoreError::validation(format!(
                "validation fraction must be in (0, 0.5), got {}",
                self.val_fraction
            )));
        }
        let (lo, hi) = self.risk_cutoffs;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(CoreError::validation(format!(
                "risk cutoffs must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RiskLevel {
    Low,
    Medium,
    High,
}

impl std::fmt::Display for RiskLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RiskLevel::Low => write!(f, "low"),
            RiskLevel::Medium => write!(f, "medium"),
            RiskLevel::High => write!(f, "high"),
        }
    }
}

const DETECTOR_VERSION: &str = "driftwood-detector-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    version: String,
    pub config: DetectorConfig,
    pub preprocessor: Preprocessor,
    pub kde_id: Kde,
    pub kde_ood: Kde,
    pub tau: f64,
    /// OOD scores of the ID calibration split, for percentile ranks
    pub id_calibration_scores: Vec<f64>,
}

/// Deterministic interleaved split: every round(1/fraction)-th row goes to
/// the validation side.
fn split_rows(x: &Mat, fraction: f64) -> (Mat, Mat) {
    let (n, d) = x.shape();
    let stride = (1.0 / fraction).round().max(2.0) as usize;
    let val_idx: Vec<usize> = (0..n).filter(|i| i % stride == stride - 1).collect();
    let fit_idx: Vec<usize> = (0..n).filter(|i| i % stride != stride - 1).collect();
    let mut fit = Mat::zeros(fit_idx.len(), d);
    let mut val = Mat::zeros(val_idx.len(), d);
    for (dst, &src) in fit_idx.iter().enumerate() {
        fit.row_mut(dst).copy_from_slice(x.row(src));
    }
    for (dst, &src) in val_idx.iter().enumerate() {
        val.row_mut(dst).copy_from_slice(x.row(src));
    }
    (fit, val)
}

impl DetectorModel {
    /// Fit on feature matrices of the two classes. Preprocessing sees only
    /// ID rows; each class is split into a KDE-fitting part and a
    /// threshold-calibration part.
    pub fn fit(x_id: &Mat, x_ood: &Mat, config: DetectorConfig) -> Result<DetectorModel> {
        config.validate()?;
        if x_id.shape().1 != x_ood.shape().1 {
            return Err(CoreError::validation(format!(
                "feature dimensions differ: ID {} vs OOD {}",
                x_id.shape().1,
                x_ood.shape().1
            )));
        }
        let m_components = config.m_components.min(x_id.shape().1);
        let preprocessor = Preprocessor::fit(x_id, m_components)?;

        let (id_fit, id_val) = split_rows(x_id, config.val_fraction);
        let (ood_fit, ood_val) = split_rows(x_ood, config.val_fraction);
        if id_val.shape().0 == 0 || ood_val.shape().0 == 0 {
            return Err(CoreError::validation(
                "not enough rows to hold out a calibration split",
            ));
        }

        let kde_id = fit_kde(&preprocessor.transform(&id_fit)?, config.folds)?;
        let kde_ood = fit_kde(&preprocessor.transform(&ood_fit)?, config.folds)?;

        let mut model = DetectorModel {
            version: DETECTOR_VERSION.to_string(),
            config,
            preprocessor,
            kde_id,
            kde_ood,
            tau: 0.0,
            id_calibration_scores: Vec::new(),
        };

        let id_scores = model.score_matrix(&id_val)?;
        let ood_scores = model.score_matrix(&ood_val)?;
        let mut scores: Vec<f64> = Vec::with_capacity(id_scores.len() + ood_scores.len());
        let mut labels = Vec::with_capacity(id_scores.len() + ood_scores.len());
        for (l, s) in &id_scores {
            debug_assert!((s + l).abs() < 1e-12);
            scores.push(*s);
            labels.push(false);
        }
        for (_, s) in &ood_scores {
            scores.push(*s);
            labels.push(true);
        }
        model.tau = calibrate_threshold(&scores, &labels)?;
        model.id_calibration_scores = id_scores.iter().map(|&(_, s)| s).collect();
        model
            .id_calibration_scores
            .sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        Ok(model)
    }

    /// Log-density ratio and OOD score for one already-extracted feature
    /// row (19 raw features, not yet preprocessed).
    pub fn ldr_score(&self, features: &[f64]) -> Result<(f64, f64)> {
        let mut row = Mat::zeros(1, features.len());
        row.row_mut(0).copy_from_slice(features);
        let z = self.preprocessor.transform(&row)?;
        let l = self.kde_id.log_density(z.row(0))? - self.kde_ood.log_density(z.row(0))?;
        if !l.is_finite() {
            return Err(CoreError::numerical("log-density ratio is not finite"));
        }
        Ok((l, -l))
    }

    /// (L, S) pairs for every row of a raw feature matrix.
    pub fn score_matrix(&self, x: &Mat) -> Result<Vec<(f64, f64)>> {
        (0..x.shape().0).map(|i| self.ldr_score(x.row(i))).collect()
    }

    pub fn decide(&self, score: f64) -> bool {
        score > self.tau
    }

    /// Percentile of S among the ID calibration scores and the derived
    /// risk band.
    pub fn risk_stratify(&self, score: f64) -> Result<(f64, RiskLevel)> {
        risk_stratify(score, &self.id_calibration_scores, self.config.risk_cutoffs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DetectorModel> {
        let text = std::fs::read_to_string(path)?;
        let model: DetectorModel = serde_json::from_str(&text)?;
        if model.version != DETECTOR_VERSION {
            return Err(CoreError::validation(format!(
                "detector file version {:?}, this build reads {DETECTOR_VERSION:?}",
                model.version
            )));
        }
        Ok(model)
    }
}

/// Threshold maximizing F1 for the positive (OOD, label=true) class over
/// all midpoints between adjacent distinct sorted scores, plus sentinels
/// below and above the score range. Ties in F1 resolve toward the larger
/// threshold (higher specificity).
pub fn calibrate_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoreError::validation("scores and labels differ in length"));
    }
    if !labels.contains(&true) || !labels.contains(&false) {
        return Err(CoreError::validation(
            "threshold calibration needs both classes",
        ));
    }
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    sorted.dedup();
    let mut candidates = Vec::with_capacity(sorted.len() + 1);
    candidates.push(sorted[0] - 1.0);
    for w in sorted.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    candidates.push(sorted[sorted.len() - 1] + 1.0);

    let id: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    let ood: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &tau in &candidates {
        let f1 = confusion(&id, &ood, tau).f1();
        if f1 > best.0 || (f1 == best.0 && tau > best.1) {
            best = (f1, tau);
        }
    }
    Ok(best.1)
}

/// Fraction of calibration scores at or below `score`, banded by the
/// percentile cutoffs.
pub fn risk_stratify(
    score: f64,
    id_calibration_scores: &[f64],
    cutoffs: (f64, f64),
) -> Result<(f64, RiskLevel)> {
    if id_calibration_scores.is_empty() {
        return Err(CoreError::validation("no calibration scores"));
    }
    let below = id_calibration_scores.iter().filter(|&&c| c <= score).count();
    let percentile = below as f64 / id_calibration_scores.len() as f64;
    let level = if percentile >= cutoffs.1 {
        RiskLevel::High
    } else if percentile >= cutoffs.0 {
        RiskLevel::Medium
    } else {
        RiskLevel::Low
    };
    Ok((percentile, level))
}
