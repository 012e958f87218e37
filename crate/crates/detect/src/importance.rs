//! Feature importance as effect size plus bootstrap stability.
//!
//! Each feature gets Cohen's d between the ID and OOD rows and a stability
//! term 1/(1 + std of d across bootstrap resamples). Both are z-scored
//! across features and summed, so the ranking balances how far a feature
//! separates the classes against how reproducible that separation is.
//! Resample index sets are shared across features; duplicated columns
//! therefore receive bit-identical scores.

use rand::Rng;
use serde::{Deserialize, Serialize};

use driftwood_core::rng::stream_indexed;
use driftwood_core::{CoreError, Mat, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: usize,
    pub effect_size: f64,
    pub stability: f64,
    pub combined: f64,
}

fn column_mean_var(x: &Mat, rows: &[usize], j: usize) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|&i| x.at(i, j)).sum::<f64>() / n;
    let var = rows.iter().map(|&i| (x.at(i, j) - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn cohens_d(x_id: &Mat, id_rows: &[usize], x_ood: &Mat, ood_rows: &[usize], j: usize) -> f64 {
    let (m1, v1) = column_mean_var(x_id, id_rows, j);
    let (m2, v2) = column_mean_var(x_ood, ood_rows, j);
    let n1 = id_rows.len() as f64;
    let n2 = ood_rows.len() as f64;
    let pooled = (((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / (n1 + n2 - 2.0)).sqrt();
    if pooled < 1e-12 {
        0.0
    } else {
        (m2 - m1) / pooled
    }
}

fn zscores(vals: &[f64]) -> Vec<f64> {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-12 {
        vec![0.0; vals.len()]
    } else {
        vals.iter().map(|v| (v - mean) / std).collect()
    }
}

/// Ranked features, most important first. Ties resolve by feature index so
/// the ordering is deterministic.
pub fn feature_importance(
    x_id: &Mat,
    x_ood: &Mat,
    resamples: usize,
    seed: u64,
) -> Result<Vec<FeatureImportance>> {
    let (n_id, d) = x_id.shape();
    let (n_ood, d_ood) = x_ood.shape();
    if d != d_ood {
        return Err(CoreError::validation(format!(
            "feature dimensions differ: {d} vs {d_ood}"
        )));
    }
    if n_id < 10 || n_ood < 10 {
        return Err(CoreError::validation(format!(
            "importance needs at least 10 rows per class, got {n_id} ID and {n_ood} OOD"
        )));
    }
    if resamples < 2 {
        return Err(CoreError::validation("importance needs at least 2 resamples"));
    }

    let all_id: Vec<usize> = (0..n_id).collect();
    let all_ood: Vec<usize> = (0..n_ood).collect();
    let base_d: Vec<f64> = (0..d).map(|j| cohens_d(x_id, &all_id, x_ood, &all_ood, j)).collect();

    // one index set per resample, shared by every feature
    let mut d_samples = vec![Vec::with_capacity(resamples); d];
    for b in 0..resamples {
        let mut rng = stream_indexed(seed, "importance", b as u64);
        let id_rows: Vec<usize> = (0..n_id).map(|_| rng.gen_range(0..n_id)).collect();
        let ood_rows: Vec<usize> = (0..n_ood).map(|_| rng.gen_range(0..n_ood)).collect();
        for (j, samples) in d_samples.iter_mut().enumerate() {
            samples.push(cohens_d(x_id, &id_rows, x_ood, &ood_rows, j));
        }
    }

    let effect: Vec<f64> = base_d.iter().map(|v| v.abs()).collect();
    let stability: Vec<f64> = d_samples
        .iter()
        .map(|samples| {
            let n = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let std = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            1.0 / (1.0 + std)
        })
        .collect();

    let z_effect = zscores(&effect);
    let z_stability = zscores(&stability);
    let mut out: Vec<FeatureImportance> = (0..d)
        .map(|j| FeatureImportance {
            feature: j,
            effect_size: effect[j],
            stability: stability[j],
            combined: z_effect[j] + z_stability[j],
        })
        .collect();
    out.sort_by(|a, b| {
        b.combined
            .partial_cmp(&a.combined)
            .expect("finite scores")
            .then(a.feature.cmp(&b.feature))
    });
    Ok(out)
}
