//! Monotone error envelope over typicality and the Chebyshev tail bound.
//!
//! Calibration pairs (L_i, e_i) relate a sample's negative log-likelihood to
//! an observed downstream error. The envelope is a non-decreasing curve
//! upper-bounding every calibration point; combined with a Chebyshev bound
//! on how far L strays above its typical value, it turns NLL into a
//! high-probability error guarantee: with probability at least
//! 1 - sigma^2/alpha^2, the error stays below phi(L_typ + alpha).

use serde::{Deserialize, Serialize};

use driftwood_core::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MonotoneEnvelope {
    /// a * exp(b * (L - shift)) + c with a >= 0, b >= 0
    Exponential { a: f64, b: f64, c: f64, shift: f64 },
    /// non-decreasing step function through the running-maximum hull,
    /// used when the exponential family cannot fit the data
    Isotonic { xs: Vec<f64>, ys: Vec<f64> },
}

impl MonotoneEnvelope {
    pub fn eval(&self, l: f64) -> f64 {
        match self {
            MonotoneEnvelope::Exponential { a, b, c, shift } => a * (b * (l - shift)).exp() + c,
            MonotoneEnvelope::Isotonic { xs, ys } => {
                let idx = xs.partition_point(|&x| x <= l);
                if idx == 0 {
                    ys[0]
                } else {
                    ys[idx - 1]
                }
            }
        }
    }

    pub fn is_fallback(&self) -> bool {
        matches!(self, MonotoneEnvelope::Isotonic { .. })
    }
}

/// Least-squares fit of a*exp(b L)+c to the running-maximum hull of the
/// calibration points, lifted so the curve upper-bounds every point. Falls
/// back to the isotonic step envelope when the exponential family is
/// degenerate on the data.
pub fn fit_monotone_envelope(l_values: &[f64], errors: &[f64]) -> Result<MonotoneEnvelope> {
    if l_values.len() != errors.len() {
        return Err(CoreError::validation("typicality/error lengths differ"));
    }
    if l_values.len() < 10 {
        return Err(CoreError::validation(format!(
            "envelope needs at least 10 calibration pairs, got {}",
            l_values.len()
        )));
    }
    if l_values.iter().chain(errors).any(|v| !v.is_finite()) {
        return Err(CoreError::validation("calibration pairs must be finite"));
    }

    let mut pairs: Vec<(f64, f64)> = l_values.iter().cloned().zip(errors.iter().cloned()).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite values"));
    let mut hull = Vec::with_capacity(pairs.len());
    let mut run_max = f64::NEG_INFINITY;
    for &(l, e) in &pairs {
        run_max = run_max.max(e);
        hull.push((l, run_max));
    }
    // collapse duplicate L onto the larger hull value
    hull.dedup_by(|next, prev| {
        if next.0 == prev.0 {
            prev.1 = prev.1.max(next.1);
            true
        } else {
            false
        }
    });

    let shift = hull[0].0;
    let range = hull[hull.len() - 1].0 - shift;
    let fallback = || MonotoneEnvelope::Isotonic {
        xs: hull.iter().map(|&(l, _)| l).collect(),
        ys: hull.iter().map(|&(_, e)| e).collect(),
    };
    if range <= 0.0 {
        return Ok(fallback());
    }

    let mut best: Option<(f64, f64, f64, f64)> = None;
    for k in 0..40 {
        let b = 1e-3 / range * (20.0 / 1e-3f64).powf(k as f64 / 39.0);
        // linear least squares for (a, c) against basis {exp(b(L-shift)), 1}
        let mut s_uu = 0.0;
        let mut s_u = 0.0;
        let mut s_ue = 0.0;
        let mut s_e = 0.0;
        let n = hull.len() as f64;
        for &(l, e) in &hull {
            let u = (b * (l - shift)).exp();
            s_uu += u * u;
            s_u += u;
            s_ue += u * e;
            s_e += e;
        }
        let det = s_uu * n - s_u * s_u;
        if !det.is_finite() || det.abs() < 1e-12 {
            continue;
        }
        let a = (s_ue * n - s_u * s_e) / det;
        let c = (s_uu * s_e - s_u * s_ue) / det;
        if !(a.is_finite() && c.is_finite()) || a < 0.0 {
            continue;
        }
        let sse: f64 = hull
            .iter()
            .map(|&(l, e)| (a * (b * (l - shift)).exp() + c - e).powi(2))
            .sum();
        if !sse.is_finite() {
            continue;
        }
        if best.map_or(true, |(s, ..)| sse < s) {
            best = Some((sse, a, b, c));
        }
    }

    match best {
        Some((_, a, b, c)) => {
            let lift = hull
                .iter()
                .map(|&(l, e)| e - (a * (b * (l - shift)).exp() + c))
                .fold(f64::NEG_INFINITY, f64::max)
                .max(0.0);
            Ok(MonotoneEnvelope::Exponential { a, b, c: c + lift, shift })
        }
        None => Ok(fallback()),
    }
}

/// P(L > L_typ + alpha) <= min(1, sigma^2/alpha^2) for any distribution
/// with variance sigma^2.
pub fn chebyshev_bound(sigma2: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(CoreError::validation(format!("alpha must be positive, got {alpha}")));
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(CoreError::validation(format!("variance must be non-negative, got {sigma2}")));
    }
    Ok((sigma2 / (alpha * alpha)).min(1.0))
}
