//! Variance-exploding noise schedule and EDM preconditioning.
//!
//! The schedule is log-linear, `sigma(t) = sigma_min * (sigma_max/sigma_min)^t`,
//! so `ln sigma` interpolates linearly between the endpoints. Two derived
//! quantities drive everything downstream:
//!
//! * the squared diffusion coefficient `g(t)^2 = 2 sigma(t) sigma'(t)`, the
//!   rate at which the forward marginal variance `sigma(t)^2` grows, and
//! * the probability-flow gain `alpha(t) = g(t)^2 / (2 sigma(t)^2)
//!   = sigma'(t)/sigma(t)`, constant (`ln(sigma_max/sigma_min)`) for the
//!   log-linear schedule.
//!
//! With these, the deterministic flow `f(x,t) = alpha(t) (x_t - x0_hat)`
//! transports the data density to `N(0, sigma_max^2)` along the same
//! marginals as the forward noising process; the Gaussian-oracle tests in
//! `tests/` pin the convention down numerically.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{assemble_state, ComplexGraph, PrototypeTables};

/// Training and integration avoid t=0: below this floor the score scale
/// diverges like 1/sigma^2 while sigma itself is pinned near sigma_min, so
/// the segment [0, eps_t] is treated as the identity.
pub const EPS_T: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
}

impl Schedule {
    pub fn new(sigma_min: f64, sigma_max: f64, sigma_data: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min) {
            return Err(CoreError::validation(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
            )));
        }
        if !(sigma_data > 0.0) {
            return Err(CoreError::validation(format!(
                "sigma_data must be positive, got {sigma_data}"
            )));
        }
        Ok(Schedule { sigma_min, sigma_max, sigma_data })
    }

    /// Data-driven defaults: sigma_max at 10x the median pairwise coordinate
    /// distance of the training set, sigma_data the empirical standard
    /// deviation of assembled joint-state entries.
    pub fn from_data(graphs: &[ComplexGraph], tables: &PrototypeTables) -> Result<Self> {
        if graphs.is_empty() {
            return Err(CoreError::validation("cannot fit a schedule to an empty dataset"));
        }
        let mut dists = Vec::new();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for g in graphs {
            let state = assemble_state(g, tables)?;
            for v in state.coords.data().iter().chain(state.feats.data()) {
                sum += v;
                sum_sq += v * v;
                count += 1;
            }
            let n = g.n_nodes();
            for i in 0..n {
                for j in (i + 1)..n {
                    let d: f64 = (0..3)
                        .map(|c| (g.coords[i][c] - g.coords[j][c]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    dists.push(d);
                }
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = dists[dists.len() / 2];
        let mean = sum / count as f64;
        let var = (sum_sq / count as f64 - mean * mean).max(1e-12);
        Schedule::new(0.01, (10.0 * median).max(1.0), var.sqrt())
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        assert!((0.0..=1.0).contains(&t), "t={t} outside [0,1]");
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    /// d sigma / dt; for the log-linear schedule this is
    /// `sigma(t) * ln(sigma_max/sigma_min)`.
    pub fn sigma_deriv(&self, t: f64) -> f64 {
        self.sigma(t) * self.log_ratio()
    }

    /// Squared diffusion coefficient `g(t)^2 = 2 sigma(t) sigma'(t)`, i.e.
    /// `d sigma^2 / dt`.
    pub fn g2(&self, t: f64) -> f64 {
        2.0 * self.sigma(t) * self.sigma_deriv(t)
    }

    /// Probability-flow gain `g^2 / (2 sigma^2) = sigma'/sigma`; constant
    /// `ln(sigma_max/sigma_min)` here.
    pub fn alpha(&self, t: f64) -> f64 {
        self.sigma_deriv(t) / self.sigma(t)
    }

    /// EDM input/output scales.
    pub fn precondition(&self, t: f64) -> (f64, f64) {
        let s2 = self.sigma(t).powi(2);
        let d2 = self.sigma_data.powi(2);
        let denom = (s2 + d2).sqrt();
        (1.0 / denom, self.sigma(t) * self.sigma_data / denom)
    }

    /// EDM skip coefficient for the coordinate head.
    pub fn c_skip(&self, t: f64) -> f64 {
        let s2 = self.sigma(t).powi(2);
        let d2 = self.sigma_data.powi(2);
        d2 / (s2 + d2)
    }

    /// EDM loss weight `(sigma^2 + sigma_data^2) / (sigma sigma_data)^2`;
    /// equals `1 / c_out^2`.
    pub fn loss_weight(&self, t: f64) -> f64 {
        let s2 = self.sigma(t).powi(2);
        let d2 = self.sigma_data.powi(2);
        (s2 + d2) / (s2 * d2)
    }

    /// Uniform draw on [EPS_T, 1].
    pub fn sample_time(&self, rng: &mut impl Rng) -> f64 {
        rng.gen_range(EPS_T..=1.0)
    }
}
