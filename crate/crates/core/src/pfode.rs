//! Probability-flow ODE log-likelihood.
//!
//! The deterministic flow f(x,t) = alpha(t) (x_t - x0_hat(x_t, t)) shares its
//! marginals with the forward noising process, so the instantaneous
//! change-of-variables identity turns the data log-density into a terminal
//! Gaussian term plus the time integral of the drift divergence:
//!
//! ```text
//! log p_0(x) = log p_1(x(1)) + int_eps^1 div f(x(t), t) dt
//! ```
//!
//! The state integrates 0 -> 1 with Heun predictor-corrector steps and the
//! divergence integral accumulates trapezoid terms from Hutchinson estimates
//! at the grid points, so both the state and the integral are second-order in
//! the step size. Everything runs in the COM-free coordinate subspace: probes
//! and drifts are projected, and the terminal density counts 3n-3 coordinate
//! degrees of freedom plus n*d feature ones.
//!
//! Integration starts at t = `EPS_T` instead of 0; below that the drift scale
//! is pinned near sigma_min and the segment is treated as the identity map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::denoiser::{build_forward, DenoiserParams};
use crate::error::{CoreError, Result};
use crate::graph::{
    assemble_state, com_project, ComplexGraph, JointState, NodeClass, PrototypeTables,
};
use crate::mat::Mat;
use crate::schedule::{Schedule, EPS_T};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    /// Independent +-1 entries; lower-variance default.
    #[default]
    Rademacher,
    /// Standard normal entries.
    Gaussian,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DivergenceMethod {
    /// Vector-Jacobian products through reverse-mode differentiation.
    #[default]
    Vjp,
    /// Central directional differences of the drift; cross-check path.
    #[serde(rename = "fd")]
    FiniteDifference { step: f64 },
    /// Trace summed over an orthonormal basis of the COM-free subspace.
    /// Debug mode, restricted to small states.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodOptions {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default)]
    pub probe_kind: ProbeKind,
    #[serde(default)]
    pub method: DivergenceMethod,
}

fn default_steps() -> usize {
    128
}

fn default_probes() -> usize {
    4
}

impl Default for LikelihoodOptions {
    fn default() -> Self {
        LikelihoodOptions {
            steps: default_steps(),
            probes: default_probes(),
            probe_kind: ProbeKind::default(),
            method: DivergenceMethod::default(),
        }
    }
}

impl LikelihoodOptions {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(CoreError::validation("likelihood needs at least 2 grid steps"));
        }
        match self.method {
            DivergenceMethod::Exact => {}
            _ if self.probes == 0 => {
                return Err(CoreError::validation("stochastic divergence needs probes >= 1"));
            }
            DivergenceMethod::FiniteDifference { step } if step <= 0.0 => {
                return Err(CoreError::validation("finite-difference step must be positive"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// A model exposing the denoised-state estimate and its input VJPs.
///
/// `state.t` carries the time argument. Implementations must evaluate the
/// value and all cotangent pullbacks from one forward pass where they can.
pub trait DenoisingModel {
    fn n_nodes(&self) -> usize;
    fn feat_dim(&self) -> usize;
    fn x0_hat(&self, state: &JointState) -> Result<JointState> {
        Ok(self.x0_hat_with_vjps(state, &[])?.0)
    }
    /// Returns x0_hat and, for each cotangent u, the row vector u^T J where J
    /// is the Jacobian of x0_hat with respect to the state.
    fn x0_hat_with_vjps(
        &self,
        state: &JointState,
        cots: &[JointState],
    ) -> Result<(JointState, Vec<JointState>)>;
}

/// The trained denoiser bound to one graph's classes.
pub struct EgnnModel<'a> {
    pub params: &'a DenoiserParams,
    pub tables: &'a PrototypeTables,
    pub classes: &'a [NodeClass],
    pub schedule: &'a Schedule,
}

impl DenoisingModel for EgnnModel<'_> {
    fn n_nodes(&self) -> usize {
        self.classes.len()
    }

    fn feat_dim(&self) -> usize {
        self.params.feat_dim
    }

    fn x0_hat_with_vjps(
        &self,
        state: &JointState,
        cots: &[JointState],
    ) -> Result<(JointState, Vec<JointState>)> {
        let mut tape = Tape::new();
        let fwd = build_forward(
            &mut tape,
            &state.coords,
            &state.feats,
            self.classes,
            state.t,
            self.params,
            self.tables,
            self.schedule,
        )?;
        let value = JointState {
            coords: tape.value(fwd.coord_hat).clone(),
            feats: tape.value(fwd.x0_feats).clone(),
            t: state.t,
        };
        let n = state.n_nodes();
        let d = state.feat_dim();
        let mut pullbacks = Vec::with_capacity(cots.len());
        for cot in cots {
            let mut seed = Mat::zeros(n, 3 + d);
            for r in 0..n {
                seed.row_mut(r)[..3].copy_from_slice(cot.coords.row(r));
                seed.row_mut(r)[3..].copy_from_slice(cot.feats.row(r));
            }
            let grads = tape.backward(fwd.x0_full, seed);
            pullbacks.push(JointState {
                coords: grads.get_or_zeros(fwd.coords_in, &state.coords),
                feats: grads.get_or_zeros(fwd.feats_in, &state.feats),
                t: state.t,
            });
        }
        Ok((value, pullbacks))
    }
}

/// Analytic reference model: data drawn as N(0, s^2 I) in the COM-free
/// subspace. The conditional mean under the forward noising is the linear
/// shrinkage x * s^2 / (s^2 + sigma(t)^2), so every quantity downstream has a
/// closed form to test against.
pub struct IsotropicGaussianModel<'a> {
    pub n_nodes: usize,
    pub feat_dim: usize,
    pub s2: f64,
    pub schedule: &'a Schedule,
}

impl IsotropicGaussianModel<'_> {
    fn shrink(&self, t: f64) -> f64 {
        let sig = self.schedule.sigma(t);
        self.s2 / (self.s2 + sig * sig)
    }

    /// Closed-form log-density of N(0, (s^2 + sigma_extra^2) I) over the
    /// COM-free subspace, evaluated at the given state.
    pub fn log_density(&self, state: &JointState, sigma_extra: f64) -> f64 {
        let var = self.s2 + sigma_extra * sigma_extra;
        let dof = (3 * self.n_nodes - 3 + self.n_nodes * self.feat_dim) as f64;
        let sq = state.coords.frobenius_norm().powi(2) + state.feats.frobenius_norm().powi(2);
        -sq / (2.0 * var) - 0.5 * dof * (2.0 * std::f64::consts::PI * var).ln()
    }
}

impl DenoisingModel for IsotropicGaussianModel<'_> {
    fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    fn x0_hat_with_vjps(
        &self,
        state: &JointState,
        cots: &[JointState],
    ) -> Result<(JointState, Vec<JointState>)> {
        let gamma = self.shrink(state.t);
        let value = JointState {
            coords: state.coords.scaled(gamma),
            feats: state.feats.scaled(gamma),
            t: state.t,
        };
        let pullbacks = cots.iter().map(|c| c.scaled(gamma)).collect();
        Ok((value, pullbacks))
    }
}

/// A time-dependent vector field over joint states with reverse-mode
/// pullbacks, the interface the divergence estimators work against.
pub trait DriftField {
    fn n_nodes(&self) -> usize;
    fn feat_dim(&self) -> usize;
    fn drift(&self, state: &JointState) -> Result<JointState> {
        Ok(self.drift_with_vjps(state, &[])?.0)
    }
    fn drift_with_vjps(
        &self,
        state: &JointState,
        cots: &[JointState],
    ) -> Result<(JointState, Vec<JointState>)>;
}

/// PF-ODE drift of a denoising model: alpha(t) (x - x0_hat), coordinate block
/// kept COM-free on both the value and the pullback side.
pub struct PfDrift<'a> {
    pub model: &'a dyn DenoisingModel,
    pub schedule: &'a Schedule,
}

impl DriftField for PfDrift<'_> {
    fn n_nodes(&self) -> usize {
        self.model.n_nodes()
    }

    fn feat_dim(&self) -> usize {
        self.model.feat_dim()
    }

    fn drift_with_vjps(
        &self,
        state: &JointState,
        cots: &[JointState],
    ) -> Result<(JointState, Vec<JointState>)> {
        let alpha = self.schedule.alpha(state.t);
        let projected: Vec<JointState> = cots
            .iter()
            .map(|c| JointState {
                coords: com_project(&c.coords),
                feats: c.feats.clone(),
                t: c.t,
            })
            .collect();
        let (x0, pulls) = self.model.x0_hat_with_vjps(state, &projected)?;
        if !x0.is_finite() {
            return Err(CoreError::numerical(format!(
                "denoised estimate non-finite at t={}",
                state.t
            )));
        }
        let drift = JointState {
            coords: com_project(&state.coords.subbed(&x0.coords)).scaled(alpha),
            feats: state.feats.subbed(&x0.feats).scaled(alpha),
            t: state.t,
        };
        let vjps = projected
            .iter()
            .zip(pulls)
            .map(|(c, pull)| JointState {
                coords: c.coords.subbed(&pull.coords).scaled(alpha),
                feats: c.feats.subbed(&pull.feats).scaled(alpha),
                t: state.t,
            })
            .collect();
        Ok((drift, vjps))
    }
}

/// PF-ODE drift of the trained denoiser at one state.
pub fn pf_drift(
    state: &JointState,
    params: &DenoiserParams,
    tables: &PrototypeTables,
    classes: &[NodeClass],
    schedule: &Schedule,
) -> Result<JointState> {
    let model = EgnnModel { params, tables, classes, schedule };
    PfDrift { model: &model, schedule }.drift(state)
}

/// Random probes with COM-projected coordinate blocks.
pub fn draw_probes(
    n: usize,
    d: usize,
    m: usize,
    kind: ProbeKind,
    t: f64,
    rng: &mut impl Rng,
) -> Vec<JointState> {
    (0..m)
        .map(|_| {
            let mut coords = Mat::zeros(n, 3);
            let mut feats = Mat::zeros(n, d);
            match kind {
                ProbeKind::Rademacher => {
                    for v in coords.data_mut().iter_mut() {
                        *v = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    }
                    for v in feats.data_mut().iter_mut() {
                        *v = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    }
                }
                ProbeKind::Gaussian => {
                    for v in coords.data_mut().iter_mut() {
                        *v = rng.sample(rand_distr::StandardNormal);
                    }
                    for v in feats.data_mut().iter_mut() {
                        *v = rng.sample(rand_distr::StandardNormal);
                    }
                }
            }
            JointState { coords: com_project(&coords), feats, t }
        })
        .collect()
}

/// Orthonormal basis of the COM-free subspace: Helmert contrasts per
/// coordinate axis followed by feature unit vectors.
fn subspace_basis(n: usize, d: usize, t: f64) -> Vec<JointState> {
    let mut basis = Vec::with_capacity(3 * (n - 1) + n * d);
    for k in 1..n {
        let scale = 1.0 / ((k * (k + 1)) as f64).sqrt();
        for axis in 0..3 {
            let mut coords = Mat::zeros(n, 3);
            for i in 0..k {
                coords.set(i, axis, scale);
            }
            coords.set(k, axis, -(k as f64) * scale);
            basis.push(JointState { coords, feats: Mat::zeros(n, d), t });
        }
    }
    for i in 0..n {
        for j in 0..d {
            let mut feats = Mat::zeros(n, d);
            feats.set(i, j, 1.0);
            basis.push(JointState { coords: Mat::zeros(n, 3), feats, t });
        }
    }
    basis
}

fn quadratic_forms_vjp(
    field: &dyn DriftField,
    state: &JointState,
    probes: &[JointState],
) -> Result<(JointState, Vec<f64>)> {
    let (drift, vjps) = field.drift_with_vjps(state, probes)?;
    let forms = probes.iter().zip(&vjps).map(|(p, v)| v.dot(p)).collect();
    Ok((drift, forms))
}

fn quadratic_forms_fd(
    field: &dyn DriftField,
    state: &JointState,
    probes: &[JointState],
    step: f64,
) -> Result<(JointState, Vec<f64>)> {
    let drift = field.drift(state)?;
    let mut forms = Vec::with_capacity(probes.len());
    for probe in probes {
        let plus = field.drift(&state.added_scaled(probe, step))?;
        let minus = field.drift(&state.added_scaled(probe, -step))?;
        let diff = JointState {
            coords: plus.coords.subbed(&minus.coords),
            feats: plus.feats.subbed(&minus.feats),
            t: state.t,
        };
        forms.push(diff.dot(probe) / (2.0 * step));
    }
    Ok((drift, forms))
}

/// Drift and divergence estimate at one state, sharing the forward pass when
/// the method allows it.
pub fn drift_and_divergence(
    field: &dyn DriftField,
    state: &JointState,
    opts: &LikelihoodOptions,
    rng: &mut impl Rng,
) -> Result<(JointState, f64)> {
    let n = field.n_nodes();
    let d = field.feat_dim();
    match opts.method {
        DivergenceMethod::Vjp => {
            let probes = draw_probes(n, d, opts.probes, opts.probe_kind, state.t, rng);
            let (drift, forms) = quadratic_forms_vjp(field, state, &probes)?;
            Ok((drift, forms.iter().sum::<f64>() / forms.len() as f64))
        }
        DivergenceMethod::FiniteDifference { step } => {
            let probes = draw_probes(n, d, opts.probes, opts.probe_kind, state.t, rng);
            let (drift, forms) = quadratic_forms_fd(field, state, &probes, step)?;
            Ok((drift, forms.iter().sum::<f64>() / forms.len() as f64))
        }
        DivergenceMethod::Exact => {
            let dim = n * (3 + d);
            if dim > 64 {
                return Err(CoreError::validation(format!(
                    "exact divergence is a debug mode for states up to 64 entries, got {dim}"
                )));
            }
            let basis = subspace_basis(n, d, state.t);
            let (drift, forms) = quadratic_forms_vjp(field, state, &basis)?;
            Ok((drift, forms.iter().sum()))
        }
    }
}

/// Monte Carlo divergence of a drift field restricted to the COM-free
/// subspace: (1/m) sum_j e_j^T (df/dx) e_j with projected probes.
pub fn hutchinson_divergence(
    field: &dyn DriftField,
    state: &JointState,
    probes: usize,
    kind: ProbeKind,
    rng: &mut impl Rng,
) -> Result<f64> {
    if probes == 0 {
        return Err(CoreError::validation("needs at least one probe"));
    }
    let opts = LikelihoodOptions {
        probes,
        probe_kind: kind,
        method: DivergenceMethod::Vjp,
        ..LikelihoodOptions::default()
    };
    Ok(drift_and_divergence(field, state, &opts, rng)?.1)
}

/// Terminal Gaussian log-density N(0, sigma(1)^2 I) with the COM correction:
/// 3n-3 coordinate degrees of freedom plus n*d feature ones.
pub fn terminal_log_density(state: &JointState, schedule: &Schedule) -> f64 {
    let n = state.n_nodes();
    let d = state.feat_dim();
    let var = schedule.sigma(1.0).powi(2);
    let log_norm = (2.0 * std::f64::consts::PI * var).ln();
    let coord_dof = (3 * n - 3) as f64;
    let feat_dof = (n * d) as f64;
    let coord_sq = state.coords.frobenius_norm().powi(2);
    let feat_sq = state.feats.frobenius_norm().powi(2);
    -coord_sq / (2.0 * var) - 0.5 * coord_dof * log_norm - feat_sq / (2.0 * var)
        - 0.5 * feat_dof * log_norm
}

/// One likelihood integration, everything needed to audit or featurize it.
///
/// The grid covers [EPS_T, 1]; the segment [0, EPS_T] is the identity map.
/// `drifts[k]` is the drift at `states[k]`; `predictor_drifts[k]` is the
/// drift at the Euler predictor for step k, so replaying
/// `x + dt/2 (drifts[k] + predictor_drifts[k])` reproduces the trajectory
/// exactly. `div_estimates[k]` is the trapezoid average of the divergence at
/// the two grid ends of step k, and `com_drifts[k]` records the norm of the
/// coordinate column means before re-projection (numerical drift off the
/// subspace, not a model quantity).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub states: Vec<JointState>,
    pub drifts: Vec<JointState>,
    pub predictor_drifts: Vec<JointState>,
    pub div_estimates: Vec<f64>,
    pub com_drifts: Vec<f64>,
    pub loglik: f64,
    pub n_probes: usize,
}

impl TrajectoryRecord {
    /// Replay the stored Heun updates from states[0]; returns the maximum
    /// entrywise deviation from the stored trajectory.
    pub fn replay_error(&self) -> f64 {
        let mut x = self.states[0].clone();
        let mut worst: f64 = 0.0;
        for k in 0..self.div_estimates.len() {
            let dt = self.times[k + 1] - self.times[k];
            let mut next = x.clone();
            next.add_scaled_assign(&self.drifts[k], 0.5 * dt);
            next.add_scaled_assign(&self.predictor_drifts[k], 0.5 * dt);
            crate::graph::com_project_in_place(&mut next.coords);
            next.t = self.times[k + 1];
            let stored = &self.states[k + 1];
            for (a, b) in next
                .coords
                .data()
                .iter()
                .chain(next.feats.data())
                .zip(stored.coords.data().iter().chain(stored.feats.data()))
            {
                worst = worst.max((a - b).abs());
            }
            x = next;
        }
        worst
    }
}

/// Integrate the PF-ODE for a model, starting from a clean COM-free state.
pub fn log_likelihood_model(
    model: &dyn DenoisingModel,
    state0: &JointState,
    schedule: &Schedule,
    opts: &LikelihoodOptions,
    rng: &mut impl Rng,
) -> Result<TrajectoryRecord> {
    opts.validate()?;
    if !state0.is_finite() {
        return Err(CoreError::validation("initial state is not finite"));
    }
    let field = PfDrift { model, schedule };
    let t_grid: Vec<f64> = (0..=opts.steps)
        .map(|k| EPS_T + (1.0 - EPS_T) * k as f64 / opts.steps as f64)
        .collect();

    let mut state = JointState {
        coords: com_project(&state0.coords),
        feats: state0.feats.clone(),
        t: t_grid[0],
    };

    let mut states = Vec::with_capacity(opts.steps + 1);
    let mut drifts = Vec::with_capacity(opts.steps + 1);
    let mut predictor_drifts = Vec::with_capacity(opts.steps);
    let mut div_estimates = Vec::with_capacity(opts.steps);
    let mut com_drifts = Vec::with_capacity(opts.steps);
    let mut div_integral = 0.0;

    let (drift0, div0) = drift_and_divergence(&field, &state, opts, rng)?;
    if !div0.is_finite() {
        return Err(CoreError::numerical(
            "divergence estimate non-finite at step 0".to_string(),
        ));
    }
    states.push(state.clone());
    drifts.push(drift0);
    let mut div_here = div0;

    for k in 0..opts.steps {
        let dt = t_grid[k + 1] - t_grid[k];

        let mut predictor = state.clone();
        predictor.add_scaled_assign(&drifts[k], dt);
        predictor.t = t_grid[k + 1];
        let drift_pred = field.drift(&predictor)?;

        let mut next = state.clone();
        next.add_scaled_assign(&drifts[k], 0.5 * dt);
        next.add_scaled_assign(&drift_pred, 0.5 * dt);
        next.t = t_grid[k + 1];

        let com: f64 = next
            .coords
            .col_means()
            .iter()
            .map(|m| m * m)
            .sum::<f64>()
            .sqrt();
        com_drifts.push(com);
        crate::graph::com_project_in_place(&mut next.coords);

        if !next.is_finite() {
            return Err(CoreError::numerical(format!(
                "state non-finite after step {k} (t={:.4})",
                t_grid[k + 1]
            )));
        }

        let (drift_next, div_next) = drift_and_divergence(&field, &next, opts, rng)?;
        if !div_next.is_finite() {
            return Err(CoreError::numerical(format!(
                "divergence estimate non-finite at step {}",
                k + 1
            )));
        }

        let div_step = 0.5 * (div_here + div_next);
        div_estimates.push(div_step);
        div_integral += div_step * dt;

        predictor_drifts.push(drift_pred);
        drifts.push(drift_next);
        states.push(next.clone());
        state = next;
        div_here = div_next;
    }

    let loglik = terminal_log_density(&state, schedule) + div_integral;
    if !loglik.is_finite() {
        return Err(CoreError::numerical("log-likelihood is not finite".to_string()));
    }
    Ok(TrajectoryRecord {
        times: t_grid,
        states,
        drifts,
        predictor_drifts,
        div_estimates,
        com_drifts,
        loglik,
        n_probes: match opts.method {
            DivergenceMethod::Exact => 0,
            _ => opts.probes,
        },
    })
}

/// Per-graph log-likelihood under the trained denoiser.
pub fn log_likelihood(
    graph: &ComplexGraph,
    params: &DenoiserParams,
    tables: &PrototypeTables,
    schedule: &Schedule,
    opts: &LikelihoodOptions,
    rng: &mut impl Rng,
) -> Result<TrajectoryRecord> {
    graph.validate_against(tables)?;
    let state0 = assemble_state(graph, tables)?;
    let model = EgnnModel {
        params,
        tables,
        classes: &graph.classes,
        schedule,
    };
    log_likelihood_model(&model, &state0, schedule, opts, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, TemperatureMode};
    use crate::rng::{stream, stream_indexed};
    use crate::testutil::{gaussian_mat, toy_graphs, toy_tables};
    use approx::assert_relative_eq;

    /// Feature-block linear field: drift feats = feats @ A^T, zero on coords.
    struct LinearFeatField {
        n: usize,
        a: Mat,
    }

    impl DriftField for LinearFeatField {
        fn n_nodes(&self) -> usize {
            self.n
        }
        fn feat_dim(&self) -> usize {
            self.a.rows()
        }
        fn drift_with_vjps(
            &self,
            state: &JointState,
            cots: &[JointState],
        ) -> Result<(JointState, Vec<JointState>)> {
            let drift = JointState {
                coords: Mat::zeros(self.n, 3),
                feats: state.feats.matmul_nt(&self.a),
                t: state.t,
            };
            let vjps = cots
                .iter()
                .map(|c| JointState {
                    coords: Mat::zeros(self.n, 3),
                    feats: c.feats.matmul(&self.a),
                    t: c.t,
                })
                .collect();
            Ok((drift, vjps))
        }
    }

    fn com_free_state(n: usize, d: usize, t: f64, rng: &mut impl rand::Rng) -> JointState {
        JointState {
            coords: com_project(&gaussian_mat(n, 3, rng)),
            feats: gaussian_mat(n, d, rng),
            t,
        }
    }

    #[test]
    fn drift_zero_when_estimate_matches_state() {
        struct IdentityModel {
            n: usize,
            d: usize,
        }
        impl DenoisingModel for IdentityModel {
            fn n_nodes(&self) -> usize {
                self.n
            }
            fn feat_dim(&self) -> usize {
                self.d
            }
            fn x0_hat_with_vjps(
                &self,
                state: &JointState,
                cots: &[JointState],
            ) -> Result<(JointState, Vec<JointState>)> {
                Ok((state.clone(), cots.to_vec()))
            }
        }
        let schedule = Schedule::new(0.01, 10.0, 1.0).unwrap();
        let mut rng = stream(1, "drift-zero");
        let state = com_free_state(4, 2, 0.5, &mut rng);
        let model = IdentityModel { n: 4, d: 2 };
        let drift = PfDrift { model: &model, schedule: &schedule }
            .drift(&state)
            .unwrap();
        assert!(drift.norm() < 1e-14);
    }

    #[test]
    fn drift_unit_offset_with_unit_gain() {
        // sigma_max/sigma_min = e makes alpha = 1
        struct OffsetModel {
            n: usize,
            d: usize,
        }
        impl DenoisingModel for OffsetModel {
            fn n_nodes(&self) -> usize {
                self.n
            }
            fn feat_dim(&self) -> usize {
                self.d
            }
            fn x0_hat_with_vjps(
                &self,
                state: &JointState,
                cots: &[JointState],
            ) -> Result<(JointState, Vec<JointState>)> {
                let mut value = state.clone();
                value.feats.set(0, 0, value.feats.at(0, 0) - 1.0);
                Ok((value, cots.to_vec()))
            }
        }
        let schedule = Schedule::new(0.1, 0.1 * std::f64::consts::E, 1.0).unwrap();
        assert_relative_eq!(schedule.alpha(0.5), 1.0, epsilon = 1e-12);
        let mut rng = stream(2, "drift-unit");
        let state = com_free_state(3, 2, 0.5, &mut rng);
        let model = OffsetModel { n: 3, d: 2 };
        let drift = PfDrift { model: &model, schedule: &schedule }
            .drift(&state)
            .unwrap();
        assert_relative_eq!(drift.feats.at(0, 0), 1.0, epsilon = 1e-12);
        let rest =
            drift.norm().powi(2) - drift.feats.at(0, 0).powi(2);
        assert!(rest.abs() < 1e-20);
    }

    #[test]
    fn oracle_drift_matches_score_form() {
        // alpha (x - x0_hat) must equal -g^2/2 * score for the analytic model
        let schedule = Schedule::new(0.01, 10.0, 1.0).unwrap();
        let mut rng = stream(3, "drift-score");
        let s2 = 1.3;
        let model = IsotropicGaussianModel {
            n_nodes: 5,
            feat_dim: 3,
            s2,
            schedule: &schedule,
        };
        for &t in &[0.2, 0.5, 0.9] {
            let state = com_free_state(5, 3, t, &mut rng);
            let drift = PfDrift { model: &model, schedule: &schedule }
                .drift(&state)
                .unwrap();
            let sig = schedule.sigma(t);
            let score_scale = -1.0 / (s2 + sig * sig);
            let expect_scale = -0.5 * schedule.g2(t) * score_scale;
            for (got, x) in drift
                .coords
                .data()
                .iter()
                .chain(drift.feats.data())
                .zip(state.coords.data().iter().chain(state.feats.data()))
            {
                assert_relative_eq!(*got, expect_scale * x, max_relative = 1e-10, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rademacher_single_probe_is_exact_on_diagonal_feature_field() {
        let field = LinearFeatField {
            n: 1,
            a: Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]),
        };
        let mut rng = stream(4, "diag");
        let state = JointState {
            coords: Mat::zeros(1, 3),
            feats: gaussian_mat(1, 2, &mut rng),
            t: 0.5,
        };
        for _ in 0..20 {
            let est =
                hutchinson_divergence(&field, &state, 1, ProbeKind::Rademacher, &mut rng).unwrap();
            assert_relative_eq!(est, 5.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn hutchinson_mean_matches_trace_of_dense_field() {
        let mut rng = stream(5, "dense");
        let a = gaussian_mat(10, 10, &mut rng);
        let trace: f64 = (0..10).map(|i| a.at(i, i)).sum();
        let field = LinearFeatField { n: 1, a };
        let state = JointState {
            coords: Mat::zeros(1, 3),
            feats: gaussian_mat(1, 10, &mut rng),
            t: 0.5,
        };
        let m = 2000;
        let mut samples = Vec::with_capacity(m);
        for _ in 0..m {
            samples.push(
                hutchinson_divergence(&field, &state, 1, ProbeKind::Rademacher, &mut rng).unwrap(),
            );
        }
        let mean: f64 = samples.iter().sum::<f64>() / m as f64;
        let var: f64 =
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0);
        let se = (var / m as f64).sqrt();
        assert!(
            (mean - trace).abs() < 3.0 * se.max(1e-9),
            "mean {mean} trace {trace} se {se}"
        );
    }

    #[test]
    fn vjp_and_finite_difference_forms_agree() {
        let mut rng = stream(6, "fd");
        let a = gaussian_mat(6, 6, &mut rng);
        let field = LinearFeatField { n: 2, a };
        let state = com_free_state(2, 6, 0.5, &mut rng);
        let probes = draw_probes(2, 6, 8, ProbeKind::Rademacher, 0.5, &mut rng);
        let (_, vjp_forms) = quadratic_forms_vjp(&field, &state, &probes).unwrap();
        let (_, fd_forms) = quadratic_forms_fd(&field, &state, &probes, 1e-4).unwrap();
        for (a, b) in vjp_forms.iter().zip(&fd_forms) {
            assert_relative_eq!(a, b, max_relative = 1e-6, epsilon = 1e-6);
        }
    }

    #[test]
    fn exact_divergence_matches_projected_trace() {
        // restricted trace of the linear feature field is just trace(A) per
        // node; coordinate block contributes nothing
        let mut rng = stream(7, "exact");
        let a = gaussian_mat(4, 4, &mut rng);
        let trace: f64 = (0..4).map(|i| a.at(i, i)).sum();
        let field = LinearFeatField { n: 3, a };
        let state = com_free_state(3, 4, 0.5, &mut rng);
        let opts = LikelihoodOptions {
            method: DivergenceMethod::Exact,
            ..LikelihoodOptions::default()
        };
        let (_, div) = drift_and_divergence(&field, &state, &opts, &mut rng).unwrap();
        assert_relative_eq!(div, 3.0 * trace, max_relative = 1e-10);
    }

    #[test]
    fn terminal_density_examples() {
        let schedule = Schedule::new(0.01, 1.0, 1.0).unwrap();
        assert_relative_eq!(schedule.sigma(1.0), 1.0, epsilon = 1e-12);
        let state = JointState {
            coords: Mat::zeros(2, 3),
            feats: Mat::zeros(2, 0),
            t: 1.0,
        };
        let expect = -1.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(terminal_log_density(&state, &schedule), expect, epsilon = 1e-10);
        assert_relative_eq!(expect, -2.7568155996140185, epsilon = 1e-12);

        // doubling sigma(1) with zero state shifts by -(3n-3+nd) ln 2
        let sched2 = Schedule::new(0.01, 2.0, 1.0).unwrap();
        let state2 = JointState {
            coords: Mat::zeros(4, 3),
            feats: Mat::zeros(4, 2),
            t: 1.0,
        };
        let base = terminal_log_density(&state2, &schedule);
        let doubled = terminal_log_density(&state2, &sched2);
        let dof = (3 * 4 - 3 + 4 * 2) as f64;
        assert_relative_eq!(doubled - base, -dof * 2f64.ln(), epsilon = 1e-10);
    }

    #[test]
    fn terminal_density_normalizes_over_subspace() {
        // importance-sample the COM-free subspace for n=2, d=1 (5 dims) with
        // a wider Gaussian proposal; the integral of exp(log p) must be 1
        let schedule = Schedule::new(0.01, 1.5, 1.0).unwrap();
        let sigma = schedule.sigma(1.0);
        let tau = 1.3 * sigma;
        let mut rng = stream(8, "normalize");
        let draws = 1_000_000;
        let mut total = 0.0;
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        for _ in 0..draws {
            let z: Vec<f64> = (0..5)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * tau)
                .collect();
            // z[0..3] are coefficients on the orthonormal coordinate basis
            // ((e_i, -e_i)/sqrt(2)), z[3..5] are the raw feature entries
            let mut coords = Mat::zeros(2, 3);
            for axis in 0..3 {
                coords.set(0, axis, z[axis] * inv_sqrt2);
                coords.set(1, axis, -z[axis] * inv_sqrt2);
            }
            let feats = Mat::from_rows(&[vec![z[3]], vec![z[4]]]);
            let state = JointState { coords, feats, t: 1.0 };
            let logp = terminal_log_density(&state, &schedule);
            let logq: f64 = z
                .iter()
                .map(|v| {
                    -v * v / (2.0 * tau * tau) - 0.5 * (2.0 * std::f64::consts::PI * tau * tau).ln()
                })
                .sum();
            total += (logp - logq).exp();
        }
        let integral = total / draws as f64;
        assert!((integral - 1.0).abs() < 0.05, "integral {integral}");
    }

    #[test]
    fn oracle_likelihood_close_to_closed_form() {
        let schedule = Schedule::new(0.01, 10.0, 1.0).unwrap();
        let mut rng = stream(9, "oracle-ll");
        let s2 = 1.0;
        let model = IsotropicGaussianModel {
            n_nodes: 3,
            feat_dim: 2,
            s2,
            schedule: &schedule,
        };
        let state0 = JointState {
            coords: com_project(&gaussian_mat(3, 3, &mut rng)),
            feats: gaussian_mat(3, 2, &mut rng),
            t: 0.0,
        };
        let opts = LikelihoodOptions {
            steps: 64,
            method: DivergenceMethod::Exact,
            ..LikelihoodOptions::default()
        };
        let record =
            log_likelihood_model(&model, &state0, &schedule, &opts, &mut rng).unwrap();
        let reference = model.log_density(&state0, schedule.sigma(EPS_T));
        let rel = (record.loglik - reference).abs() / reference.abs();
        assert!(rel < 0.007, "loglik {} vs {} (rel {rel})", record.loglik, reference);
    }

    #[test]
    fn replaying_stored_drifts_reproduces_trajectory() {
        let schedule = Schedule::new(0.01, 10.0, 1.0).unwrap();
        let mut rng = stream(10, "replay");
        let model = IsotropicGaussianModel {
            n_nodes: 3,
            feat_dim: 2,
            s2: 0.8,
            schedule: &schedule,
        };
        let state0 = com_free_state(3, 2, 0.0, &mut rng);
        let opts = LikelihoodOptions { steps: 16, probes: 2, ..LikelihoodOptions::default() };
        let record = log_likelihood_model(&model, &state0, &schedule, &opts, &mut rng).unwrap();
        assert_eq!(record.times.len(), 17);
        assert_eq!(record.states.len(), 17);
        assert_eq!(record.drifts.len(), 17);
        assert_eq!(record.predictor_drifts.len(), 16);
        assert_eq!(record.div_estimates.len(), 16);
        assert!(record.times.windows(2).all(|w| w[1] > w[0]));
        assert!(record.replay_error() < 1e-9);
        for drift in &record.drifts {
            for mean in drift.coords.col_means() {
                assert!(mean.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn likelihood_invariant_to_translation_and_permutation() {
        let mut rng = stream(11, "invariance");
        let graphs = toy_graphs(1, &mut rng);
        let tables = toy_tables(&mut rng);
        let schedule = Schedule::new(0.01, 10.0, 1.0).unwrap();
        let config = DenoiserConfig {
            n_layers: 2,
            hidden: 12,
            edge_embed: 4,
            fourier: 2,
            temperature: TemperatureMode::Fixed,
        };
        let params = DenoiserParams::init(config, tables.dim(), &mut rng);
        let opts = LikelihoodOptions {
            steps: 8,
            method: DivergenceMethod::Exact,
            ..LikelihoodOptions::default()
        };

        let g = &graphs[0];
        let base = log_likelihood(
            g, &params, &tables, &schedule, &opts, &mut stream_indexed(99, "ll", 0),
        )
        .unwrap();

        let mut shifted = g.clone();
        for c in shifted.coords.iter_mut() {
            c[0] += 17.0;
            c[1] -= 3.5;
            c[2] += 0.25;
        }
        let moved = log_likelihood(
            &shifted, &params, &tables, &schedule, &opts, &mut stream_indexed(99, "ll", 0),
        )
        .unwrap();
        assert_eq!(base.loglik.to_bits(), moved.loglik.to_bits());

        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted = ComplexGraph {
            id: g.id.clone(),
            coords: perm.iter().map(|&i| g.coords[i]).collect(),
            types: perm.iter().map(|&i| g.types[i]).collect(),
            classes: perm.iter().map(|&i| g.classes[i]).collect(),
        };
        let perm_ll = log_likelihood(
            &permuted, &params, &tables, &schedule, &opts, &mut stream_indexed(99, "ll", 0),
        )
        .unwrap();
        assert_relative_eq!(base.loglik, perm_ll.loglik, max_relative = 1e-9);
    }

    #[test]
    fn divergence_failure_reports_step() {
        struct ExplodingModel<'a> {
            schedule: &'a Schedule,
        }
        impl DenoisingModel for ExplodingModel<'_> {
            fn n_nodes(&self) -> usize {
                2
            }
            fn feat_dim(&self) -> usize {
                1
            }
            fn x0_hat_with_vjps(
                &self,
                state: &JointState,
                cots: &[JointState],
            ) -> Result<(JointState, Vec<JointState>)> {
                if state.t > 0.4 {
                    let mut bad = state.clone();
                    bad.feats.set(0, 0, f64::NAN);
                    return Ok((bad, cots.to_vec()));
                }
                let _ = self.schedule;
                Ok((state.clone(), cots.to_vec()))
            }
        }
        let schedule = Schedule::new(0.01, 10.0, 1.0).unwrap();
        let mut rng = stream(12, "explode");
        let model = ExplodingModel { schedule: &schedule };
        let state0 = com_free_state(2, 1, 0.0, &mut rng);
        let opts = LikelihoodOptions { steps: 8, probes: 1, ..LikelihoodOptions::default() };
        let err = log_likelihood_model(&model, &state0, &schedule, &opts, &mut rng).unwrap_err();
        assert!(err.to_string().contains("t="), "{err}");
    }
}
