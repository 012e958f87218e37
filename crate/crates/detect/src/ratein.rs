//! Adaptive-dropout OOD scoring on a stand-in graph regressor.
//!
//! The detector probes how fragile a prediction is under dropout: for each
//! dropout site it searches for the largest rate that still preserves the
//! mutual information between the site's input and output activations, then
//! scores a sample by combining predictive variance, the heterogeneity of
//! the optimized rates, and the iteration effort the search needed. ID
//! inputs tolerate aggressive dropout; fragile inputs do not.
//!
//! The regressor here is a deliberately small two-round message-passing
//! network with six dropout sites, trained on a geometric scalar target so
//! the whole protocol can run end to end on synthetic graphs. Any embedding
//! model with observable per-site activations could take its place. Each
//! site is a residual block `mask ⊙ (h + silu(h·W + b))`: the residual path
//! keeps the block's input/output correlation moderate, which in turn keeps
//! the rate search's target inside the region the multiplicative update
//! schedule can reach from its fixed starting rate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use driftwood_core::autodiff::{NodeId, Tape};
use driftwood_core::graph::{ComplexGraph, NodeClass};
use driftwood_core::rng::{stream, stream_indexed};
use driftwood_core::{CoreError, Mat, Result};

/// Number of dropout sites in [`StandInRegressor`].
pub const DROPOUT_SITES: usize = 6;

/// Mutual information proxy from the Pearson correlation of two flattened
/// activation tensors. `degenerate` marks a constant input, for which the
/// proxy is defined as zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub nats: f64,
    pub degenerate: bool,
}

/// −½·ln(1−ρ²) over flattened activations.
pub fn ratein_mi(x: &[f64], y: &[f64]) -> Result<MiEstimate> {
    if x.len() != y.len() {
        return Err(CoreError::validation(format!(
            "activation lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(CoreError::validation(
            "mutual information needs at least 2 activation values",
        ));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(CoreError::numerical("non-finite activation value"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx < 1e-24 || syy < 1e-24 {
        return Ok(MiEstimate {
            nats: 0.0,
            degenerate: true,
        });
    }
    let rho = sxy / (sxx.sqrt() * syy.sqrt());
    let one_minus = (1.0 - rho * rho).max(1e-15);
    Ok(MiEstimate {
        nats: -0.5 * one_minus.ln(),
        degenerate: false,
    })
}

/// Inverted-scaled dropout mask: entries are 0 with probability p and
/// 1/(1−p) otherwise, so the masked activation is unbiased in expectation.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut impl Rng) -> Result<Mat> {
    if !(0.0..1.0).contains(&p) {
        return Err(CoreError::validation(format!(
            "dropout rate must be in [0, 1), got {p}"
        )));
    }
    let keep = 1.0 / (1.0 - p);
    let mut m = Mat::zeros(rows, cols);
    for v in m.data_mut() {
        *v = if rng.gen::<f64>() < p { 0.0 } else { keep };
    }
    Ok(m)
}

fn init_mat(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Mat {
    let std = scale / (rows as f64).sqrt();
    let mut m = Mat::zeros(rows, cols);
    for v in m.data_mut() {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        *v = std * z;
    }
    m
}

/// Width of the soft adjacency kernel, in coordinate units.
const ADJ_KERNEL_WIDTH: f64 = 2.0;

/// Norm of each residual-branch row relative to its block-input row. Pinning
/// this ratio pins every block's input/output correlation near
/// 1/√(1+ratio²) regardless of depth or training state, which keeps the
/// rate search's target inside the band its multiplicative schedule reaches
/// from the fixed starting rate.
const BRANCH_RATIO: f64 = 1.5;

/// One forward pass: the scalar prediction plus the flattened input/output
/// activations of each dropout site, in site order.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub prediction: f64,
    pub site_pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Two rounds of message passing over a soft distance-kernel adjacency,
/// mean-pooled into a scalar regression head. Six residual dropout sites:
/// after the embed, after each round's message aggregation, after each
/// round's combine, and one more before pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandInRegressor {
    pub n_types: usize,
    pub hidden: usize,
    w_in: Mat,
    b_in: Mat,
    w_s0: Mat,
    b_s0: Mat,
    w_s1: Mat,
    b_s1: Mat,
    w_u1: Mat,
    b_u1: Mat,
    w_s2: Mat,
    b_s2: Mat,
    w_s3: Mat,
    b_s3: Mat,
    w_u2: Mat,
    b_u2: Mat,
    w_s4: Mat,
    b_s4: Mat,
    w_s5: Mat,
    b_s5: Mat,
    w_out: Mat,
    b_out: Mat,
}

fn adjacency(graph: &ComplexGraph) -> Mat {
    let n = graph.n_nodes();
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let d2: f64 = graph.coords[i]
                .iter()
                .zip(&graph.coords[j])
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            let w = (-d2 / (2.0 * ADJ_KERNEL_WIDTH * ADJ_KERNEL_WIDTH)).exp();
            a.set(i, j, w);
            row_sum += w;
        }
        if row_sum > 0.0 {
            for j in 0..n {
                a.set(i, j, a.at(i, j) / row_sum);
            }
        }
    }
    a
}

fn node_features(graph: &ComplexGraph, n_types: usize) -> Result<Mat> {
    let n = graph.n_nodes();
    let mut x = Mat::zeros(n, n_types + 2);
    for i in 0..n {
        if graph.types[i] >= n_types {
            return Err(CoreError::validation(format!(
                "graph {}: node {i} has label {}, regressor expects < {n_types}",
                graph.id, graph.types[i]
            )));
        }
        x.set(i, graph.types[i], 1.0);
        if graph.classes[i] == NodeClass::Ligand {
            x.set(i, n_types, 1.0);
        }
        let mean_dist = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                graph.coords[i]
                    .iter()
                    .zip(&graph.coords[j])
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / (n - 1).max(1) as f64;
        x.set(i, n_types + 1, mean_dist);
    }
    Ok(x)
}

/// Mean pairwise distance over all nodes, the synthetic regression target
/// the stand-in is trained on.
pub fn geometric_target(graph: &ComplexGraph) -> f64 {
    let n = graph.n_nodes();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            total += graph.coords[i]
                .iter()
                .zip(&graph.coords[j])
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    total / pairs as f64
}

struct TapeForward {
    prediction: NodeId,
    site_pairs: Vec<(NodeId, NodeId)>,
    param_ids: Vec<NodeId>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
}

impl StandInRegressor {
    pub fn init(n_types: usize, hidden: usize, seed: u64) -> Result<StandInRegressor> {
        if n_types == 0 || hidden == 0 {
            return Err(CoreError::validation(
                "regressor needs a positive type alphabet and hidden width",
            ));
        }
        let mut rng = stream(seed, "standin-init");
        let input = n_types + 2;
        let h = hidden;
        let mut branch = || {
            let w = init_mat(h, h, 1.0, &mut rng);
            (w, Mat::zeros(1, h))
        };
        let (w_s0, b_s0) = branch();
        let (w_s1, b_s1) = branch();
        let (w_s2, b_s2) = branch();
        let (w_s3, b_s3) = branch();
        let (w_s4, b_s4) = branch();
        let (w_s5, b_s5) = branch();
        Ok(StandInRegressor {
            n_types,
            hidden,
            w_in: init_mat(input, h, 1.0, &mut rng),
            b_in: Mat::zeros(1, h),
            w_s0,
            b_s0,
            w_s1,
            b_s1,
            w_u1: init_mat(2 * h, h, 1.0, &mut rng),
            b_u1: Mat::zeros(1, h),
            w_s2,
            b_s2,
            w_s3,
            b_s3,
            w_u2: init_mat(2 * h, h, 1.0, &mut rng),
            b_u2: Mat::zeros(1, h),
            w_s4,
            b_s4,
            w_s5,
            b_s5,
            w_out: init_mat(h, 1, 1.0, &mut rng),
            b_out: Mat::zeros(1, 1),
        })
    }

    /// Tensors in canonical order; tape-leaf enumeration and the training
    /// update both rely on this ordering staying put.
    pub fn tensors(&self) -> Vec<&Mat> {
        vec![
            &self.w_in, &self.b_in, &self.w_s0, &self.b_s0, &self.w_s1, &self.b_s1,
            &self.w_u1, &self.b_u1, &self.w_s2, &self.b_s2, &self.w_s3, &self.b_s3,
            &self.w_u2, &self.b_u2, &self.w_s4, &self.b_s4, &self.w_s5, &self.b_s5,
            &self.w_out, &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![
            &mut self.w_in, &mut self.b_in, &mut self.w_s0, &mut self.b_s0, &mut self.w_s1,
            &mut self.b_s1, &mut self.w_u1, &mut self.b_u1, &mut self.w_s2, &mut self.b_s2,
            &mut self.w_s3, &mut self.b_s3, &mut self.w_u2, &mut self.b_u2, &mut self.w_s4,
            &mut self.b_s4, &mut self.w_s5, &mut self.b_s5, &mut self.w_out, &mut self.b_out,
        ]
    }

    fn forward_tape(
        &self,
        tape: &mut Tape,
        graph: &ComplexGraph,
        masks: &[Option<Mat>; DROPOUT_SITES],
    ) -> Result<TapeForward> {
        graph.validate()?;
        let n = graph.n_nodes();
        let param_ids: Vec<NodeId> =
            self.tensors().iter().map(|m| tape.leaf((*m).clone())).collect();
        let [w_in, b_in, w_s0, b_s0, w_s1, b_s1, w_u1, b_u1, w_s2, b_s2, w_s3, b_s3, w_u2, b_u2, w_s4, b_s4, w_s5, b_s5, w_out, b_out] =
            param_ids[..]
        else {
            unreachable!("twenty parameter tensors");
        };

        let mut site_pairs = Vec::with_capacity(DROPOUT_SITES);
        // Residual dropout block. The silu branch is renormalized row-wise to
        // BRANCH_RATIO times the input row norm before the skip connection,
        // and the sum is damped back to roughly the input's scale.
        let mut site_block = |tape: &mut Tape,
                              site: usize,
                              input: NodeId,
                              w: NodeId,
                              b: NodeId|
         -> Result<NodeId> {
            let lin = tape.matmul(input, w);
            let lin = tape.add_row(lin, b);
            let act = tape.silu(lin);
            let act_unit = tape.row_unit(act);
            let in_sq = tape.row_sum_sq(input);
            let in_norm = tape.sqrt_shift(in_sq, 1e-24);
            let matched = tape.mul_col(act_unit, in_norm);
            let branch = tape.scale(matched, BRANCH_RATIO);
            let sum = tape.add(input, branch);
            let pre = tape.scale(sum, 1.0 / (1.0 + BRANCH_RATIO * BRANCH_RATIO).sqrt());
            let post = match &masks[site] {
                Some(mask) => {
                    let shape = tape.value(pre).shape();
                    if mask.shape() != shape {
                        return Err(CoreError::validation(format!(
                            "site {site}: mask is {:?}, activation is {shape:?}",
                            mask.shape()
                        )));
                    }
                    let m = tape.leaf(mask.clone());
                    tape.mul(pre, m)
                }
                None => pre,
            };
            site_pairs.push((input, post));
            Ok(post)
        };

        let x = tape.leaf(node_features(graph, self.n_types)?);
        let a = tape.leaf(adjacency(graph));

        let e0 = tape.matmul(x, w_in);
        let e0 = tape.add_row(e0, b_in);
        let h0 = site_block(tape, 0, e0, w_s0, b_s0)?;

        let m1 = tape.matmul(a, h0);
        let g1 = site_block(tape, 1, m1, w_s1, b_s1)?;
        let cat1 = tape.concat_cols(h0, g1);
        let u1 = tape.matmul(cat1, w_u1);
        let u1 = tape.add_row(u1, b_u1);
        let h1 = site_block(tape, 2, u1, w_s2, b_s2)?;

        let m2 = tape.matmul(a, h1);
        let g2 = site_block(tape, 3, m2, w_s3, b_s3)?;
        let cat2 = tape.concat_cols(h1, g2);
        let u2 = tape.matmul(cat2, w_u2);
        let u2 = tape.add_row(u2, b_u2);
        let h2 = site_block(tape, 4, u2, w_s4, b_s4)?;

        let m3 = tape.matmul(a, h2);
        let h3 = site_block(tape, 5, m3, w_s5, b_s5)?;

        let mut pool_w = Mat::zeros(1, n);
        for j in 0..n {
            pool_w.set(0, j, 1.0 / n as f64);
        }
        let pool = tape.leaf(pool_w);
        let pooled = tape.matmul(pool, h3);
        let y = tape.matmul(pooled, w_out);
        let y = tape.add_row(y, b_out);
        debug_assert_eq!(tape.value(y).shape(), (1, 1));
        Ok(TapeForward {
            prediction: y,
            site_pairs,
            param_ids,
        })
    }

    /// Forward pass with the given per-site masks (`None` disables dropout
    /// at that site).
    pub fn predict(
        &self,
        graph: &ComplexGraph,
        masks: &[Option<Mat>; DROPOUT_SITES],
    ) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let fwd = self.forward_tape(&mut tape, graph, masks)?;
        let prediction = tape.value(fwd.prediction).at(0, 0);
        if !prediction.is_finite() {
            return Err(CoreError::numerical(format!(
                "regressor output non-finite on graph {}",
                graph.id
            )));
        }
        let site_pairs = fwd
            .site_pairs
            .iter()
            .map(|&(i, o)| (tape.value(i).data().to_vec(), tape.value(o).data().to_vec()))
            .collect();
        Ok(ForwardTrace {
            prediction,
            site_pairs,
        })
    }

    /// Shape of the activation entering each dropout site, needed to draw
    /// masks of the right size.
    pub fn site_shape(&self, _site: usize, n_nodes: usize) -> (usize, usize) {
        (n_nodes, self.hidden)
    }

    /// Mean-pooled final-block activations, a fixed-length graph embedding
    /// for detectors that ingest vectors rather than graphs.
    pub fn embed(&self, graph: &ComplexGraph) -> Result<Vec<f64>> {
        let no_masks: [Option<Mat>; DROPOUT_SITES] = Default::default();
        let mut tape = Tape::new();
        let fwd = self.forward_tape(&mut tape, graph, &no_masks)?;
        let (_, last) = fwd.site_pairs[DROPOUT_SITES - 1];
        let h = tape.value(last);
        let n = h.rows();
        let mut pooled = vec![0.0; h.cols()];
        for i in 0..n {
            for (p, v) in pooled.iter_mut().zip(h.row(i)) {
                *p += v / n as f64;
            }
        }
        if pooled.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::numerical(format!(
                "embedding non-finite on graph {}",
                graph.id
            )));
        }
        Ok(pooled)
    }

    /// Plain per-sample SGD on squared error against `targets`, dropout off.
    pub fn train(
        &mut self,
        graphs: &[ComplexGraph],
        targets: &[f64],
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<TrainSummary> {
        if graphs.is_empty() || graphs.len() != targets.len() {
            return Err(CoreError::validation(format!(
                "{} graphs for {} targets",
                graphs.len(),
                targets.len()
            )));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(CoreError::validation(format!("bad learning rate {lr}")));
        }
        let no_masks: [Option<Mat>; DROPOUT_SITES] = Default::default();
        let mean_loss = |model: &StandInRegressor| -> Result<f64> {
            let mut total = 0.0;
            for (g, &t) in graphs.iter().zip(targets) {
                let pred = model.predict(g, &no_masks)?.prediction;
                total += (pred - t) * (pred - t);
            }
            Ok(total / graphs.len() as f64)
        };
        let initial_loss = mean_loss(self)?;
        let mut order: Vec<usize> = (0..graphs.len()).collect();
        for epoch in 0..epochs {
            let mut rng = stream_indexed(seed, "standin-epoch", epoch as u64);
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            for &gi in &order {
                let mut tape = Tape::new();
                let fwd = self.forward_tape(&mut tape, &graphs[gi], &no_masks)?;
                let target = tape.leaf(Mat::scalar(targets[gi]));
                let diff = tape.sub(fwd.prediction, target);
                let loss = tape.mul(diff, diff);
                let grads = tape.backward(loss, Mat::scalar(1.0));
                for (param, id) in self.tensors_mut().into_iter().zip(&fwd.param_ids) {
                    if let Some(g) = grads.get(*id) {
                        for (p, gv) in param.data_mut().iter_mut().zip(g.data()) {
                            *p -= lr * gv;
                        }
                    }
                }
            }
            if !self.tensors().iter().all(|m| m.is_finite()) {
                return Err(CoreError::numerical(format!(
                    "regressor parameters diverged at epoch {epoch}"
                )));
            }
        }
        let final_loss = mean_loss(self)?;
        Ok(TrainSummary {
            initial_loss,
            final_loss,
            epochs,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::validation(format!("serializing regressor: {e}")))?;
        std::fs::write(path, text)
            .map_err(|e| CoreError::validation(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &std::path::Path) -> Result<StandInRegressor> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::validation(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CoreError::validation(format!("parsing {}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RateInConfig {
    /// Target relative information loss.
    pub epsilon: f64,
    /// Acceptance band around epsilon.
    pub tolerance: f64,
    pub p_init: f64,
    pub n_max: usize,
    /// Forward passes averaged per MI estimate.
    pub k_passes: usize,
    /// Stochastic predictions for the variance term.
    pub m_predictions: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Layers whose no-dropout MI falls below this are skipped.
    pub i_full_floor: f64,
}

impl Default for RateInConfig {
    fn default() -> Self {
        RateInConfig {
            epsilon: 0.1,
            tolerance: 0.02,
            p_init: 0.3,
            n_max: 20,
            k_passes: 5,
            m_predictions: 30,
            lambda1: 0.3,
            lambda2: 0.2,
            i_full_floor: 1e-6,
        }
    }
}

impl RateInConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(CoreError::validation(format!(
                "epsilon must be in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(CoreError::validation("tolerance must be positive"));
        }
        if !(self.p_init > 0.0 && self.p_init <= 0.9) {
            return Err(CoreError::validation(format!(
                "initial rate must be in (0, 0.9], got {}",
                self.p_init
            )));
        }
        if self.n_max == 0 || self.k_passes == 0 || self.m_predictions < 2 {
            return Err(CoreError::validation(
                "n_max and k_passes must be positive, m_predictions at least 2",
            ));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(CoreError::validation("lambda weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOptResult {
    pub rate: f64,
    pub iterations: usize,
    pub converged: bool,
    pub skipped: bool,
}

/// Multiplicative-update search for the largest dropout rate whose relative
/// information loss sits within tolerance of the target. Dropout stays off
/// at every other site. A site whose no-dropout MI is already ≈ 0 carries no
/// signal and is skipped with rate 0.
pub fn ratein_optimize_layer(
    model: &StandInRegressor,
    graph: &ComplexGraph,
    site: usize,
    cfg: &RateInConfig,
    rng: &mut impl Rng,
) -> Result<LayerOptResult> {
    cfg.validate()?;
    if site >= DROPOUT_SITES {
        return Err(CoreError::validation(format!(
            "site {site} out of range, regressor has {DROPOUT_SITES} dropout sites"
        )));
    }
    let no_masks: [Option<Mat>; DROPOUT_SITES] = Default::default();
    let clean = model.predict(graph, &no_masks)?;
    let (h_in, h_out) = &clean.site_pairs[site];
    let i_full = ratein_mi(h_in, h_out)?;
    if i_full.degenerate || i_full.nats < cfg.i_full_floor {
        return Ok(LayerOptResult {
            rate: 0.0,
            iterations: 0,
            converged: true,
            skipped: true,
        });
    }
    let (rows, cols) = model.site_shape(site, graph.n_nodes());
    let mut p = cfg.p_init;
    for iteration in 1..=cfg.n_max {
        let mut mi_sum = 0.0;
        for _ in 0..cfg.k_passes {
            let mut masks: [Option<Mat>; DROPOUT_SITES] = Default::default();
            masks[site] = Some(dropout_mask(rows, cols, p, rng)?);
            let trace = model.predict(graph, &masks)?;
            let (h_in, h_out) = &trace.site_pairs[site];
            mi_sum += ratein_mi(h_in, h_out)?.nats;
        }
        let i_p = mi_sum / cfg.k_passes as f64;
        let delta_i = (i_full.nats - i_p) / i_full.nats;
        if (delta_i - cfg.epsilon).abs() <= cfg.tolerance {
            return Ok(LayerOptResult {
                rate: p,
                iterations: iteration,
                converged: true,
                skipped: false,
            });
        }
        if iteration == cfg.n_max {
            return Ok(LayerOptResult {
                rate: p,
                iterations: cfg.n_max,
                converged: false,
                skipped: false,
            });
        }
        p = if delta_i > cfg.epsilon {
            0.9 * p
        } else {
            (1.1 * p).min(0.9)
        };
    }
    unreachable!("loop returns at the iteration cap");
}

/// s = σ²_pred + λ₁·Var(p*) + λ₂·(n̄/N_max).
pub fn ratein_score(
    sigma2_pred: f64,
    rate_variance: f64,
    mean_iterations: f64,
    cfg: &RateInConfig,
) -> Result<f64> {
    if !(sigma2_pred >= 0.0 && sigma2_pred.is_finite()) {
        return Err(CoreError::validation(format!(
            "predictive variance must be non-negative, got {sigma2_pred}"
        )));
    }
    if !(rate_variance >= 0.0 && rate_variance.is_finite()) {
        return Err(CoreError::validation(format!(
            "rate variance must be non-negative, got {rate_variance}"
        )));
    }
    if !(0.0..=cfg.n_max as f64).contains(&mean_iterations) {
        return Err(CoreError::validation(format!(
            "mean iterations {mean_iterations} outside [0, {}]",
            cfg.n_max
        )));
    }
    Ok(sigma2_pred + cfg.lambda1 * rate_variance + cfg.lambda2 * (mean_iterations / cfg.n_max as f64))
}

/// Per-sample result: optimized rates, search effort, predictive variance
/// at those rates, and the combined score.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateInProfile {
    pub rates: Vec<f64>,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub skipped: Vec<bool>,
    pub sigma2_pred: f64,
    pub rate_variance: f64,
    pub mean_iterations: f64,
    pub score: f64,
}

fn population_variance(vals: &[f64]) -> f64 {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Runs the full per-sample protocol: optimize every dropout site, collect
/// `m_predictions` stochastic predictions at the optimized rates, and
/// combine the three signals into one score. Layer searches and the
/// prediction draws use disjoint streams of `seed`, so profiles for
/// different samples are independent given distinct seeds.
pub fn ratein_profile(
    model: &StandInRegressor,
    graph: &ComplexGraph,
    cfg: &RateInConfig,
    seed: u64,
) -> Result<RateInProfile> {
    cfg.validate()?;
    let mut rates = Vec::with_capacity(DROPOUT_SITES);
    let mut iterations = Vec::with_capacity(DROPOUT_SITES);
    let mut converged = Vec::with_capacity(DROPOUT_SITES);
    let mut skipped = Vec::with_capacity(DROPOUT_SITES);
    for site in 0..DROPOUT_SITES {
        let mut rng = stream_indexed(seed, "ratein-layer", site as u64);
        let result = ratein_optimize_layer(model, graph, site, cfg, &mut rng)?;
        rates.push(result.rate);
        iterations.push(result.iterations);
        converged.push(result.converged);
        skipped.push(result.skipped);
    }
    let n = graph.n_nodes();
    let mut rng = stream(seed, "ratein-pred");
    let mut predictions = Vec::with_capacity(cfg.m_predictions);
    for _ in 0..cfg.m_predictions {
        let mut masks: [Option<Mat>; DROPOUT_SITES] = Default::default();
        for (site, (mask, &rate)) in masks.iter_mut().zip(&rates).enumerate() {
            if rate > 0.0 {
                let (rows, cols) = model.site_shape(site, n);
                *mask = Some(dropout_mask(rows, cols, rate, &mut rng)?);
            }
        }
        predictions.push(model.predict(graph, &masks)?.prediction);
    }
    let sigma2_pred = population_variance(&predictions);
    let rate_variance = population_variance(&rates);
    let mean_iterations =
        iterations.iter().sum::<usize>() as f64 / DROPOUT_SITES as f64;
    let score = ratein_score(sigma2_pred, rate_variance, mean_iterations, cfg)?;
    Ok(RateInProfile {
        rates,
        iterations,
        converged,
        skipped,
        sigma2_pred,
        rate_variance,
        mean_iterations,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_graph(n: usize, n_types: usize, spread: f64, seed: u64) -> ComplexGraph {
        let mut rng = stream(seed, "ratein-test-graph");
        let coords = (0..n)
            .map(|_| {
                [
                    spread * rng.sample::<f64, _>(rand_distr::StandardNormal),
                    spread * rng.sample::<f64, _>(rand_distr::StandardNormal),
                    spread * rng.sample::<f64, _>(rand_distr::StandardNormal),
                ]
            })
            .collect();
        let types = (0..n).map(|_| rng.gen_range(0..n_types)).collect();
        let classes = (0..n)
            .map(|i| {
                if i < n / 2 {
                    NodeClass::Ligand
                } else {
                    NodeClass::Pocket
                }
            })
            .collect();
        ComplexGraph {
            id: format!("rt{seed}"),
            coords,
            types,
            classes,
        }
    }

    fn trained_model(seed: u64) -> (StandInRegressor, Vec<ComplexGraph>) {
        let graphs: Vec<ComplexGraph> = (0..16)
            .map(|i| random_graph(12, 3, 1.0 + 0.1 * i as f64, 100 + i as u64))
            .collect();
        let targets: Vec<f64> = graphs.iter().map(geometric_target).collect();
        let mut model = StandInRegressor::init(3, 16, seed).unwrap();
        model.train(&graphs, &targets, 40, 1e-4, seed).unwrap();
        (model, graphs)
    }

    #[test]
    fn mi_examples() {
        // x and z are orthogonal centered patterns with equal norms, so the
        // correlation of x with 9x + sqrt(19)z is 9/sqrt(81+19) = 0.9
        let reps = 16;
        let mut x = Vec::new();
        let mut z = Vec::new();
        for _ in 0..reps {
            x.extend([1.0, -1.0, 1.0, -1.0]);
            z.extend([1.0, 1.0, -1.0, -1.0]);
        }
        let y: Vec<f64> = x
            .iter()
            .zip(&z)
            .map(|(a, b)| 9.0 * a + 19f64.sqrt() * b)
            .collect();
        let est = ratein_mi(&x, &y).unwrap();
        assert!(!est.degenerate);
        assert_abs_diff_eq!(est.nats, -0.5 * 0.19f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(est.nats, 0.8304, epsilon = 1e-4);

        let uncorrelated = ratein_mi(&x, &z).unwrap();
        assert_eq!(uncorrelated.nats, 0.0);
        assert!(!uncorrelated.degenerate);
    }

    #[test]
    fn mi_is_symmetric() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).cos() + 0.2 * i as f64).collect();
        let a = ratein_mi(&x, &y).unwrap();
        let b = ratein_mi(&y, &x).unwrap();
        assert_eq!(a.nats, b.nats);
    }

    #[test]
    fn mi_flags_constant_input() {
        let x = vec![2.5; 30];
        let y: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let est = ratein_mi(&x, &y).unwrap();
        assert_eq!(est.nats, 0.0);
        assert!(est.degenerate);
        assert!(ratein_mi(&x[..5], &y).is_err());
        assert!(ratein_mi(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn mi_matches_closed_form_on_gaussian_pairs() {
        let n = 10_000;
        let rho: f64 = 0.6;
        let mut rng = stream(17, "mi-gauss");
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f64 = rng.sample(rand_distr::StandardNormal);
            let b: f64 = rng.sample(rand_distr::StandardNormal);
            x.push(a);
            y.push(rho * a + (1.0 - rho * rho).sqrt() * b);
        }
        let est = ratein_mi(&x, &y).unwrap();
        let exact = -0.5 * (1.0 - rho * rho).ln();
        // delta method: SE(MI) ≈ |ρ|/√n for the Pearson plug-in
        let se = rho / (n as f64).sqrt();
        assert!(
            (est.nats - exact).abs() <= 2.0 * se,
            "MI {} vs closed form {exact}, 2·SE = {}",
            est.nats,
            2.0 * se
        );
    }

    #[test]
    fn score_plug_in_is_exact() {
        let cfg = RateInConfig::default();
        assert_eq!(ratein_score(0.5, 0.1, 10.0, &cfg).unwrap(), 0.63);
        assert_eq!(ratein_score(0.0, 0.0, 0.0, &cfg).unwrap(), 0.0);
        assert!(ratein_score(-0.1, 0.0, 0.0, &cfg).is_err());
        assert!(ratein_score(0.0, 0.0, 21.0, &cfg).is_err());
    }

    #[test]
    fn score_is_monotone_in_each_component() {
        let cfg = RateInConfig::default();
        let base = ratein_score(0.2, 0.05, 5.0, &cfg).unwrap();
        assert!(ratein_score(0.3, 0.05, 5.0, &cfg).unwrap() > base);
        assert!(ratein_score(0.2, 0.15, 5.0, &cfg).unwrap() > base);
        assert!(ratein_score(0.2, 0.05, 9.0, &cfg).unwrap() > base);
    }

    #[test]
    fn training_reduces_loss() {
        let (_, graphs) = trained_model(1);
        let targets: Vec<f64> = graphs.iter().map(geometric_target).collect();
        let mut model = StandInRegressor::init(3, 16, 1).unwrap();
        let summary = model.train(&graphs, &targets, 40, 1e-4, 1).unwrap();
        assert!(
            summary.final_loss < summary.initial_loss,
            "loss went from {} to {}",
            summary.initial_loss,
            summary.final_loss
        );
    }

    #[test]
    fn zero_rate_mask_is_identity() {
        let (model, graphs) = trained_model(2);
        let no_masks: [Option<Mat>; DROPOUT_SITES] = Default::default();
        let clean = model.predict(&graphs[0], &no_masks).unwrap();
        let mut rng = stream(3, "mask");
        let mut masks: [Option<Mat>; DROPOUT_SITES] = Default::default();
        let (r, c) = model.site_shape(2, graphs[0].n_nodes());
        masks[2] = Some(dropout_mask(r, c, 0.0, &mut rng).unwrap());
        let masked = model.predict(&graphs[0], &masks).unwrap();
        assert_eq!(clean.prediction, masked.prediction);
    }

    #[test]
    fn dropout_perturbs_predictions() {
        let (model, graphs) = trained_model(4);
        let mut rng = stream(5, "mask");
        let (r, c) = model.site_shape(1, graphs[0].n_nodes());
        let mut masks: [Option<Mat>; DROPOUT_SITES] = Default::default();
        masks[1] = Some(dropout_mask(r, c, 0.5, &mut rng).unwrap());
        let a = model.predict(&graphs[0], &masks).unwrap();
        masks[1] = Some(dropout_mask(r, c, 0.5, &mut rng).unwrap());
        let b = model.predict(&graphs[0], &masks).unwrap();
        assert_ne!(a.prediction, b.prediction);
    }

    #[test]
    fn zeroed_model_skips_every_layer_and_scores_zero() {
        let (mut model, graphs) = trained_model(6);
        for t in model.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let cfg = RateInConfig::default();
        let profile = ratein_profile(&model, &graphs[0], &cfg, 9).unwrap();
        assert!(profile.skipped.iter().all(|&s| s));
        assert!(profile.rates.iter().all(|&p| p == 0.0));
        assert_eq!(profile.score, 0.0);
    }

    #[test]
    fn optimization_converges_on_trained_model() {
        let (model, graphs) = trained_model(7);
        let cfg = RateInConfig::default();
        let mut total = 0usize;
        let mut converged = 0usize;
        for (i, graph) in graphs.iter().take(4).enumerate() {
            let profile = ratein_profile(&model, graph, &cfg, 50 + i as u64).unwrap();
            for site in 0..DROPOUT_SITES {
                total += 1;
                if profile.converged[site] {
                    converged += 1;
                    if !profile.skipped[site] {
                        assert!(
                            profile.rates[site] > 0.0 && profile.rates[site] <= 0.9,
                            "site {site} rate {} out of range",
                            profile.rates[site]
                        );
                    }
                }
                assert!(profile.iterations[site] <= cfg.n_max);
            }
        }
        assert!(
            converged * 10 >= total * 9,
            "only {converged}/{total} site optimizations converged"
        );
    }

    #[test]
    fn optimized_rate_is_stable_across_seeds() {
        let (model, graphs) = trained_model(8);
        let cfg = RateInConfig::default();
        let mut rates = Vec::new();
        for seed in 0..20u64 {
            let mut rng = stream(seed, "stability");
            let result = ratein_optimize_layer(&model, &graphs[0], 2, &cfg, &mut rng).unwrap();
            assert!(!result.skipped);
            rates.push(result.rate);
        }
        let std = population_variance(&rates).sqrt();
        assert!(std < 0.1, "rate std {std} across seeds, rates {rates:?}");
    }

    #[test]
    fn profile_deterministic_given_seed() {
        let (model, graphs) = trained_model(9);
        let cfg = RateInConfig::default();
        let a = ratein_profile(&model, &graphs[1], &cfg, 123).unwrap();
        let b = ratein_profile(&model, &graphs[1], &cfg, 123).unwrap();
        assert_eq!(a.rates, b.rates);
        assert_eq!(a.score, b.score);
    }

    #[test]
    fn regressor_round_trips_through_disk() {
        let (model, _) = trained_model(10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("standin.json");
        model.save(&path).unwrap();
        let back = StandInRegressor::load(&path).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn rejects_labels_outside_alphabet() {
        let (model, graphs) = trained_model(11);
        let mut bad = graphs[0].clone();
        bad.types[0] = 99;
        let no_masks: [Option<Mat>; DROPOUT_SITES] = Default::default();
        assert!(model.predict(&bad, &no_masks).is_err());
    }

    #[test]
    fn embedding_is_deterministic_and_discriminative() {
        let model = StandInRegressor::init(3, 16, 9).unwrap();
        let a = random_graph(10, 3, 1.0, 50);
        let b = random_graph(10, 3, 3.0, 51);
        let ea = model.embed(&a).unwrap();
        assert_eq!(ea.len(), 16);
        assert_eq!(ea, model.embed(&a).unwrap());
        let eb = model.embed(&b).unwrap();
        let gap: f64 = ea.iter().zip(&eb).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(gap > 1e-8, "embeddings identical across distinct graphs");
    }
}
