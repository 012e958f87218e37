//! SE(3)-equivariant graph denoiser.
//!
//! Message passing runs on the fully connected graph of each complex. Edge
//! scalars are the current pairwise distances, recomputed from the noisy
//! coordinates at every call, concatenated with a learned embedding of the
//! edge's class pair. Scalar channels (hidden features, logits) are rotation
//! invariant; coordinate updates move along node-difference vectors and are
//! rotation equivariant. Noise conditioning enters as Fourier features of
//! `ln sigma(t)` concatenated to the node features, so the whole map is
//! smooth in t.
//!
//! Two heads come out per node: a clean-coordinate estimate assembled in the
//! EDM skip formulation, `r0_hat = c_skip r_t + c_out (X_L - c_in r_t)`, and
//! cosine logits `z_{i,k} = kappa(t) <e_k, h_hat_i>` against the node's own
//! class prototypes, where `h_hat` is the row-normalized feature head.
//! The posterior-mean embedding `sum_k softmax(z_i)_k e_k` turns logits into
//! the feature block of the denoised state estimate.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{CoreError, Result};
use crate::graph::{com_project, JointState, NodeClass, PrototypeTables};
use crate::mat::Mat;
use crate::schedule::Schedule;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemperatureMode {
    /// kappa(t) = sigma(t)^-2, the Bayes-aligned scaling.
    Theory,
    /// kappa = 1.
    #[default]
    Fixed,
}

/// Logit temperature for the cosine head.
pub fn kappa(schedule: &Schedule, t: f64, mode: TemperatureMode) -> f64 {
    match mode {
        TemperatureMode::Theory => schedule.sigma(t).powi(-2),
        TemperatureMode::Fixed => 1.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_edge_embed")]
    pub edge_embed: usize,
    /// Number of (sin, cos) pairs encoding ln sigma(t).
    #[serde(default = "default_fourier")]
    pub fourier: usize,
    #[serde(default)]
    pub temperature: TemperatureMode,
}

fn default_n_layers() -> usize {
    6
}

fn default_hidden() -> usize {
    256
}

fn default_edge_embed() -> usize {
    64
}

fn default_fourier() -> usize {
    4
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            n_layers: default_n_layers(),
            hidden: default_hidden(),
            edge_embed: default_edge_embed(),
            fourier: default_fourier(),
            temperature: TemperatureMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub we1: Mat,
    pub be1: Mat,
    pub we2: Mat,
    pub be2: Mat,
    pub wx1: Mat,
    pub bx1: Mat,
    pub wx2: Mat,
    pub bx2: Mat,
    pub wh1: Mat,
    pub bh1: Mat,
    pub wh2: Mat,
    pub bh2: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    /// Embedding dimension of the joint state's feature block.
    pub feat_dim: usize,
    pub w_in: Mat,
    pub b_in: Mat,
    pub layers: Vec<LayerParams>,
    pub w_feat: Mat,
    pub b_feat: Mat,
    /// One learned row per ordered class pair (LL, LP, PL, PP).
    pub edge_table: Mat,
}

fn init_mat(rows: usize, cols: usize, scale: f64, rng: &mut impl rand::Rng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m.set(r, c, rng.sample::<f64, _>(rand_distr::StandardNormal) * scale);
        }
    }
    m
}

impl DenoiserParams {
    pub fn init(config: DenoiserConfig, feat_dim: usize, rng: &mut impl rand::Rng) -> Self {
        let h = config.hidden;
        let in_width = feat_dim + 2 + 2 * config.fourier;
        let edge_in = 2 * h + 1 + config.edge_embed;
        let lecun = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut layer = || LayerParams {
            we1: init_mat(edge_in, h, lecun(edge_in), rng),
            be1: Mat::zeros(1, h),
            we2: init_mat(h, h, lecun(h), rng),
            be2: Mat::zeros(1, h),
            wx1: init_mat(h, h, lecun(h), rng),
            bx1: Mat::zeros(1, h),
            // zero-initialized gate output: coordinate track starts as the
            // identity, which keeps early training near the EDM skip path
            wx2: Mat::zeros(h, 1),
            bx2: Mat::zeros(1, 1),
            wh1: init_mat(2 * h, h, lecun(2 * h), rng),
            bh1: Mat::zeros(1, h),
            wh2: init_mat(h, h, lecun(h), rng),
            bh2: Mat::zeros(1, h),
        };
        let layers: Vec<LayerParams> = (0..config.n_layers).map(|_| layer()).collect();
        DenoiserParams {
            config,
            feat_dim,
            w_in: init_mat(in_width, h, lecun(in_width), rng),
            b_in: Mat::zeros(1, h),
            layers,
            w_feat: init_mat(h, feat_dim, lecun(h), rng),
            b_feat: Mat::zeros(1, feat_dim),
            edge_table: init_mat(4, config.edge_embed, 1.0, rng),
        }
    }

    /// Tensors in canonical order; the trainer's optimizer state and the
    /// tape-leaf enumeration both rely on this ordering staying put.
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out = vec![&self.w_in, &self.b_in];
        for l in &self.layers {
            out.extend([
                &l.we1, &l.be1, &l.we2, &l.be2, &l.wx1, &l.bx1, &l.wx2, &l.bx2, &l.wh1,
                &l.bh1, &l.wh2, &l.bh2,
            ]);
        }
        out.extend([&self.w_feat, &self.b_feat, &self.edge_table]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = vec![&mut self.w_in, &mut self.b_in];
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.we1, &mut l.be1, &mut l.we2, &mut l.be2, &mut l.wx1, &mut l.bx1,
                &mut l.wx2, &mut l.bx2, &mut l.wh1, &mut l.bh1, &mut l.wh2, &mut l.bh2,
            ]);
        }
        out.extend([&mut self.w_feat, &mut self.b_feat, &mut self.edge_table]);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }
}

/// Per-node outputs. `logits[i]` ranges over node i's class alphabet.
#[derive(Clone, Debug)]
pub struct DenoiserOutput {
    pub coord_hat: Mat,
    pub feat_dir: Mat,
    pub logits: Vec<Vec<f64>>,
    /// Posterior-mean embeddings, the feature block of the denoised state.
    pub x0_feats: Mat,
}

/// Tape handles for one forward pass. Training seeds a loss built on top of
/// these; divergence probes seed `x0_full` with cotangents and read the
/// adjoints at `coords_in`/`feats_in`.
pub struct TapeForward {
    pub coords_in: NodeId,
    pub feats_in: NodeId,
    pub coord_hat: NodeId,
    pub feat_dir: NodeId,
    pub logits_ligand: Option<NodeId>,
    pub logits_pocket: Option<NodeId>,
    pub x0_feats: NodeId,
    /// [n x (3+d)] concatenation of coord_hat and x0_feats.
    pub x0_full: NodeId,
    /// Parameter leaves in `DenoiserParams::tensors` order.
    pub param_ids: Vec<NodeId>,
    pub table_ligand: NodeId,
    pub table_pocket: NodeId,
    pub ligand_rows: Vec<usize>,
    pub pocket_rows: Vec<usize>,
}

fn fourier_features(n: usize, ln_sigma: f64, pairs: usize) -> Mat {
    let mut row = Vec::with_capacity(2 * pairs);
    for j in 0..pairs {
        let omega = 0.5 * (1 << j) as f64;
        row.push((omega * ln_sigma).sin());
        row.push((omega * ln_sigma).cos());
    }
    let mut m = Mat::zeros(n, 2 * pairs);
    for r in 0..n {
        m.row_mut(r).copy_from_slice(&row);
    }
    m
}

fn class_onehot(classes: &[NodeClass]) -> Mat {
    let mut m = Mat::zeros(classes.len(), 2);
    for (i, c) in classes.iter().enumerate() {
        match c {
            NodeClass::Ligand => m.set(i, 0, 1.0),
            NodeClass::Pocket => m.set(i, 1, 1.0),
        }
    }
    m
}

/// Tape leaves for the learnable tensors, in `DenoiserParams::tensors` order
/// plus the two prototype tables.
pub struct ForwardWiring {
    pub param_ids: Vec<NodeId>,
    pub table_ligand: NodeId,
    pub table_pocket: NodeId,
}

pub fn wire_params(tape: &mut Tape, params: &DenoiserParams, tables: &PrototypeTables) -> ForwardWiring {
    let param_ids: Vec<NodeId> = params.tensors().iter().map(|m| tape.leaf((*m).clone())).collect();
    ForwardWiring {
        param_ids,
        table_ligand: tape.leaf(tables.ligand.clone()),
        table_pocket: tape.leaf(tables.pocket.clone()),
    }
}

/// Build the full forward computation on a tape.
///
/// `coords`/`feats` are the raw noisy state blocks; scaling by `c_in(t)`
/// happens on the tape so gradients flow through it.
#[allow(clippy::too_many_arguments)]
pub fn build_forward(
    tape: &mut Tape,
    coords: &Mat,
    feats: &Mat,
    classes: &[NodeClass],
    t: f64,
    params: &DenoiserParams,
    tables: &PrototypeTables,
    schedule: &Schedule,
) -> Result<TapeForward> {
    if tables.dim() != params.feat_dim {
        return Err(CoreError::validation(format!(
            "feature dimension mismatch: params {}, tables {}",
            params.feat_dim,
            tables.dim()
        )));
    }
    let wiring = wire_params(tape, params, tables);
    let coords_in = tape.leaf(coords.clone());
    let feats_in = tape.leaf(feats.clone());
    build_forward_wired(tape, &wiring, coords_in, feats_in, classes, t, params, schedule)
}

/// Variant for callers that already placed the state on the tape, such as the
/// trainer, where the clean feature block is gathered from the prototype-table
/// leaves so table gradients include the input-embedding path.
#[allow(clippy::too_many_arguments)]
pub fn build_forward_wired(
    tape: &mut Tape,
    wiring: &ForwardWiring,
    coords_in: NodeId,
    feats_in: NodeId,
    classes: &[NodeClass],
    t: f64,
    params: &DenoiserParams,
    schedule: &Schedule,
) -> Result<TapeForward> {
    let n = tape.value(coords_in).rows();
    if n < 2 {
        return Err(CoreError::validation("denoiser needs at least 2 nodes"));
    }
    if tape.value(feats_in).cols() != params.feat_dim {
        return Err(CoreError::validation(format!(
            "feature dimension mismatch: state {}, params {}",
            tape.value(feats_in).cols(),
            params.feat_dim
        )));
    }
    if classes.len() != n || tape.value(feats_in).rows() != n {
        return Err(CoreError::validation("state blocks disagree on node count"));
    }
    assert!((0.0..=1.0).contains(&t), "t={t} outside [0,1]");

    let cfg = &params.config;
    let (c_in, c_out) = schedule.precondition(t);
    let c_skip = schedule.c_skip(t);
    let kap = kappa(schedule, t, cfg.temperature);

    // receiver-major edge lists over the fully connected graph
    let mut src = Vec::with_capacity(n * (n - 1));
    let mut dst = Vec::with_capacity(n * (n - 1));
    let mut edge_kind = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            src.push(i);
            dst.push(j);
            let kind = match (classes[i], classes[j]) {
                (NodeClass::Ligand, NodeClass::Ligand) => 0,
                (NodeClass::Ligand, NodeClass::Pocket) => 1,
                (NodeClass::Pocket, NodeClass::Ligand) => 2,
                (NodeClass::Pocket, NodeClass::Pocket) => 3,
            };
            edge_kind.push(kind);
        }
    }
    let inv_neighbors = 1.0 / (n - 1) as f64;

    let mut idx = wiring.param_ids.iter().copied();
    let mut next = || idx.next().expect("wiring matches tensor order");
    let w_in = next();
    let b_in = next();
    struct LayerIds {
        we1: NodeId,
        be1: NodeId,
        we2: NodeId,
        be2: NodeId,
        wx1: NodeId,
        bx1: NodeId,
        wx2: NodeId,
        bx2: NodeId,
        wh1: NodeId,
        bh1: NodeId,
        wh2: NodeId,
        bh2: NodeId,
    }
    let layer_ids: Vec<LayerIds> = (0..params.layers.len())
        .map(|_| LayerIds {
            we1: next(),
            be1: next(),
            we2: next(),
            be2: next(),
            wx1: next(),
            bx1: next(),
            wx2: next(),
            bx2: next(),
            wh1: next(),
            bh1: next(),
            wh2: next(),
            bh2: next(),
        })
        .collect();
    let w_feat = next();
    let b_feat = next();
    let edge_table = next();
    let table_ligand = wiring.table_ligand;
    let table_pocket = wiring.table_pocket;

    // input embedding: scaled features, class flags, noise conditioning
    let feats_scaled = tape.scale(feats_in, c_in);
    let onehot = tape.leaf(class_onehot(classes));
    let ln_sigma = schedule.sigma(t).ln();
    let fourier = tape.leaf(fourier_features(n, ln_sigma, cfg.fourier));
    let with_class = tape.concat_cols(feats_scaled, onehot);
    let in_feats = tape.concat_cols(with_class, fourier);
    let pre_h = tape.matmul(in_feats, w_in);
    let pre_h = tape.add_row(pre_h, b_in);
    let mut h = tape.silu(pre_h);

    let x0_scaled = tape.scale(coords_in, c_in);
    let mut x = x0_scaled;

    let edge_emb = tape.gather_rows(edge_table, edge_kind.clone());

    for (l, ids) in layer_ids.iter().enumerate() {
        let xs = tape.gather_rows(x, src.clone());
        let xd = tape.gather_rows(x, dst.clone());
        let diff = tape.sub(xs, xd);
        let d2 = tape.row_sum_sq(diff);
        let dist = tape.sqrt_shift(d2, 1e-12);

        let hs = tape.gather_rows(h, src.clone());
        let hd = tape.gather_rows(h, dst.clone());
        let hh = tape.concat_cols(hs, hd);
        let hhd = tape.concat_cols(hh, dist);
        let msg_in = tape.concat_cols(hhd, edge_emb);

        let m1 = tape.matmul(msg_in, ids.we1);
        let m1 = tape.add_row(m1, ids.be1);
        let m1 = tape.silu(m1);
        let m2 = tape.matmul(m1, ids.we2);
        let m2 = tape.add_row(m2, ids.be2);
        let msg = tape.silu(m2);

        // equivariant coordinate update along node differences, tempered by
        // 1/(dist+1) so far-apart pairs cannot blow up the step
        let g1 = tape.matmul(msg, ids.wx1);
        let g1 = tape.add_row(g1, ids.bx1);
        let g1 = tape.silu(g1);
        let gate = tape.matmul(g1, ids.wx2);
        let gate = tape.add_row(gate, ids.bx2);
        let damp = tape.recip_shift(dist, 1.0);
        let gated = tape.mul_col(diff, gate);
        let gated = tape.mul_col(gated, damp);
        let dx = tape.scatter_add_rows(gated, src.clone(), n);
        let dx = tape.scale(dx, inv_neighbors);
        x = tape.add(x, dx);

        let agg = tape.scatter_add_rows(msg, src.clone(), n);
        let agg = tape.scale(agg, inv_neighbors);
        let hcat = tape.concat_cols(h, agg);
        let u1 = tape.matmul(hcat, ids.wh1);
        let u1 = tape.add_row(u1, ids.bh1);
        let u1 = tape.silu(u1);
        let u2 = tape.matmul(u1, ids.wh2);
        let u2 = tape.add_row(u2, ids.bh2);
        h = tape.add(h, u2);

        if !tape.value(x).is_finite() || !tape.value(h).is_finite() {
            return Err(CoreError::numerical(format!(
                "denoiser layer {l} produced non-finite values"
            )));
        }
    }

    // coordinate head: EDM skip around the accumulated displacement
    let displacement = tape.sub(x, x0_scaled);
    let skip = tape.scale(coords_in, c_skip);
    let resid = tape.scale(displacement, c_out);
    let coord_sum = tape.add(skip, resid);
    let coord_hat = tape.com_project_rows(coord_sum);

    // feature head: unit direction, then per-class cosine logits
    let f1 = tape.matmul(h, w_feat);
    let f1 = tape.add_row(f1, b_feat);
    let feat_dir = tape.row_unit(f1);

    let ligand_rows: Vec<usize> = classes
        .iter()
        .enumerate()
        .filter(|(_, c)| **c == NodeClass::Ligand)
        .map(|(i, _)| i)
        .collect();
    let pocket_rows: Vec<usize> = classes
        .iter()
        .enumerate()
        .filter(|(_, c)| **c == NodeClass::Pocket)
        .map(|(i, _)| i)
        .collect();

    let class_branch = |tape: &mut Tape, rows: &[usize], table: NodeId| {
        if rows.is_empty() {
            return (None, None);
        }
        let dirs = tape.gather_rows(feat_dir, rows.to_vec());
        let sims = tape.matmul_nt(dirs, table);
        let logits = tape.scale(sims, kap);
        let probs = tape.softmax_rows(logits);
        let mean = tape.matmul(probs, table);
        let scattered = tape.scatter_add_rows(mean, rows.to_vec(), n);
        (Some(logits), Some(scattered))
    };
    let (logits_ligand, mean_ligand) = class_branch(tape, &ligand_rows, table_ligand);
    let (logits_pocket, mean_pocket) = class_branch(tape, &pocket_rows, table_pocket);

    let x0_feats = match (mean_ligand, mean_pocket) {
        (Some(a), Some(b)) => tape.add(a, b),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("graph has nodes of neither class"),
    };

    let x0_full = tape.concat_cols(coord_hat, x0_feats);

    Ok(TapeForward {
        coords_in,
        feats_in,
        coord_hat,
        feat_dir,
        logits_ligand,
        logits_pocket,
        x0_feats,
        x0_full,
        param_ids: wiring.param_ids.clone(),
        table_ligand,
        table_pocket,
        ligand_rows,
        pocket_rows,
    })
}

/// One forward evaluation without gradients.
pub fn forward(
    state: &JointState,
    t: f64,
    params: &DenoiserParams,
    tables: &PrototypeTables,
    classes: &[NodeClass],
    schedule: &Schedule,
) -> Result<DenoiserOutput> {
    let mut tape = Tape::new();
    let fwd = build_forward(
        &mut tape,
        &state.coords,
        &state.feats,
        classes,
        t,
        params,
        tables,
        schedule,
    )?;
    Ok(extract_output(&tape, &fwd, classes.len()))
}

pub fn extract_output(tape: &Tape, fwd: &TapeForward, n: usize) -> DenoiserOutput {
    let mut logits: Vec<Vec<f64>> = vec![Vec::new(); n];
    if let Some(id) = fwd.logits_ligand {
        let m = tape.value(id);
        for (r, &node) in fwd.ligand_rows.iter().enumerate() {
            logits[node] = m.row(r).to_vec();
        }
    }
    if let Some(id) = fwd.logits_pocket {
        let m = tape.value(id);
        for (r, &node) in fwd.pocket_rows.iter().enumerate() {
            logits[node] = m.row(r).to_vec();
        }
    }
    DenoiserOutput {
        coord_hat: tape.value(fwd.coord_hat).clone(),
        feat_dir: tape.value(fwd.feat_dir).clone(),
        logits,
        x0_feats: tape.value(fwd.x0_feats).clone(),
    }
}

/// Softmax mixture of prototype rows: row i is `sum_k softmax(logits_i)_k e_k`.
pub fn posterior_mean_embedding(logits: &Mat, table: &Mat) -> Mat {
    assert_eq!(logits.cols(), table.rows(), "logits width must match alphabet");
    let mut out = Mat::zeros(logits.rows(), table.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (k, w) in weights.iter().enumerate() {
            let p = w / total;
            for (o, e) in out.row_mut(r).iter_mut().zip(table.row(k)) {
                *o += p * e;
            }
        }
    }
    out
}

/// Cosine logits of unit feature directions against a prototype table.
pub fn cosine_logits(
    feat_dir: &Mat,
    table: &Mat,
    schedule: &Schedule,
    t: f64,
    mode: TemperatureMode,
) -> Mat {
    feat_dir.matmul_nt(table).scaled(kappa(schedule, t, mode))
}

/// Interpolated score `(x0_hat - x_t) / sigma^2` over the joint state; the
/// coordinate block is re-projected so the score stays COM-free.
pub fn interpolated_score(state: &JointState, x0_hat: &JointState, sigma: f64) -> Result<JointState> {
    if sigma <= 0.0 {
        return Err(CoreError::validation(format!("sigma must be positive, got {sigma}")));
    }
    let inv = 1.0 / (sigma * sigma);
    let coords = com_project(&x0_hat.coords.subbed(&state.coords)).scaled(inv);
    let feats = x0_hat.feats.subbed(&state.feats).scaled(inv);
    Ok(JointState { coords, feats, t: state.t })
}
