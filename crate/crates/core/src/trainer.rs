//! Denoiser training: noising, the two-part loss, and checkpointing.
//!
//! Each step draws one time per graph, noises the assembled state with
//! COM-projected coordinate noise, and minimizes
//!
//! ```text
//! lambda_coord * w(t) * MSE(r0_hat, r0) + lambda_ce * sum_i CE(z_i, y_i)
//! ```
//!
//! plus an optional geometric regularizer (a smooth steric repulsion on the
//! predicted coordinates, disabled by default). The prototype tables train
//! jointly with the network: their gradient flows both through the cosine
//! logits and through the clean feature block of the noised input, and every
//! optimizer step re-projects the rows back onto the unit sphere.
//!
//! The optimizer is stochastic gradient descent with momentum and global-norm
//! clipping. An optional EMA of the weights can be enabled; when it is, the
//! checkpoint stores the averaged weights.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::denoiser::{
    build_forward_wired, forward, wire_params, DenoiserConfig, DenoiserOutput, DenoiserParams,
};
use crate::error::{CoreError, Result};
use crate::graph::{
    assemble_state, com_project, com_project_in_place, renormalize_rows, ComplexGraph, NodeClass,
    PrototypeTables,
};
use crate::mat::Mat;
use crate::rng::{stream, stream_indexed};
use crate::schedule::Schedule;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lambda")]
    pub lambda_coord: f64,
    #[serde(default = "default_lambda")]
    pub lambda_ce: f64,
    #[serde(default)]
    pub lambda_geom: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub ema_decay: Option<f64>,
    /// Stop after this many epochs without a new best validation loss.
    #[serde(default)]
    pub patience: Option<usize>,
}

fn default_learning_rate() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    16
}
fn default_lambda() -> f64 {
    1.0
}
fn default_max_epochs() -> usize {
    100
}
fn default_momentum() -> f64 {
    0.9
}
fn default_grad_clip() -> f64 {
    10.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            lambda_coord: default_lambda(),
            lambda_ce: default_lambda(),
            lambda_geom: 0.0,
            max_epochs: default_max_epochs(),
            seed: 0,
            momentum: default_momentum(),
            grad_clip: default_grad_clip(),
            ema_decay: None,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(CoreError::validation("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(CoreError::validation("batch_size must be at least 1"));
        }
        if self.lambda_coord < 0.0 || self.lambda_ce < 0.0 || self.lambda_geom < 0.0 {
            return Err(CoreError::validation("loss weights must be non-negative"));
        }
        if self.max_epochs == 0 {
            return Err(CoreError::validation("max_epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::validation("momentum must lie in [0, 1)"));
        }
        if self.grad_clip <= 0.0 {
            return Err(CoreError::validation("grad_clip must be positive"));
        }
        if let Some(g) = self.ema_decay {
            if !(0.0..1.0).contains(&g) {
                return Err(CoreError::validation("ema_decay must lie in (0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub total: f64,
    pub coord: f64,
    pub ce: f64,
    pub geom: f64,
}

/// Momentum buffers (and the optional EMA shadow) for the network tensors
/// followed by the ligand and pocket prototype tables.
pub struct OptState {
    velocity: Vec<Mat>,
    ema: Option<Vec<Mat>>,
}

impl OptState {
    pub fn new(params: &DenoiserParams, tables: &PrototypeTables, with_ema: bool) -> Self {
        let shapes: Vec<Mat> = params
            .tensors()
            .into_iter()
            .chain([&tables.ligand, &tables.pocket])
            .map(|m| Mat::zeros(m.rows(), m.cols()))
            .collect();
        let ema = with_ema.then(|| {
            params
                .tensors()
                .into_iter()
                .chain([&tables.ligand, &tables.pocket])
                .cloned()
                .collect()
        });
        OptState { velocity: shapes, ema }
    }
}

/// Numerically stable cross-entropy of one logit row against a label index.
pub fn cross_entropy_row(logits: &[f64], label: usize) -> f64 {
    assert!(label < logits.len(), "label out of range");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn geom_penalty(coord_hat: &Mat) -> f64 {
    let n = coord_hat.rows();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = coord_hat.at(i, c) - coord_hat.at(j, c);
                d2 += d * d;
            }
            total += 1.0 / ((d2 + 1e-12).sqrt() + 1.0);
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Loss of one forward output against its clean targets, all weights applied.
pub fn supervised_loss(
    out: &DenoiserOutput,
    r0: &Mat,
    types: &[usize],
    t: f64,
    schedule: &Schedule,
    config: &TrainConfig,
) -> StepLosses {
    let n = r0.rows();
    let mut sse = 0.0;
    for (a, b) in out.coord_hat.data().iter().zip(r0.data()) {
        sse += (a - b) * (a - b);
    }
    let coord = config.lambda_coord * schedule.loss_weight(t) * sse / (3 * n) as f64;
    let ce_raw: f64 = types
        .iter()
        .enumerate()
        .map(|(i, &y)| cross_entropy_row(&out.logits[i], y))
        .sum();
    let ce = config.lambda_ce * ce_raw;
    let geom = if config.lambda_geom > 0.0 {
        config.lambda_geom * geom_penalty(&out.coord_hat)
    } else {
        0.0
    };
    StepLosses { total: coord + ce + geom, coord, ce, geom }
}

/// One optimizer step over a batch of graphs.
///
/// Draws a fresh time and noise realization per graph, accumulates gradients
/// for the network and both prototype tables, clips the global norm, applies
/// momentum SGD, and re-projects prototype rows to unit norm. A non-finite
/// loss or gradient rejects the whole step and leaves the parameters alone.
pub fn training_step(
    params: &mut DenoiserParams,
    tables: &mut PrototypeTables,
    opt: &mut OptState,
    batch: &[&ComplexGraph],
    schedule: &Schedule,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(CoreError::validation("empty training batch"));
    }
    let d = params.feat_dim;
    let inv_batch = 1.0 / batch.len() as f64;
    let n_tensors = params.tensors().len() + 2;
    let mut acc: Vec<Option<Mat>> = vec![None; n_tensors];
    let mut losses = StepLosses { total: 0.0, coord: 0.0, ce: 0.0, geom: 0.0 };
    let mut drawn = Vec::with_capacity(batch.len());

    for graph in batch {
        let n = graph.n_nodes();
        let t = schedule.sample_time(rng);
        drawn.push((graph.id.clone(), t));
        let sigma = schedule.sigma(t);
        let w = schedule.loss_weight(t);

        let r0 = com_project(&graph.coords_mat());
        let mut eps_c = Mat::zeros(n, 3);
        for v in eps_c.data_mut().iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        com_project_in_place(&mut eps_c);
        let xt_coords = r0.added(&eps_c.scaled(sigma));
        let mut feat_noise = Mat::zeros(n, d);
        for v in feat_noise.data_mut().iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) * sigma;
        }

        let mut tape = Tape::new();
        let wiring = wire_params(&mut tape, params, tables);

        // clean feature block gathered from the table leaves, so the tables
        // receive the input-embedding gradient as well as the logit gradient
        let mut feats0 = None;
        for (class, table_id) in [
            (NodeClass::Ligand, wiring.table_ligand),
            (NodeClass::Pocket, wiring.table_pocket),
        ] {
            let rows = graph.class_indices(class);
            if rows.is_empty() {
                continue;
            }
            let labels: Vec<usize> = rows.iter().map(|&i| graph.types[i]).collect();
            let gathered = tape.gather_rows(table_id, labels);
            let placed = tape.scatter_add_rows(gathered, rows, n);
            feats0 = Some(match feats0 {
                None => placed,
                Some(prev) => tape.add(prev, placed),
            });
        }
        let feats0 = feats0.expect("graph has at least one node");
        let noise_leaf = tape.leaf(feat_noise);
        let feats_in = tape.add(feats0, noise_leaf);
        let coords_in = tape.leaf(xt_coords);

        let fwd = build_forward_wired(
            &mut tape, &wiring, coords_in, feats_in, &graph.classes, t, params, schedule,
        )
        .map_err(|e| step_rejected(&drawn, e))?;

        let r0_leaf = tape.leaf(r0.clone());
        let diff = tape.sub(fwd.coord_hat, r0_leaf);
        let row_sq = tape.row_sum_sq(diff);
        let sse = tape.sum_all(row_sq);
        let mse = tape.scale(sse, 1.0 / (3 * n) as f64);
        let coord_term = tape.scale(mse, config.lambda_coord * w);

        let mut ce_sum = None;
        for (logits, rows) in [
            (fwd.logits_ligand, &fwd.ligand_rows),
            (fwd.logits_pocket, &fwd.pocket_rows),
        ] {
            let Some(logits) = logits else { continue };
            let labels: Vec<usize> = rows.iter().map(|&i| graph.types[i]).collect();
            let lse = tape.log_sum_exp_rows(logits);
            let picked = tape.pick_per_row(logits, labels);
            let ce = tape.sub(lse, picked);
            let total = tape.sum_all(ce);
            ce_sum = Some(match ce_sum {
                None => total,
                Some(prev) => tape.add(prev, total),
            });
        }
        let ce_term = tape.scale(ce_sum.expect("at least one class branch"), config.lambda_ce);

        let mut loss = tape.add(coord_term, ce_term);
        let mut geom_value = 0.0;
        if config.lambda_geom > 0.0 {
            // smooth steric repulsion on the predicted coordinates
            let n_edges = fwd.ligand_rows.len() + fwd.pocket_rows.len();
            let mut src = Vec::with_capacity(n_edges * (n - 1));
            let mut dst = Vec::with_capacity(n_edges * (n - 1));
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        src.push(i);
                        dst.push(j);
                    }
                }
            }
            let pair_count = src.len();
            let a = tape.gather_rows(fwd.coord_hat, src);
            let b = tape.gather_rows(fwd.coord_hat, dst);
            let dvec = tape.sub(a, b);
            let d2 = tape.row_sum_sq(dvec);
            let dist = tape.sqrt_shift(d2, 1e-12);
            let rep = tape.recip_shift(dist, 1.0);
            let rep_sum = tape.sum_all(rep);
            let geom_term = tape.scale(rep_sum, config.lambda_geom / pair_count as f64);
            geom_value = tape.value(geom_term).item();
            loss = tape.add(loss, geom_term);
        }

        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(step_rejected(
                &drawn,
                CoreError::numerical(format!("non-finite loss {loss_value}")),
            ));
        }
        losses.total += loss_value * inv_batch;
        losses.coord += tape.value(coord_term).item() * inv_batch;
        losses.ce += tape.value(ce_term).item() * inv_batch;
        losses.geom += geom_value * inv_batch;

        let grads = tape.backward(loss, Mat::scalar(inv_batch));
        let grad_ids = wiring
            .param_ids
            .iter()
            .chain([&wiring.table_ligand, &wiring.table_pocket]);
        for (slot, &id) in acc.iter_mut().zip(grad_ids) {
            let g = grads.get_or_zeros(id, tape.value(id));
            match slot {
                None => *slot = Some(g),
                Some(prev) => prev.add_assign(&g),
            }
        }
    }

    let acc: Vec<Mat> = acc.into_iter().map(|g| g.expect("batch non-empty")).collect();
    let norm_sq: f64 = acc.iter().map(|g| g.frobenius_norm().powi(2)).sum();
    if !norm_sq.is_finite() {
        return Err(step_rejected(
            &drawn,
            CoreError::numerical("non-finite gradient".to_string()),
        ));
    }
    let norm = norm_sq.sqrt();
    let clip_scale = if norm > config.grad_clip {
        config.grad_clip / norm
    } else {
        1.0
    };

    {
        let mut slots = params.tensors_mut();
        slots.push(&mut tables.ligand);
        slots.push(&mut tables.pocket);
        for ((slot, v), g) in slots.iter_mut().zip(&mut opt.velocity).zip(&acc) {
            v.scale_assign(config.momentum);
            v.add_scaled_assign(g, clip_scale);
            slot.add_scaled_assign(v, -config.learning_rate);
        }
        if let Some(ema) = &mut opt.ema {
            let gamma = config.ema_decay.expect("ema state implies decay");
            for (shadow, slot) in ema.iter_mut().zip(&slots) {
                shadow.scale_assign(gamma);
                shadow.add_scaled_assign(slot, 1.0 - gamma);
            }
        }
    }
    renormalize_rows(&mut tables.ligand);
    renormalize_rows(&mut tables.pocket);
    Ok(losses)
}

fn step_rejected(drawn: &[(String, f64)], cause: CoreError) -> CoreError {
    let batch: Vec<String> = drawn.iter().map(|(id, t)| format!("{id} (t={t:.4})")).collect();
    CoreError::numerical(format!(
        "training step rejected, parameters unchanged: {cause}; batch so far: [{}]",
        batch.join(", ")
    ))
}

/// Mean loss over a dataset with freshly drawn times and noise.
pub fn eval_loss(
    graphs: &[ComplexGraph],
    params: &DenoiserParams,
    tables: &PrototypeTables,
    schedule: &Schedule,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    if graphs.is_empty() {
        return Err(CoreError::validation("empty evaluation set"));
    }
    let mut total = 0.0;
    for graph in graphs {
        let t = schedule.sample_time(rng);
        let sigma = schedule.sigma(t);
        let clean = assemble_state(graph, tables)?;
        let mut state = clean.clone();
        let mut eps_c = Mat::zeros(graph.n_nodes(), 3);
        for v in eps_c.data_mut().iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        com_project_in_place(&mut eps_c);
        state.coords.add_scaled_assign(&eps_c, sigma);
        for v in state.feats.data_mut().iter_mut() {
            *v += rng.sample::<f64, _>(StandardNormal) * sigma;
        }
        state.t = t;
        let out = forward(&state, t, params, tables, &graph.classes, schedule)?;
        let step = supervised_loss(&out, &clean.coords, &graph.types, t, schedule, config);
        total += step.total;
    }
    Ok(total / graphs.len() as f64)
}

pub const CHECKPOINT_VERSION: &str = "driftwood-checkpoint-v1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Self-describing training artifact: everything needed to rebuild the model
/// and reproduce the run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub schedule: Schedule,
    pub config: TrainConfig,
    pub denoiser: DenoiserParams,
    pub tables: PrototypeTables,
    pub seed: u64,
    pub initial_val_loss: f64,
    pub history: Vec<EpochMetrics>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CoreError::validation(format!(
                "unsupported checkpoint version {:?}, expected {:?}",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        if !ckpt.denoiser.is_finite() {
            return Err(CoreError::validation("checkpoint parameters are not finite"));
        }
        ckpt.tables.validate()?;
        Ok(ckpt)
    }
}

/// Full training loop: deterministic given the config seed.
///
/// Every stochastic draw comes from a stream keyed by purpose and step or
/// epoch index, so runs with the same seed produce bit-identical metric
/// histories regardless of how work is scheduled.
pub fn fit(
    train: &[ComplexGraph],
    val: &[ComplexGraph],
    tables_init: &PrototypeTables,
    schedule: &Schedule,
    dconfig: DenoiserConfig,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::validation("training and validation sets must be non-empty"));
    }
    tables_init.validate()?;
    for g in train.iter().chain(val) {
        g.validate_against(tables_init)?;
    }

    let mut params = DenoiserParams::init(
        dconfig,
        tables_init.dim(),
        &mut stream(config.seed, "param-init"),
    );
    let mut tables = tables_init.clone();
    let mut opt = OptState::new(&params, &tables, config.ema_decay.is_some());

    let initial_val_loss = eval_loss(
        val,
        &params,
        &tables,
        schedule,
        config,
        &mut stream_indexed(config.seed, "val", 0),
    )?;

    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut step_counter = 0u64;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_indexed(config.seed, "shuffle", epoch as u64));

        let mut epoch_total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ComplexGraph> = chunk.iter().map(|&i| &train[i]).collect();
            let mut rng = stream_indexed(config.seed, "train-step", step_counter);
            step_counter += 1;
            let step = training_step(
                &mut params, &mut tables, &mut opt, &batch, schedule, config, &mut rng,
            )?;
            epoch_total += step.total;
            steps += 1;
        }

        let val_loss = eval_loss(
            val,
            &params,
            &tables,
            schedule,
            config,
            &mut stream_indexed(config.seed, "val", epoch as u64),
        )?;
        history.push(EpochMetrics {
            epoch,
            train_loss: epoch_total / steps as f64,
            val_loss,
        });

        if val_loss < best {
            best = val_loss;
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }

    if let Some(ema) = &opt.ema {
        let mut slots = params.tensors_mut();
        slots.push(&mut tables.ligand);
        slots.push(&mut tables.pocket);
        for (slot, shadow) in slots.iter_mut().zip(ema) {
            **slot = shadow.clone();
        }
        // averaging moves rows off the sphere; project back
        renormalize_rows(&mut tables.ligand);
        renormalize_rows(&mut tables.pocket);
    }

    Ok(Checkpoint {
        version: CHECKPOINT_VERSION.to_string(),
        schedule: *schedule,
        config: *config,
        denoiser: params,
        tables,
        seed: config.seed,
        initial_val_loss,
        history,
    })
}
