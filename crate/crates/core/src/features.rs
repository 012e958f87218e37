//! Trajectory statistics for downstream density-ratio detection.
//!
//! Each likelihood integration leaves a full [`TrajectoryRecord`]; this
//! module condenses it into 19 named reals describing the shape of the flow:
//! how far and how straight the state travels, how large and how bursty the
//! vector field is, how stiff the dynamics are, how the coordinate and
//! feature blocks co-move, and how much the ligand-pocket geometry changes
//! along the way. The exact formulas are fixed here and mirrored in the CSV
//! header, so feature files from different runs stay comparable as long as
//! the recorded grid parameters match (see [`FeatureRunMetadata`]).
//!
//! Sign conventions: series indexed by grid point use all `T+1` states,
//! series indexed by step use the `T` increments between them, and the
//! difference series used for the coupling statistics has `T-1` entries,
//! which is why records need at least three time points.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::graph::NodeClass;
use crate::mat::Mat;
use crate::pfode::{DivergenceMethod, ProbeKind, TrajectoryRecord};

/// Column order of every feature matrix and CSV produced by this crate.
pub const FEATURE_NAMES: [&str; 19] = [
    "log_likelihood",
    "path_tortuosity",
    "path_efficiency",
    "vf_l2_std",
    "vf_l2_max",
    "vf_l2_mean",
    "mean_acceleration",
    "mean_lipschitz",
    "max_lipschitz",
    "coupling_consistency",
    "total_flow_energy",
    "vf_spikiness",
    "total_angular_deviation",
    "max_intermol_change",
    "smoothness_score",
    "coord_feature_ratio",
    "dynamic_coord_feature_coupling",
    "mean_com_drift",
    "max_com_drift",
];

/// Reported tortuosity when the chord degenerates to zero length.
pub const TORTUOSITY_CAP: f64 = 1e6;

const EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub log_likelihood: f64,
    pub path_tortuosity: f64,
    pub path_efficiency: f64,
    pub vf_l2_std: f64,
    pub vf_l2_max: f64,
    pub vf_l2_mean: f64,
    pub mean_acceleration: f64,
    pub mean_lipschitz: f64,
    pub max_lipschitz: f64,
    pub coupling_consistency: f64,
    pub total_flow_energy: f64,
    pub vf_spikiness: f64,
    pub total_angular_deviation: f64,
    pub max_intermol_change: f64,
    pub smoothness_score: f64,
    pub coord_feature_ratio: f64,
    pub dynamic_coord_feature_coupling: f64,
    pub mean_com_drift: f64,
    pub max_com_drift: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; 19] {
        [
            self.log_likelihood,
            self.path_tortuosity,
            self.path_efficiency,
            self.vf_l2_std,
            self.vf_l2_max,
            self.vf_l2_mean,
            self.mean_acceleration,
            self.mean_lipschitz,
            self.max_lipschitz,
            self.coupling_consistency,
            self.total_flow_energy,
            self.vf_spikiness,
            self.total_angular_deviation,
            self.max_intermol_change,
            self.smoothness_score,
            self.coord_feature_ratio,
            self.dynamic_coord_feature_coupling,
            self.mean_com_drift,
            self.max_com_drift,
        ]
    }

    pub fn from_array(a: [f64; 19]) -> FeatureVector {
        FeatureVector {
            log_likelihood: a[0],
            path_tortuosity: a[1],
            path_efficiency: a[2],
            vf_l2_std: a[3],
            vf_l2_max: a[4],
            vf_l2_mean: a[5],
            mean_acceleration: a[6],
            mean_lipschitz: a[7],
            max_lipschitz: a[8],
            coupling_consistency: a[9],
            total_flow_energy: a[10],
            vf_spikiness: a[11],
            total_angular_deviation: a[12],
            max_intermol_change: a[13],
            smoothness_score: a[14],
            coord_feature_ratio: a[15],
            dynamic_coord_feature_coupling: a[16],
            mean_com_drift: a[17],
            max_com_drift: a[18],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va < EPS || vb < EPS {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

fn mean_intermolecular_distance(coords: &Mat, ligand: &[usize], pocket: &[usize]) -> f64 {
    let mut total = 0.0;
    for &i in ligand {
        for &j in pocket {
            let ri = coords.row(i);
            let rj = coords.row(j);
            let d2: f64 = (0..3).map(|c| (ri[c] - rj[c]).powi(2)).sum();
            total += d2.sqrt();
        }
    }
    total / (ligand.len() * pocket.len()) as f64
}

/// Condense one stored trajectory into the 19 statistics. `classes` labels
/// the nodes of the underlying graph and drives the ligand-pocket distance
/// feature; records with fewer than three time points are rejected because
/// the coupling statistics difference a step series.
pub fn compute_features(rec: &TrajectoryRecord, classes: &[NodeClass]) -> Result<FeatureVector> {
    let k_pts = rec.times.len();
    if k_pts < 3 {
        return Err(CoreError::validation(format!(
            "trajectory has {k_pts} time points, need at least 3"
        )));
    }
    if rec.states.len() != k_pts || rec.drifts.len() != k_pts {
        return Err(CoreError::validation(
            "trajectory states/drifts do not match the time grid",
        ));
    }
    let steps = k_pts - 1;
    if rec.predictor_drifts.len() != steps || rec.com_drifts.len() != steps {
        return Err(CoreError::validation(
            "trajectory per-step series do not match the time grid",
        ));
    }
    let n = rec.states[0].n_nodes();
    if classes.len() != n {
        return Err(CoreError::validation(format!(
            "class layout has {} nodes, trajectory has {n}",
            classes.len()
        )));
    }

    let increments: Vec<crate::graph::JointState> = (0..steps)
        .map(|k| rec.states[k + 1].added_scaled(&rec.states[k], -1.0))
        .collect();
    let step_norms: Vec<f64> = increments.iter().map(|dx| dx.norm()).collect();
    let path_len: f64 = step_norms.iter().sum();
    let chord = rec.states[k_pts - 1].added_scaled(&rec.states[0], -1.0).norm();

    let (path_tortuosity, path_efficiency) = if chord < EPS {
        (TORTUOSITY_CAP, 1.0 / TORTUOSITY_CAP)
    } else {
        ((path_len / chord).max(1.0), (chord / path_len).min(1.0))
    };

    let vf: Vec<f64> = rec.drifts.iter().map(|f| f.norm()).collect();
    let vf_l2_mean = mean(&vf);
    let vf_l2_max = vf.iter().cloned().fold(0.0, f64::max);
    let vf_l2_std = mean(&vf.iter().map(|v| (v - vf_l2_mean).powi(2)).collect::<Vec<_>>()).sqrt();
    let vf_spikiness = vf_l2_max / (vf_l2_mean + EPS);

    let mut accels = Vec::with_capacity(steps);
    let mut lipschitz = Vec::with_capacity(steps);
    let mut angular = 0.0;
    let mut flow_energy = 0.0;
    for k in 0..steps {
        let df = rec.drifts[k + 1].added_scaled(&rec.drifts[k], -1.0);
        let dfn = df.norm();
        let dt = rec.times[k + 1] - rec.times[k];
        accels.push(dfn / dt);
        lipschitz.push(dfn / (step_norms[k] + EPS));
        let na = vf[k];
        let nb = vf[k + 1];
        if na > EPS && nb > EPS {
            // atan2 form of the angle between unit vectors: exact for
            // parallel inputs and stable near 0 and pi
            let ua = rec.drifts[k].scaled(1.0 / na);
            let ub = rec.drifts[k + 1].scaled(1.0 / nb);
            let diff = ua.added_scaled(&ub, -1.0).norm();
            let sum = ua.added_scaled(&ub, 1.0).norm();
            angular += 2.0 * diff.atan2(sum);
        }
        flow_energy += rec.drifts[k].dot(&increments[k]);
    }
    let mean_acceleration = mean(&accels);
    let mean_lipschitz = mean(&lipschitz);
    let max_lipschitz = lipschitz.iter().cloned().fold(0.0, f64::max);
    let smoothness_score = 1.0 / (1.0 + mean_acceleration);

    let coord_steps: Vec<f64> = increments.iter().map(|dx| dx.coords.frobenius_norm()).collect();
    let feat_steps: Vec<f64> = increments.iter().map(|dx| dx.feats.frobenius_norm()).collect();
    let coord_feature_ratio = mean(&coord_steps) / (mean(&feat_steps) + EPS);
    let d_coord: Vec<f64> = (0..steps - 1).map(|k| coord_steps[k + 1] - coord_steps[k]).collect();
    let d_feat: Vec<f64> = (0..steps - 1).map(|k| feat_steps[k + 1] - feat_steps[k]).collect();
    let dynamic_coord_feature_coupling = pearson(&d_coord, &d_feat);
    let consistent = d_coord
        .iter()
        .zip(&d_feat)
        .filter(|(c, e)| c.signum() == e.signum())
        .count();
    let coupling_consistency = consistent as f64 / d_coord.len() as f64;

    let ligand: Vec<usize> = (0..n).filter(|&i| classes[i] == NodeClass::Ligand).collect();
    let pocket: Vec<usize> = (0..n).filter(|&i| classes[i] == NodeClass::Pocket).collect();
    let max_intermol_change = if ligand.is_empty() || pocket.is_empty() {
        0.0
    } else {
        let d0 = mean_intermolecular_distance(&rec.states[0].coords, &ligand, &pocket);
        rec.states
            .iter()
            .map(|s| (mean_intermolecular_distance(&s.coords, &ligand, &pocket) - d0).abs())
            .fold(0.0, f64::max)
    };

    let mean_com_drift = mean(&rec.com_drifts);
    let max_com_drift = rec.com_drifts.iter().cloned().fold(0.0, f64::max);

    let out = FeatureVector {
        log_likelihood: rec.loglik,
        path_tortuosity,
        path_efficiency,
        vf_l2_std,
        vf_l2_max,
        vf_l2_mean,
        mean_acceleration,
        mean_lipschitz,
        max_lipschitz,
        coupling_consistency,
        total_flow_energy: flow_energy,
        vf_spikiness,
        total_angular_deviation: angular,
        max_intermol_change,
        smoothness_score,
        coord_feature_ratio,
        dynamic_coord_feature_coupling,
        mean_com_drift,
        max_com_drift,
    };
    if !out.is_finite() {
        return Err(CoreError::numerical("trajectory features are not finite"));
    }
    Ok(out)
}

/// Stack feature vectors into an N x 19 matrix in the fixed column order.
pub fn feature_matrix(rows: &[FeatureVector]) -> Result<Mat> {
    if rows.is_empty() {
        return Err(CoreError::validation("no feature rows"));
    }
    if let Some(bad) = rows.iter().position(|r| !r.is_finite()) {
        return Err(CoreError::validation(format!(
            "feature row {bad} is not finite"
        )));
    }
    let mut m = Mat::zeros(rows.len(), 19);
    for (i, row) in rows.iter().enumerate() {
        m.row_mut(i).copy_from_slice(&row.to_array());
    }
    Ok(m)
}

/// Sidecar describing how a feature file was produced. Scores from two files
/// are only comparable when these fingerprints match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRunMetadata {
    pub grid_steps: usize,
    pub probes: usize,
    pub probe_kind: ProbeKind,
    pub divergence: DivergenceMethod,
    pub seed: u64,
    pub checkpoint_hash: String,
    pub feature_names: Vec<String>,
}

impl FeatureRunMetadata {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FeatureRunMetadata> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Write an id column plus the 19 features per row. Floats use the shortest
/// decimal encoding that parses back to the same bits.
pub fn write_features_csv(path: &Path, ids: &[String], rows: &[FeatureVector]) -> Result<()> {
    if ids.len() != rows.len() {
        return Err(CoreError::validation(format!(
            "{} ids for {} feature rows",
            ids.len(),
            rows.len()
        )));
    }
    if let Some(bad) = ids.iter().position(|id| id.contains(',') || id.contains('\n')) {
        return Err(CoreError::validation(format!(
            "id {:?} contains a CSV delimiter",
            ids[bad]
        )));
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "id,{}", FEATURE_NAMES.join(","))?;
    for (id, row) in ids.iter().zip(rows) {
        if !row.is_finite() {
            return Err(CoreError::validation(format!("row {id} is not finite")));
        }
        let cells: Vec<String> = row.to_array().iter().map(|v| format!("{v}")).collect();
        writeln!(file, "{id},{}", cells.join(","))?;
    }
    file.flush()?;
    Ok(())
}

/// Read a feature CSV written by [`write_features_csv`].
pub fn read_features_csv(path: &Path) -> Result<(Vec<String>, Vec<FeatureVector>)> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| CoreError::validation("empty feature file"))??;
    let expected = format!("id,{}", FEATURE_NAMES.join(","));
    if header != expected {
        return Err(CoreError::validation(format!(
            "unexpected feature header {header:?}"
        )));
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 20 {
            return Err(CoreError::validation(format!(
                "row {}: expected 20 cells, got {}",
                lineno + 2,
                cells.len()
            )));
        }
        let mut vals = [0.0; 19];
        for (j, cell) in cells[1..].iter().enumerate() {
            vals[j] = cell.parse::<f64>().map_err(|_| {
                CoreError::validation(format!("row {}: bad number {cell:?}", lineno + 2))
            })?;
        }
        ids.push(cells[0].to_string());
        rows.push(FeatureVector::from_array(vals));
    }
    Ok((ids, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{com_project, JointState};
    use crate::pfode::{
        log_likelihood_model, DivergenceMethod, IsotropicGaussianModel, LikelihoodOptions,
        ProbeKind,
    };
    use crate::rng::stream;
    use crate::schedule::Schedule;
    use crate::testutil::{gaussian_mat, random_rotation};
    use approx::assert_relative_eq;

    fn line_record(k_pts: usize) -> TrajectoryRecord {
        let base = JointState {
            coords: com_project(&Mat::from_rows(&[
                vec![1.0, 0.0, 0.0],
                vec![-1.0, 0.0, 0.0],
            ])),
            feats: Mat::from_rows(&[vec![0.5, -0.5], vec![0.25, 0.75]]),
            t: 0.0,
        };
        let step = JointState {
            coords: com_project(&Mat::from_rows(&[
                vec![0.1, 0.2, 0.0],
                vec![-0.1, -0.2, 0.0],
            ])),
            feats: Mat::from_rows(&[vec![0.05, 0.0], vec![0.0, -0.05]]),
            t: 0.0,
        };
        let drift = step.scaled(3.0);
        let times: Vec<f64> = (0..k_pts).map(|k| 0.001 + k as f64 * 0.05).collect();
        let states: Vec<JointState> = (0..k_pts)
            .map(|k| {
                let mut s = base.added_scaled(&step, k as f64);
                s.t = times[k];
                s
            })
            .collect();
        TrajectoryRecord {
            times,
            states,
            drifts: vec![drift.clone(); k_pts],
            predictor_drifts: vec![drift; k_pts - 1],
            div_estimates: vec![0.0; k_pts - 1],
            com_drifts: vec![0.0; k_pts - 1],
            loglik: -12.34567890123,
            n_probes: 1,
        }
    }

    fn oracle_record() -> (TrajectoryRecord, Vec<NodeClass>) {
        let schedule = Schedule::new(0.05, 8.0, 1.0).unwrap();
        let model = IsotropicGaussianModel {
            n_nodes: 4,
            feat_dim: 3,
            s2: 1.2,
            schedule: &schedule,
        };
        let mut rng = stream(11, "feat-oracle");
        let state0 = JointState {
            coords: com_project(&gaussian_mat(4, 3, &mut rng)),
            feats: gaussian_mat(4, 3, &mut rng),
            t: 0.0,
        };
        let opts = LikelihoodOptions {
            steps: 16,
            probes: 1,
            probe_kind: ProbeKind::Rademacher,
            method: DivergenceMethod::Exact,
        };
        let rec = log_likelihood_model(&model, &state0, &schedule, &opts, &mut rng).unwrap();
        let classes = vec![
            NodeClass::Ligand,
            NodeClass::Ligand,
            NodeClass::Pocket,
            NodeClass::Pocket,
        ];
        (rec, classes)
    }

    #[test]
    fn straight_line_with_constant_drift() {
        let rec = line_record(11);
        let classes = vec![NodeClass::Ligand, NodeClass::Pocket];
        let f = compute_features(&rec, &classes).unwrap();
        assert_relative_eq!(f.path_tortuosity, 1.0, epsilon = 1e-12);
        assert_relative_eq!(f.path_efficiency, 1.0, epsilon = 1e-12);
        assert_eq!(f.total_angular_deviation, 0.0);
        assert_relative_eq!(f.vf_spikiness, 1.0, epsilon = 1e-9);
        assert_eq!(f.log_likelihood, -12.34567890123);
        assert_eq!(f.mean_acceleration, 0.0);
        assert_eq!(f.smoothness_score, 1.0);
        assert_eq!(f.mean_com_drift, 0.0);
        // constant increments: every step-norm difference is ~0, signum
        // matches on both blocks
        assert_relative_eq!(f.coupling_consistency, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_spike_dominates_spikiness() {
        let mut rec = line_record(11);
        for (k, drift) in rec.drifts.iter_mut().enumerate() {
            let scale = if k == 5 { 10.0 } else { 1.0 };
            *drift = drift.scaled(scale / drift.norm());
        }
        let classes = vec![NodeClass::Ligand, NodeClass::Pocket];
        let f = compute_features(&rec, &classes).unwrap();
        assert!(f.vf_spikiness > 5.0 && f.vf_spikiness <= 10.0, "{}", f.vf_spikiness);
        assert_relative_eq!(f.vf_l2_max, 10.0, epsilon = 1e-12);
        assert_relative_eq!(f.vf_l2_mean, 20.0 / 11.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_chord_hits_cap() {
        let mut rec = line_record(5);
        // send the trajectory back to its start: positive path, zero chord
        rec.states[4] = rec.states[0].clone();
        rec.states[4].t = rec.times[4];
        rec.states[3] = rec.states[1].clone();
        rec.states[3].t = rec.times[3];
        let classes = vec![NodeClass::Ligand, NodeClass::Pocket];
        let f = compute_features(&rec, &classes).unwrap();
        assert_eq!(f.path_tortuosity, TORTUOSITY_CAP);
        assert_relative_eq!(f.path_tortuosity * f.path_efficiency, 1.0, epsilon = 1e-12);
        assert!(f.is_finite());
    }

    #[test]
    fn tortuosity_times_efficiency_is_one() {
        let (rec, classes) = oracle_record();
        let f = compute_features(&rec, &classes).unwrap();
        assert_relative_eq!(f.path_tortuosity * f.path_efficiency, 1.0, epsilon = 1e-12);
        assert!(f.path_tortuosity >= 1.0);
        assert!(f.path_efficiency > 0.0 && f.path_efficiency <= 1.0);
        assert!(f.vf_l2_max >= f.vf_l2_mean && f.vf_l2_mean >= 0.0);
        assert!(f.is_finite());
    }

    #[test]
    fn flow_energy_matches_integrator_accumulation() {
        let (rec, classes) = oracle_record();
        let f = compute_features(&rec, &classes).unwrap();
        // the Heun update makes each increment dt/2 (drift + predictor), so
        // accumulating the work during integration gives the same number
        let mut accumulated = 0.0;
        for k in 0..rec.predictor_drifts.len() {
            let dt = rec.times[k + 1] - rec.times[k];
            let mut update = rec.drifts[k].clone();
            update.add_scaled_assign(&rec.predictor_drifts[k], 1.0);
            accumulated += 0.5 * dt * rec.drifts[k].dot(&update);
        }
        assert_relative_eq!(f.total_flow_energy, accumulated, epsilon = 1e-9, max_relative = 1e-9);
    }

    #[test]
    fn permutation_invariance() {
        let (rec, classes) = oracle_record();
        let perm = [2usize, 0, 3, 1];
        let permute_state = |s: &JointState| {
            let mut coords = Mat::zeros(4, 3);
            let mut feats = Mat::zeros(4, s.feat_dim());
            for (new, &old) in perm.iter().enumerate() {
                coords.row_mut(new).copy_from_slice(s.coords.row(old));
                feats.row_mut(new).copy_from_slice(s.feats.row(old));
            }
            JointState { coords, feats, t: s.t }
        };
        let permuted = TrajectoryRecord {
            times: rec.times.clone(),
            states: rec.states.iter().map(permute_state).collect(),
            drifts: rec.drifts.iter().map(permute_state).collect(),
            predictor_drifts: rec.predictor_drifts.iter().map(permute_state).collect(),
            div_estimates: rec.div_estimates.clone(),
            com_drifts: rec.com_drifts.clone(),
            loglik: rec.loglik,
            n_probes: rec.n_probes,
        };
        let perm_classes: Vec<NodeClass> = perm.iter().map(|&old| classes[old]).collect();
        let a = compute_features(&rec, &classes).unwrap().to_array();
        let b = compute_features(&permuted, &perm_classes).unwrap().to_array();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn rotation_invariance() {
        let (rec, classes) = oracle_record();
        let mut rng = stream(12, "feat-rot");
        let rot = random_rotation(&mut rng);
        let rotate_state = |s: &JointState| JointState {
            coords: s.coords.matmul_nt(&rot),
            feats: s.feats.clone(),
            t: s.t,
        };
        let rotated = TrajectoryRecord {
            times: rec.times.clone(),
            states: rec.states.iter().map(rotate_state).collect(),
            drifts: rec.drifts.iter().map(rotate_state).collect(),
            predictor_drifts: rec.predictor_drifts.iter().map(rotate_state).collect(),
            div_estimates: rec.div_estimates.clone(),
            com_drifts: rec.com_drifts.clone(),
            loglik: rec.loglik,
            n_probes: rec.n_probes,
        };
        let a = compute_features(&rec, &classes).unwrap().to_array();
        let b = compute_features(&rotated, &classes).unwrap().to_array();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn matrix_and_csv_round_trip() {
        let (rec, classes) = oracle_record();
        let f = compute_features(&rec, &classes).unwrap();
        let m = feature_matrix(&[f, f, f]).unwrap();
        assert_eq!(m.shape(), (3, 19));
        assert_eq!(m.row(0), m.row(2));

        let dir = std::env::temp_dir().join("driftwood-feat-csv");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("features.csv");
        let ids = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        write_features_csv(&path, &ids, &[f, f, f]).unwrap();
        let (rids, rows) = read_features_csv(&path).unwrap();
        assert_eq!(rids, ids);
        for row in &rows {
            assert_eq!(row.to_array(), f.to_array());
        }
        assert!(feature_matrix(&[]).is_err());
    }

    #[test]
    fn short_or_mismatched_records_rejected() {
        let rec = line_record(2);
        assert!(compute_features(&rec, &[NodeClass::Ligand, NodeClass::Pocket]).is_err());
        let rec = line_record(5);
        assert!(compute_features(&rec, &[NodeClass::Ligand]).is_err());
    }

    #[test]
    fn metadata_sidecar_round_trip() {
        let meta = FeatureRunMetadata {
            grid_steps: 128,
            probes: 4,
            probe_kind: ProbeKind::Rademacher,
            divergence: DivergenceMethod::Vjp,
            seed: 7,
            checkpoint_hash: "abc123".into(),
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        };
        let dir = std::env::temp_dir().join("driftwood-feat-meta");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("meta.json");
        meta.save(&path).unwrap();
        assert_eq!(FeatureRunMetadata::load(&path).unwrap(), meta);
    }
}
