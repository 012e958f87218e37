//! Classical anomaly detectors on embedding vectors.
//!
//! Five one-class detectors (Mahalanobis distance, k-NN distance, local
//! outlier factor, isolation forest, one-class SVM) fitted on ID embeddings
//! only, plus the composite similarity formula. [`BaselineSuite`] wraps all
//! five behind a single standardizer fit on the training embeddings, maps
//! every score to the larger-is-more-anomalous convention, and runs the same
//! threshold calibration and balanced bootstrap protocol as the trajectory
//! detector.

use std::path::Path;

use nalgebra::{Cholesky, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use driftwood_core::rng::stream_indexed;
use driftwood_core::{CoreError, Mat, Result};

use crate::detector::calibrate_threshold;
use crate::linalg::to_dmatrix;
use crate::metrics::{bootstrap_evaluate, EvalReport};
use crate::preprocess::Standardizer;

/// Embedding vectors with their sample ids, one row per sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub vectors: Mat,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, vectors: Mat) -> Result<EmbeddingSet> {
        if ids.len() != vectors.rows() {
            return Err(CoreError::validation(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                vectors.rows()
            )));
        }
        if vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(CoreError::validation("embedding set is empty"));
        }
        for i in 0..vectors.rows() {
            if vectors.row(i).iter().any(|v| !v.is_finite()) {
                return Err(CoreError::validation(format!(
                    "non-finite embedding for id {}",
                    ids[i]
                )));
            }
        }
        Ok(EmbeddingSet { ids, vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    /// Reads `id,e0,e1,...` rows. The header row is required.
    pub fn read_csv(path: &Path) -> Result<EmbeddingSet> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::validation(format!("reading {}: {e}", path.display())))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| CoreError::validation(format!("{} is empty", path.display())))?;
        if header != "id" && !header.starts_with("id,") {
            return Err(CoreError::validation(format!(
                "{}: header must start with \"id\", got {header:?}",
                path.display()
            )));
        }
        let d = header.split(',').count() - 1;
        if d == 0 {
            return Err(CoreError::validation(format!(
                "{}: no embedding columns",
                path.display()
            )));
        }
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != d + 1 {
                return Err(CoreError::validation(format!(
                    "{} line {}: expected {} cells, got {}",
                    path.display(),
                    lineno + 2,
                    d + 1,
                    cells.len()
                )));
            }
            ids.push(cells[0].to_string());
            for cell in &cells[1..] {
                let v: f64 = cell.parse().map_err(|_| {
                    CoreError::validation(format!(
                        "{} line {}: bad float {cell:?}",
                        path.display(),
                        lineno + 2
                    ))
                })?;
                values.push(v);
            }
        }
        let n = ids.len();
        let mut vectors = Mat::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                vectors.set(i, j, values[i * d + j]);
            }
        }
        EmbeddingSet::new(ids, vectors)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.dim();
        let mut out = String::from("id");
        for j in 0..d {
            out.push_str(&format!(",e{j}"));
        }
        out.push('\n');
        for i in 0..self.len() {
            if self.ids[i].contains(',') || self.ids[i].contains('\n') {
                return Err(CoreError::validation(format!(
                    "id {:?} contains a delimiter",
                    self.ids[i]
                )));
            }
            out.push_str(&self.ids[i]);
            for &v in self.vectors.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out)
            .map_err(|e| CoreError::validation(format!("writing {}: {e}", path.display())))
    }
}

/// √((x−μ)ᵀ Σ⁻¹ (x−μ)) for an already-regularized covariance.
pub fn mahalanobis_score(x: &[f64], mean: &[f64], cov_reg: &Mat) -> Result<f64> {
    let d = mean.len();
    if x.len() != d {
        return Err(CoreError::validation(format!(
            "point has dim {}, mean has dim {d}",
            x.len()
        )));
    }
    if cov_reg.shape() != (d, d) {
        return Err(CoreError::validation(format!(
            "covariance is {:?}, expected ({d}, {d})",
            cov_reg.shape()
        )));
    }
    let chol = Cholesky::new(to_dmatrix(cov_reg))
        .ok_or_else(|| CoreError::validation("covariance is not positive definite"))?;
    let delta = DVector::from_iterator(d, x.iter().zip(mean).map(|(a, b)| a - b));
    let y = chol.l().solve_lower_triangular(&delta).ok_or_else(|| {
        CoreError::numerical("triangular solve failed in Mahalanobis distance")
    })?;
    Ok(y.norm())
}

/// Mean μ and regularized covariance Σ + λI fit on ID embeddings. λ is
/// raised tenfold until the Cholesky factorization succeeds; `lambda_raised`
/// records that this happened so callers can log it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MahalanobisDetector {
    pub mean: Vec<f64>,
    pub cov_reg: Mat,
    pub lambda: f64,
    pub lambda_raised: bool,
}

impl MahalanobisDetector {
    pub fn fit(train: &Mat, lambda: f64) -> Result<MahalanobisDetector> {
        let (n, d) = train.shape();
        if n < 2 {
            return Err(CoreError::validation(
                "Mahalanobis needs at least 2 training rows",
            ));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(CoreError::validation(format!("lambda must be positive, got {lambda}")));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(train.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = Mat::zeros(d, d);
        for i in 0..n {
            let row = train.row(i);
            for a in 0..d {
                let da = row[a] - mean[a];
                for b in a..d {
                    let v = cov.at(a, b) + da * (row[b] - mean[b]);
                    cov.set(a, b, v);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov.at(a, b) / (n - 1) as f64;
                cov.set(a, b, v);
                cov.set(b, a, v);
            }
        }
        let mut lam = lambda;
        let mut lambda_raised = false;
        for _ in 0..40 {
            let mut cov_reg = cov.clone();
            for a in 0..d {
                cov_reg.set(a, a, cov_reg.at(a, a) + lam);
            }
            if Cholesky::new(to_dmatrix(&cov_reg)).is_some() {
                return Ok(MahalanobisDetector {
                    mean,
                    cov_reg,
                    lambda: lam,
                    lambda_raised,
                });
            }
            lam *= 10.0;
            lambda_raised = true;
        }
        Err(CoreError::numerical(
            "covariance stayed indefinite after 40 lambda increases",
        ))
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        mahalanobis_score(x, &self.mean, &self.cov_reg)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean Euclidean distance from `x` to its k nearest training vectors.
pub fn knn_score(x: &[f64], train: &Mat, k: usize) -> Result<f64> {
    let n = train.rows();
    if k == 0 {
        return Err(CoreError::validation("k must be at least 1"));
    }
    if k > n {
        return Err(CoreError::validation(format!(
            "k={k} exceeds {n} training points"
        )));
    }
    if x.len() != train.cols() {
        return Err(CoreError::validation(format!(
            "point has dim {}, training data has dim {}",
            x.len(),
            train.cols()
        )));
    }
    let mut dists: Vec<f64> = (0..n).map(|i| euclidean(x, train.row(i))).collect();
    dists.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite distances"));
    Ok(dists[..k].iter().sum::<f64>() / k as f64)
}

/// Local outlier factor with novelty scoring: queries are ranked against the
/// fitted training set, never against each other. `score` follows the
/// convention where inliers sit near −1 (the negated LOF ratio), so the
/// suite negates it again to get larger-is-more-anomalous.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LofModel {
    train: Mat,
    k: usize,
    k_dist: Vec<f64>,
    lrd: Vec<f64>,
}

const LRD_CEILING: f64 = 1e12;

fn k_nearest(dists: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dists.len()).collect();
    idx.sort_by(|&a, &b| {
        dists[a]
            .partial_cmp(&dists[b])
            .expect("finite distances")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

impl LofModel {
    pub fn fit(train: &Mat, k: usize) -> Result<LofModel> {
        let n = train.rows();
        if k == 0 {
            return Err(CoreError::validation("k must be at least 1"));
        }
        if n < k + 1 {
            return Err(CoreError::validation(format!(
                "LOF with k={k} needs at least {} training points, got {n}",
                k + 1
            )));
        }
        if (1..n).all(|i| train.row(i) == train.row(0)) {
            return Err(CoreError::validation(
                "LOF rejects all-identical training embeddings",
            ));
        }
        let mut neighbors = Vec::with_capacity(n);
        let mut k_dist = Vec::with_capacity(n);
        for i in 0..n {
            let dists: Vec<f64> = (0..n)
                .map(|j| {
                    if j == i {
                        f64::INFINITY
                    } else {
                        euclidean(train.row(i), train.row(j))
                    }
                })
                .collect();
            let nearest = k_nearest(&dists, k);
            k_dist.push(dists[nearest[k - 1]]);
            neighbors.push(nearest);
        }
        let lrd: Vec<f64> = (0..n)
            .map(|i| {
                let mean_reach = neighbors[i]
                    .iter()
                    .map(|&o| euclidean(train.row(i), train.row(o)).max(k_dist[o]))
                    .sum::<f64>()
                    / k as f64;
                if mean_reach < 1e-12 {
                    LRD_CEILING
                } else {
                    1.0 / mean_reach
                }
            })
            .collect();
        Ok(LofModel {
            train: train.clone(),
            k,
            k_dist,
            lrd,
        })
    }

    /// Negated LOF ratio: ≈ −1 for points inside a uniform cluster, strongly
    /// below −1 for isolated points.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.train.cols() {
            return Err(CoreError::validation(format!(
                "point has dim {}, model has dim {}",
                x.len(),
                self.train.cols()
            )));
        }
        let dists: Vec<f64> = (0..self.train.rows())
            .map(|i| euclidean(x, self.train.row(i)))
            .collect();
        let nearest = k_nearest(&dists, self.k);
        let mean_reach = nearest
            .iter()
            .map(|&o| dists[o].max(self.k_dist[o]))
            .sum::<f64>()
            / self.k as f64;
        let lrd_x = if mean_reach < 1e-12 {
            LRD_CEILING
        } else {
            1.0 / mean_reach
        };
        let mean_neighbor_lrd =
            nearest.iter().map(|&o| self.lrd[o]).sum::<f64>() / self.k as f64;
        Ok(-(mean_neighbor_lrd / lrd_x))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum IsoNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IsoTree {
    nodes: Vec<IsoNode>,
}

/// Average path length of an unsuccessful BST search over n points, the
/// standard isolation-forest normalizer.
fn average_path_length(n: usize) -> f64 {
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let nf = n as f64;
            2.0 * ((nf - 1.0).ln() + EULER_GAMMA) - 2.0 * (nf - 1.0) / nf
        }
    }
}

fn build_iso_node<R: Rng>(
    data: &Mat,
    points: &mut [usize],
    depth: usize,
    limit: usize,
    nodes: &mut Vec<IsoNode>,
    rng: &mut R,
) -> usize {
    if depth >= limit || points.len() <= 1 {
        nodes.push(IsoNode::Leaf { size: points.len() });
        return nodes.len() - 1;
    }
    let d = data.cols();
    let mut candidates = Vec::with_capacity(d);
    for j in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &i in points.iter() {
            lo = lo.min(data.at(i, j));
            hi = hi.max(data.at(i, j));
        }
        if hi > lo {
            candidates.push((j, lo, hi));
        }
    }
    if candidates.is_empty() {
        nodes.push(IsoNode::Leaf { size: points.len() });
        return nodes.len() - 1;
    }
    let (feature, lo, hi) = candidates[rng.gen_range(0..candidates.len())];
    let threshold = lo + rng.gen::<f64>() * (hi - lo);
    let split = itertools_partition(points, |&i| data.at(i, feature) < threshold);
    let (left_pts, right_pts) = points.split_at_mut(split);
    let slot = nodes.len();
    nodes.push(IsoNode::Leaf { size: 0 });
    let left = build_iso_node(data, left_pts, depth + 1, limit, nodes, rng);
    let right = build_iso_node(data, right_pts, depth + 1, limit, nodes, rng);
    nodes[slot] = IsoNode::Split {
        feature,
        threshold,
        left,
        right,
    };
    slot
}

/// Stable in-place partition returning the number of elements satisfying the
/// predicate, which end up in the prefix.
fn itertools_partition<T, F: Fn(&T) -> bool>(slice: &mut [T], pred: F) -> usize {
    let mut split = 0;
    for i in 0..slice.len() {
        if pred(&slice[i]) {
            slice.swap(split, i);
            split += 1;
        }
    }
    split
}

impl IsoTree {
    fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0usize;
        loop {
            match &self.nodes[node] {
                IsoNode::Leaf { size } => {
                    return depth as f64 + average_path_length(*size);
                }
                IsoNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] < *threshold { *left } else { *right };
                    depth += 1;
                }
            }
        }
    }
}

/// Isolation forest scoring s(x) = 2^(−E[h(x)]/c(ψ)): near 1 for points the
/// trees isolate in a few splits, below ½ for typical points.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IsolationForest {
    trees: Vec<IsoTree>,
    subsample: usize,
}

impl IsolationForest {
    pub fn fit(train: &Mat, n_trees: usize, subsample: usize, seed: u64) -> Result<IsolationForest> {
        let n = train.rows();
        if n_trees == 0 {
            return Err(CoreError::validation("isolation forest needs at least 1 tree"));
        }
        if n == 0 {
            return Err(CoreError::validation("isolation forest needs training rows"));
        }
        if (1..n).all(|i| train.row(i) == train.row(0)) {
            return Err(CoreError::validation(
                "isolation forest rejects all-identical training embeddings",
            ));
        }
        let psi = subsample.min(n).max(2);
        let limit = (psi as f64).log2().ceil() as usize;
        let mut trees = Vec::with_capacity(n_trees);
        for t in 0..n_trees {
            let mut rng = stream_indexed(seed, "iforest", t as u64);
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..psi {
                let j = rng.gen_range(i..n);
                idx.swap(i, j);
            }
            idx.truncate(psi);
            let mut nodes = Vec::new();
            build_iso_node(train, &mut idx, 0, limit, &mut nodes, &mut rng);
            trees.push(IsoTree { nodes });
        }
        Ok(IsolationForest {
            trees,
            subsample: psi,
        })
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let mean_path = self
            .trees
            .iter()
            .map(|t| t.path_length(x))
            .sum::<f64>()
            / self.trees.len() as f64;
        2f64.powf(-mean_path / average_path_length(self.subsample))
    }
}

/// One-class SVM with an RBF kernel, solved by max-violating-pair updates on
/// the dual (minimize ½αᵀKα with Σα = 1, 0 ≤ αᵢ ≤ 1/(νN)). `score` is the
/// negated decision value, so inliers come out negative.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OneClassSvm {
    support: Mat,
    alpha: Vec<f64>,
    gamma: f64,
    rho: f64,
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * sq).exp()
}

impl OneClassSvm {
    pub fn fit(train: &Mat, nu: f64, gamma: f64) -> Result<OneClassSvm> {
        let n = train.rows();
        if n < 2 {
            return Err(CoreError::validation("one-class SVM needs at least 2 training rows"));
        }
        if !(nu > 0.0 && nu <= 1.0) {
            return Err(CoreError::validation(format!("nu must be in (0, 1], got {nu}")));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(CoreError::validation(format!("gamma must be positive, got {gamma}")));
        }
        if (1..n).all(|i| train.row(i) == train.row(0)) {
            return Err(CoreError::validation(
                "one-class SVM rejects all-identical training embeddings",
            ));
        }
        let c = 1.0 / (nu * n as f64);
        let mut kernel = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = rbf(train.row(i), train.row(j), gamma);
                kernel[i * n + j] = v;
                kernel[j * n + i] = v;
            }
        }
        let mut alpha = vec![1.0 / n as f64; n];
        let mut grad: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| kernel[i * n + j] * alpha[j]).sum())
            .collect();
        let slack = 1e-9 * c;
        let tol = 1e-8;
        let max_iter = 200 * n.max(100);
        for _ in 0..max_iter {
            let mut up: Option<usize> = None;
            let mut down: Option<usize> = None;
            for i in 0..n {
                if alpha[i] < c - slack && up.is_none_or(|u| grad[i] < grad[u]) {
                    up = Some(i);
                }
                if alpha[i] > slack && down.is_none_or(|d| grad[i] > grad[d]) {
                    down = Some(i);
                }
            }
            let (i, j) = match (up, down) {
                (Some(i), Some(j)) if grad[j] - grad[i] > tol => (i, j),
                _ => break,
            };
            let eta = (kernel[i * n + i] + kernel[j * n + j] - 2.0 * kernel[i * n + j]).max(1e-12);
            let s = alpha[i] + alpha[j];
            let lo = (s - c).max(0.0);
            let hi = c.min(s);
            let target = (alpha[i] + (grad[j] - grad[i]) / eta).clamp(lo, hi);
            let delta = target - alpha[i];
            if delta.abs() < 1e-16 {
                break;
            }
            alpha[i] += delta;
            alpha[j] -= delta;
            for (l, g) in grad.iter_mut().enumerate() {
                *g += delta * (kernel[i * n + l] - kernel[j * n + l]);
            }
        }
        let free: Vec<usize> = (0..n)
            .filter(|&i| alpha[i] > slack && alpha[i] < c - slack)
            .collect();
        let rho = if free.is_empty() {
            let upper = (0..n)
                .filter(|&i| alpha[i] >= c - slack)
                .map(|i| grad[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let lower = (0..n)
                .filter(|&i| alpha[i] <= slack)
                .map(|i| grad[i])
                .fold(f64::INFINITY, f64::min);
            match (upper.is_finite(), lower.is_finite()) {
                (true, true) => 0.5 * (upper + lower),
                (true, false) => upper,
                (false, true) => lower,
                (false, false) => grad.iter().sum::<f64>() / n as f64,
            }
        } else {
            free.iter().map(|&i| grad[i]).sum::<f64>() / free.len() as f64
        };
        Ok(OneClassSvm {
            support: train.clone(),
            alpha,
            gamma,
            rho,
        })
    }

    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.support.cols() {
            return Err(CoreError::validation(format!(
                "point has dim {}, model has dim {}",
                x.len(),
                self.support.cols()
            )));
        }
        let f: f64 = self
            .alpha
            .iter()
            .enumerate()
            .filter(|(_, &a)| a > 1e-15)
            .map(|(i, &a)| a * rbf(self.support.row(i), x, self.gamma))
            .sum();
        Ok(f - self.rho)
    }

    /// Negated decision value: positive for outliers.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(-self.decision(x)?)
    }

    pub fn alpha_sum(&self) -> f64 {
        self.alpha.iter().sum()
    }
}

/// max(tanimoto + tm + (1 − rmsd), 0) over precomputed similarity scores.
pub fn composite_similarity(tanimoto: f64, tm: f64, rmsd: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tanimoto) {
        return Err(CoreError::validation(format!(
            "tanimoto must be in [0, 1], got {tanimoto}"
        )));
    }
    if !(0.0..=1.0).contains(&tm) {
        return Err(CoreError::validation(format!("tm must be in [0, 1], got {tm}")));
    }
    if !(rmsd >= 0.0 && rmsd.is_finite()) {
        return Err(CoreError::validation(format!(
            "rmsd must be non-negative, got {rmsd}"
        )));
    }
    Ok((tanimoto + tm + (1.0 - rmsd)).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    Mahalanobis,
    Knn,
    Lof,
    IsolationForest,
    OneClassSvm,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Mahalanobis,
        BaselineKind::Knn,
        BaselineKind::Lof,
        BaselineKind::IsolationForest,
        BaselineKind::OneClassSvm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Mahalanobis => "mah",
            BaselineKind::Knn => "knn",
            BaselineKind::Lof => "lof",
            BaselineKind::IsolationForest => "iforest",
            BaselineKind::OneClassSvm => "ocsvm",
        }
    }

    pub fn from_name(name: &str) -> Result<BaselineKind> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| {
                CoreError::validation(format!(
                    "unknown detector {name:?}, expected one of mah, knn, lof, iforest, ocsvm"
                ))
            })
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineConfig {
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
    #[serde(default = "default_lof_k")]
    pub lof_k: usize,
    #[serde(default = "default_trees")]
    pub trees: usize,
    #[serde(default = "default_subsample")]
    pub subsample: usize,
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_knn_k() -> usize {
    10
}

fn default_lof_k() -> usize {
    20
}

fn default_trees() -> usize {
    100
}

fn default_subsample() -> usize {
    256
}

fn default_nu() -> f64 {
    0.1
}

fn default_lambda() -> f64 {
    1e-6
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            knn_k: default_knn_k(),
            lof_k: default_lof_k(),
            trees: default_trees(),
            subsample: default_subsample(),
            nu: default_nu(),
            lambda: default_lambda(),
        }
    }
}

/// All five detectors fit on the same ID training embeddings behind one
/// internal standardizer. Neighbor counts are capped to what the training
/// set can support. Every score comes out in the larger-is-more-anomalous
/// convention.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineSuite {
    pub config: BaselineConfig,
    standardizer: Standardizer,
    mahalanobis: MahalanobisDetector,
    knn_train: Mat,
    knn_k: usize,
    lof: LofModel,
    iforest: IsolationForest,
    ocsvm: OneClassSvm,
}

impl BaselineSuite {
    pub fn fit(train: &Mat, config: &BaselineConfig, seed: u64) -> Result<BaselineSuite> {
        let (n, d) = train.shape();
        if n < 3 {
            return Err(CoreError::validation(format!(
                "baseline suite needs at least 3 training rows, got {n}"
            )));
        }
        if (1..n).all(|i| train.row(i) == train.row(0)) {
            return Err(CoreError::validation(
                "baseline suite rejects all-identical training embeddings",
            ));
        }
        let standardizer = Standardizer::fit(train);
        let xs = standardizer.transform(train)?;
        let knn_k = config.knn_k.min(n);
        let lof_k = config.lof_k.min(n - 1);
        let gamma = 1.0 / d as f64;
        Ok(BaselineSuite {
            config: config.clone(),
            standardizer,
            mahalanobis: MahalanobisDetector::fit(&xs, config.lambda)?,
            knn_train: xs.clone(),
            knn_k,
            lof: LofModel::fit(&xs, lof_k)?,
            iforest: IsolationForest::fit(&xs, config.trees, config.subsample, seed)?,
            ocsvm: OneClassSvm::fit(&xs, config.nu, gamma)?,
        })
    }

    pub fn lambda_raised(&self) -> bool {
        self.mahalanobis.lambda_raised
    }

    fn standardize_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut row = Mat::zeros(1, x.len());
        for (j, &v) in x.iter().enumerate() {
            row.set(0, j, v);
        }
        let t = self.standardizer.transform(&row)?;
        Ok(t.row(0).to_vec())
    }

    /// Anomaly score for one raw embedding, larger meaning more anomalous.
    pub fn score(&self, kind: BaselineKind, x: &[f64]) -> Result<f64> {
        let xs = self.standardize_row(x)?;
        match kind {
            BaselineKind::Mahalanobis => self.mahalanobis.score(&xs),
            BaselineKind::Knn => knn_score(&xs, &self.knn_train, self.knn_k),
            BaselineKind::Lof => Ok(-self.lof.score(&xs)?),
            BaselineKind::IsolationForest => Ok(self.iforest.score(&xs)),
            BaselineKind::OneClassSvm => self.ocsvm.score(&xs),
        }
    }

    pub fn score_matrix(&self, kind: BaselineKind, x: &Mat) -> Result<Vec<f64>> {
        (0..x.rows()).map(|i| self.score(kind, x.row(i))).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorOutcome {
    pub kind: BaselineKind,
    pub tau: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub detectors: Vec<DetectorOutcome>,
    pub best: BaselineKind,
}

/// Fits the suite on ID training embeddings, calibrates each detector's
/// threshold by F1 on the validation split, and bootstrap-evaluates on the
/// test split with shared ID-subset draws. `best` is the detector with the
/// highest mean AUROC.
pub fn baseline_suite_evaluate(
    id_train: &Mat,
    id_val: &Mat,
    ood_val: &Mat,
    id_test: &Mat,
    ood_test: &Mat,
    config: &BaselineConfig,
    bootstrap: usize,
    seed: u64,
) -> Result<(BaselineSuite, SuiteReport)> {
    let suite = BaselineSuite::fit(id_train, config, seed)?;
    let mut detectors = Vec::with_capacity(BaselineKind::ALL.len());
    for kind in BaselineKind::ALL {
        let val_id = suite.score_matrix(kind, id_val)?;
        let val_ood = suite.score_matrix(kind, ood_val)?;
        let mut scores = val_id.clone();
        scores.extend_from_slice(&val_ood);
        let mut labels = vec![false; val_id.len()];
        labels.extend(std::iter::repeat_n(true, val_ood.len()));
        let tau = calibrate_threshold(&scores, &labels)?;
        let test_id = suite.score_matrix(kind, id_test)?;
        let test_ood = suite.score_matrix(kind, ood_test)?;
        let report = bootstrap_evaluate(&test_id, &test_ood, tau, bootstrap, seed)?;
        detectors.push(DetectorOutcome { kind, tau, report });
    }
    let best = detectors
        .iter()
        .max_by(|a, b| {
            a.report
                .mean
                .auroc
                .partial_cmp(&b.report.mean.auroc)
                .expect("finite AUROC")
        })
        .expect("five detectors")
        .kind;
    Ok((suite, SuiteReport { detectors, best }))
}
