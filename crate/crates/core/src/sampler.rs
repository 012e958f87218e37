//! Reverse-SDE sampling and sampling-quality metrics.
//!
//! Sampling integrates the reverse-time SDE
//!
//! ```text
//! dx = -g(t)^2 s_hat(x, t) dt + g(t) dW,   t: 1 -> eps_t,  dt < 0
//! ```
//!
//! with Euler-Maruyama steps whose Brownian increments are COM-projected in
//! the coordinate block, so trajectories never leave the centered subspace.
//! Node types stay categorical superpositions during the flow and resolve at
//! the end as the per-node argmax over cosine logits.
//!
//! Quality metrics stay deliberately structural: Jensen-Shannon divergence
//! between type histograms, and fragment/ring statistics of the sampled
//! ligand under a distance bond rule.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::denoiser::{forward, interpolated_score, DenoiserParams};
use crate::error::{CoreError, Result};
use crate::graph::{com_project, ComplexGraph, JointState, NodeClass, PrototypeTables};
use crate::mat::Mat;
use crate::pfode::{DenoisingModel, EgnnModel};
use crate::schedule::{Schedule, EPS_T};

/// One reverse-SDE update with caller-provided standard noise; `None` runs
/// the noiseless (probability-flow-like) variant. Reads the time from
/// `state.t` and returns the state at `state.t + dt`.
pub fn reverse_sde_step_given(
    state: &JointState,
    dt: f64,
    model: &dyn DenoisingModel,
    schedule: &Schedule,
    eps: Option<&JointState>,
) -> Result<JointState> {
    if dt >= 0.0 {
        return Err(CoreError::validation(format!(
            "reverse integration needs dt < 0, got {dt}"
        )));
    }
    if !state.is_finite() {
        return Err(CoreError::validation("state is not finite"));
    }
    let t = state.t;
    let sigma = schedule.sigma(t);
    let g2 = schedule.g2(t);
    let x0 = model.x0_hat(state)?;
    let score = interpolated_score(state, &x0, sigma)?;

    let mut next = state.clone();
    next.add_scaled_assign(&score, -g2 * dt);
    if let Some(eps) = eps {
        let amp = g2.sqrt() * dt.abs().sqrt();
        next.coords.add_scaled_assign(&com_project(&eps.coords), amp);
        next.feats.add_scaled_assign(&eps.feats, amp);
    }
    crate::graph::com_project_in_place(&mut next.coords);
    next.t = t + dt;
    if !next.is_finite() {
        return Err(CoreError::numerical(format!(
            "reverse-SDE update non-finite at t={t}"
        )));
    }
    Ok(next)
}

/// Reverse-SDE update with freshly drawn Gaussian noise.
pub fn reverse_sde_step(
    state: &JointState,
    dt: f64,
    model: &dyn DenoisingModel,
    schedule: &Schedule,
    rng: &mut impl Rng,
) -> Result<JointState> {
    let n = state.n_nodes();
    let d = state.feat_dim();
    let mut eps = JointState {
        coords: Mat::zeros(n, 3),
        feats: Mat::zeros(n, d),
        t: state.t,
    };
    for v in eps.coords.data_mut().iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    for v in eps.feats.data_mut().iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    reverse_sde_step_given(state, dt, model, schedule, Some(&eps))
}

/// Draw one complex: noise at t=1, integrate down to t=eps_t, then resolve
/// per-node types as the argmax over that node's cosine logits.
pub fn sample(
    params: &DenoiserParams,
    tables: &PrototypeTables,
    schedule: &Schedule,
    classes: &[NodeClass],
    steps: usize,
    rng: &mut impl Rng,
) -> Result<ComplexGraph> {
    if steps == 0 {
        return Err(CoreError::validation("sampling needs at least one step"));
    }
    if classes.len() < 2 {
        return Err(CoreError::validation("sampling needs at least 2 nodes"));
    }
    let n = classes.len();
    let d = params.feat_dim;
    let sigma_max = schedule.sigma(1.0);

    let mut coords = Mat::zeros(n, 3);
    for v in coords.data_mut().iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal) * sigma_max;
    }
    let mut feats = Mat::zeros(n, d);
    for v in feats.data_mut().iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal) * sigma_max;
    }
    let mut state = JointState {
        coords: com_project(&coords),
        feats,
        t: 1.0,
    };

    let model = EgnnModel { params, tables, classes, schedule };
    let dt = -(1.0 - EPS_T) / steps as f64;
    for _ in 0..steps {
        state = reverse_sde_step(&state, dt, &model, schedule, rng)?;
    }

    let out = forward(&state, state.t, params, tables, classes, schedule)?;
    let types: Vec<usize> = out
        .logits
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .expect("non-empty alphabet")
                .0
        })
        .collect();
    let coords = (0..n)
        .map(|i| {
            let r = state.coords.row(i);
            [r[0], r[1], r[2]]
        })
        .collect();
    Ok(ComplexGraph {
        id: String::new(),
        coords,
        types,
        classes: classes.to_vec(),
    })
}

/// Jensen-Shannon divergence between two histograms over the same support,
/// in nats. Inputs are non-negative weights; they are normalized internally.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(CoreError::validation("empty histogram"));
    }
    if p.len() != q.len() {
        return Err(CoreError::validation(format!(
            "histogram supports differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.iter().chain(q).any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(CoreError::validation("histogram weights must be non-negative"));
    }
    let ps: f64 = p.iter().sum();
    let qs: f64 = q.iter().sum();
    if ps <= 0.0 || qs <= 0.0 {
        return Err(CoreError::validation("histogram sums must be positive"));
    }
    let mut js = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let a = pi / ps;
        let b = qi / qs;
        let m = 0.5 * (a + b);
        if a > 0.0 {
            js += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            js += 0.5 * b * (b / m).ln();
        }
    }
    Ok(js.clamp(0.0, 2f64.ln()))
}

/// Counts of each ligand (or pocket) type over a set of graphs.
pub fn type_histogram(graphs: &[ComplexGraph], class: NodeClass, alphabet: usize) -> Vec<f64> {
    let mut hist = vec![0.0; alphabet];
    for g in graphs {
        for (i, &ty) in g.types.iter().enumerate() {
            if g.classes[i] == class && ty < alphabet {
                hist[ty] += 1.0;
            }
        }
    }
    hist
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FragmentStats {
    pub n_fragments: usize,
    pub fragmented: bool,
    pub ring_count: usize,
    pub mean_ring_size: f64,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }
    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

/// Bond-graph statistics of the ligand: connected components under the
/// distance rule, independent cycle count, and the mean cycle length of a
/// minimum cycle basis.
pub fn fragment_stats(graph: &ComplexGraph, bond_threshold: f64) -> Result<FragmentStats> {
    if bond_threshold <= 0.0 || !bond_threshold.is_finite() {
        return Err(CoreError::validation("bond threshold must be positive"));
    }
    let ligand = graph.class_indices(NodeClass::Ligand);
    if ligand.is_empty() {
        return Err(CoreError::validation(format!(
            "graph {}: fragment statistics need at least one ligand node",
            graph.id
        )));
    }
    let v = ligand.len();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for a in 0..v {
        for b in (a + 1)..v {
            let pa = graph.coords[ligand[a]];
            let pb = graph.coords[ligand[b]];
            let d2: f64 = (0..3).map(|c| (pa[c] - pb[c]).powi(2)).sum();
            if d2.sqrt() < bond_threshold {
                edges.push((a, b));
            }
        }
    }

    let mut uf = UnionFind::new(v);
    for &(a, b) in &edges {
        uf.union(a, b);
    }
    let mut roots: Vec<usize> = (0..v).map(|i| uf.find(i)).collect();
    roots.sort_unstable();
    roots.dedup();
    let n_fragments = roots.len();
    let ring_count = edges.len() + n_fragments - v;

    let mean_ring_size = if ring_count == 0 {
        0.0
    } else {
        let sizes = minimum_cycle_basis(v, &edges, ring_count);
        sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
    };

    Ok(FragmentStats {
        n_fragments,
        fragmented: n_fragments > 1,
        ring_count,
        mean_ring_size,
    })
}

/// Horton's construction: candidate cycles from shortest-path trees rooted at
/// every vertex, filtered to an independent set over GF(2) edge space in
/// ascending length order. Returns the cycle lengths of the selected basis.
fn minimum_cycle_basis(v: usize, edges: &[(usize, usize)], target: usize) -> Vec<usize> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); v];
    for (idx, &(a, b)) in edges.iter().enumerate() {
        adj[a].push((b, idx));
        adj[b].push((a, idx));
    }
    for nbrs in adj.iter_mut() {
        nbrs.sort_unstable();
    }

    let words = edges.len().div_ceil(64);
    let mut candidates: BTreeMap<Vec<u64>, usize> = BTreeMap::new();

    for root in 0..v {
        // BFS with deterministic neighbor order gives one canonical
        // shortest-path tree per root
        let mut dist = vec![usize::MAX; v];
        let mut parent_edge = vec![usize::MAX; v];
        let mut parent = vec![usize::MAX; v];
        let mut queue = std::collections::VecDeque::new();
        dist[root] = 0;
        queue.push_back(root);
        while let Some(u) = queue.pop_front() {
            for &(w, e) in &adj[u] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    parent[w] = u;
                    parent_edge[w] = e;
                    queue.push_back(w);
                }
            }
        }
        let path_nodes = |mut x: usize| -> Vec<usize> {
            let mut nodes = vec![x];
            while x != root {
                x = parent[x];
                nodes.push(x);
            }
            nodes
        };
        for (eidx, &(x, y)) in edges.iter().enumerate() {
            if dist[x] == usize::MAX || dist[y] == usize::MAX {
                continue;
            }
            if parent_edge[x] == eidx || parent_edge[y] == eidx {
                continue;
            }
            let px = path_nodes(x);
            let py = path_nodes(y);
            // vertex-disjoint except at the root, otherwise not a simple cycle
            let shared = px[..px.len() - 1]
                .iter()
                .any(|n| py[..py.len() - 1].contains(n));
            if shared {
                continue;
            }
            let mut mask = vec![0u64; words];
            let set = |e: usize, mask: &mut Vec<u64>| {
                mask[e / 64] ^= 1u64 << (e % 64);
            };
            let mut len = 1usize;
            set(eidx, &mut mask);
            for &node in &[x, y] {
                let mut cur = node;
                while cur != root {
                    set(parent_edge[cur], &mut mask);
                    cur = parent[cur];
                    len += 1;
                }
            }
            candidates.entry(mask).or_insert(len);
        }
    }

    let mut by_len: Vec<(usize, Vec<u64>)> =
        candidates.into_iter().map(|(m, l)| (l, m)).collect();
    by_len.sort();

    // greedy GF(2) independence with pivot elimination
    let mut basis: Vec<(usize, Vec<u64>)> = Vec::new();
    let mut sizes = Vec::new();
    'outer: for (len, mut mask) in by_len {
        for (pivot, row) in &basis {
            if mask[pivot / 64] >> (pivot % 64) & 1 == 1 {
                for w in 0..words {
                    mask[w] ^= row[w];
                }
            }
        }
        let Some(pivot) = mask
            .iter()
            .enumerate()
            .find_map(|(w, &bits)| (bits != 0).then(|| w * 64 + bits.trailing_zeros() as usize))
        else {
            continue 'outer;
        };
        basis.push((pivot, mask));
        sizes.push(len);
        if sizes.len() == target {
            break;
        }
    }
    sizes
}
