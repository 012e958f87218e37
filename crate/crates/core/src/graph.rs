//! Attributed 3D graphs and the joint diffusion state.
//!
//! A complex is a set of nodes with coordinates, a categorical type label and
//! a class flag (ligand or pocket). Diffusion runs on the joint state
//! `x_i = [r_i || e_{y_i}]`: the coordinate block lives in the COM-free
//! subspace (translations are quotiented out), the feature block holds the
//! unit-norm prototype embedding of each node's type label.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::mat::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeClass {
    #[serde(rename = "L")]
    Ligand,
    #[serde(rename = "P")]
    Pocket,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGraph {
    pub id: String,
    pub coords: Vec<[f64; 3]>,
    pub types: Vec<usize>,
    pub classes: Vec<NodeClass>,
}

impl ComplexGraph {
    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        if n < 2 {
            return Err(CoreError::validation(format!(
                "graph {}: needs at least 2 nodes, got {n}",
                self.id
            )));
        }
        if self.types.len() != n || self.classes.len() != n {
            return Err(CoreError::validation(format!(
                "graph {}: coords/types/class lengths disagree ({n}/{}/{})",
                self.id,
                self.types.len(),
                self.classes.len()
            )));
        }
        if self.coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::validation(format!(
                "graph {}: non-finite coordinate",
                self.id
            )));
        }
        Ok(())
    }

    /// Node labels must fit their class alphabet.
    pub fn validate_against(&self, tables: &PrototypeTables) -> Result<()> {
        self.validate()?;
        for (i, (&ty, &class)) in self.types.iter().zip(&self.classes).enumerate() {
            let v = tables.table(class).rows();
            if ty >= v {
                return Err(CoreError::validation(format!(
                    "graph {}: node {i} has label {ty}, alphabet size is {v}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn coords_mat(&self) -> Mat {
        let mut m = Mat::zeros(self.n_nodes(), 3);
        for (i, c) in self.coords.iter().enumerate() {
            m.row_mut(i).copy_from_slice(c);
        }
        m
    }

    /// Indices of nodes of the given class, in node order.
    pub fn class_indices(&self, class: NodeClass) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Unit-norm prototype embeddings, one table per node class.
///
/// Both tables share the embedding dimension so ligand and pocket nodes live
/// in one joint state width; logits for a node are only ever computed over
/// its own class's rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTables {
    pub ligand: Mat,
    pub pocket: Mat,
}

impl PrototypeTables {
    /// Rows drawn uniformly on the unit sphere.
    pub fn init_sphere(v_ligand: usize, v_pocket: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut draw = |v: usize| {
            let mut m = Mat::zeros(v, dim);
            for r in 0..v {
                for c in 0..dim {
                    m.set(r, c, rng.sample(StandardNormal));
                }
            }
            renormalize_rows(&mut m);
            m
        };
        PrototypeTables { ligand: draw(v_ligand), pocket: draw(v_pocket) }
    }

    pub fn dim(&self) -> usize {
        self.ligand.cols()
    }

    pub fn table(&self, class: NodeClass) -> &Mat {
        match class {
            NodeClass::Ligand => &self.ligand,
            NodeClass::Pocket => &self.pocket,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ligand.cols() != self.pocket.cols() {
            return Err(CoreError::validation(format!(
                "prototype tables disagree on embedding dimension ({} vs {})",
                self.ligand.cols(),
                self.pocket.cols()
            )));
        }
        for (name, m) in [("ligand", &self.ligand), ("pocket", &self.pocket)] {
            if m.rows() < 2 {
                return Err(CoreError::validation(format!(
                    "{name} alphabet needs at least 2 prototypes"
                )));
            }
            for r in 0..m.rows() {
                let norm: f64 = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(CoreError::validation(format!(
                        "{name} prototype {r} has norm {norm}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rescale each row to unit Euclidean norm. Zero rows are left as drawn-again
/// material for the caller; here they map to a deterministic unit vector so
/// the invariant never silently breaks.
pub fn renormalize_rows(m: &mut Mat) {
    let cols = m.cols();
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        } else {
            for (c, v) in row.iter_mut().enumerate() {
                *v = if c == 0 { 1.0 } else { 0.0 };
            }
            let _ = cols;
        }
    }
}

/// Subtract the per-column mean: orthogonal projection onto the COM-free
/// subspace. Linear, idempotent, never increases the Frobenius norm.
pub fn com_project(coords: &Mat) -> Mat {
    let mut out = coords.clone();
    com_project_in_place(&mut out);
    out
}

pub fn com_project_in_place(coords: &mut Mat) {
    let means = coords.col_means();
    for r in 0..coords.rows() {
        for (v, m) in coords.row_mut(r).iter_mut().zip(&means) {
            *v -= m;
        }
    }
}

/// Joint diffusion state: COM-free coordinate block, prototype feature block,
/// and the diffusion time it sits at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub coords: Mat,
    pub feats: Mat,
    pub t: f64,
}

impl JointState {
    pub fn n_nodes(&self) -> usize {
        self.coords.rows()
    }

    pub fn feat_dim(&self) -> usize {
        self.feats.cols()
    }

    /// Total dimension of the flattened state, counting the full coordinate
    /// block (the COM constraint removes 3 of these degrees of freedom).
    pub fn ambient_dim(&self) -> usize {
        self.coords.len() + self.feats.len()
    }

    pub fn zeros_like(&self) -> JointState {
        JointState {
            coords: Mat::zeros(self.coords.rows(), self.coords.cols()),
            feats: Mat::zeros(self.feats.rows(), self.feats.cols()),
            t: self.t,
        }
    }

    pub fn dot(&self, other: &JointState) -> f64 {
        self.coords.dot(&other.coords) + self.feats.dot(&other.feats)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn add_scaled_assign(&mut self, other: &JointState, k: f64) {
        self.coords.add_scaled_assign(&other.coords, k);
        self.feats.add_scaled_assign(&other.feats, k);
    }

    pub fn scaled(&self, k: f64) -> JointState {
        JointState { coords: self.coords.scaled(k), feats: self.feats.scaled(k), t: self.t }
    }

    pub fn added_scaled(&self, other: &JointState, k: f64) -> JointState {
        let mut out = self.clone();
        out.add_scaled_assign(other, k);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.coords.is_finite() && self.feats.is_finite()
    }
}

/// Row i of the output is `table.prototypes[labels[i]]`.
pub fn encode_types(labels: &[usize], table: &Mat) -> Result<Mat> {
    let mut out = Mat::zeros(labels.len(), table.cols());
    for (i, &y) in labels.iter().enumerate() {
        if y >= table.rows() {
            return Err(CoreError::validation(format!(
                "label {y} out of range for alphabet of size {}",
                table.rows()
            )));
        }
        out.row_mut(i).copy_from_slice(table.row(y));
    }
    Ok(out)
}

/// Build the t=0 joint state: COM-projected coordinates alongside the
/// class-appropriate prototype rows. Translation of the input coordinates
/// does not change the result.
pub fn assemble_state(graph: &ComplexGraph, tables: &PrototypeTables) -> Result<JointState> {
    graph.validate_against(tables)?;
    let coords = com_project(&graph.coords_mat());
    let d = tables.dim();
    let mut feats = Mat::zeros(graph.n_nodes(), d);
    for (i, (&y, &class)) in graph.types.iter().zip(&graph.classes).enumerate() {
        let table = tables.table(class);
        if y >= table.rows() {
            return Err(CoreError::validation(format!(
                "graph {}: node {i} label {y} exceeds alphabet",
                graph.id
            )));
        }
        feats.row_mut(i).copy_from_slice(table.row(y));
    }
    Ok(JointState { coords, feats, t: 0.0 })
}

#[derive(Serialize, Deserialize)]
struct JsonGraph {
    id: String,
    coords: Vec<[f64; 3]>,
    types: Vec<usize>,
    class: Vec<NodeClass>,
}

/// Read graphs from JSONL, one object per line. Every graph is validated.
pub fn read_jsonl(path: &Path) -> Result<Vec<ComplexGraph>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut graphs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonGraph = serde_json::from_str(&line).map_err(|e| {
            CoreError::validation(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let graph = ComplexGraph {
            id: rec.id,
            coords: rec.coords,
            types: rec.types,
            classes: rec.class,
        };
        graph.validate()?;
        graphs.push(graph);
    }
    Ok(graphs)
}

/// Write graphs as JSONL. Finite doubles round-trip bit-exactly (shortest
/// decimal encoding on the way out, exact parse on the way in).
pub fn write_jsonl(path: &Path, graphs: &[ComplexGraph]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for g in graphs {
        let rec = JsonGraph {
            id: g.id.clone(),
            coords: g.coords.clone(),
            types: g.types.clone(),
            class: g.classes.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tiny_tables() -> PrototypeTables {
        let mut rng = crate::rng::stream(11, "tables");
        PrototypeTables::init_sphere(3, 4, 2, &mut rng)
    }

    #[test]
    fn com_project_leaves_balanced_pair_unchanged() {
        let m = Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]);
        assert_eq!(com_project(&m), m);
    }

    #[test]
    fn com_project_removes_constant_shift() {
        let m = Mat::from_rows(&[vec![2.0, 2.0, 2.0], vec![2.0, 2.0, 2.0]]);
        let p = com_project(&m);
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_types_is_row_lookup() {
        let table = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let e = encode_types(&[0], &table).unwrap();
        assert_eq!(e.row(0), &[1.0, 0.0]);
        let e = encode_types(&[1, 1], &table).unwrap();
        assert_eq!(e.row(0), &[0.0, 1.0]);
        assert_eq!(e.row(1), &[0.0, 1.0]);
        assert!(encode_types(&[2], &table).is_err());
    }

    #[test]
    fn prototype_rows_are_unit_norm() {
        let tables = tiny_tables();
        tables.validate().unwrap();
        for r in 0..tables.ligand.rows() {
            let norm: f64 = tables.ligand.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_relative_eq!(norm, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn assemble_state_is_translation_invariant() {
        let tables = tiny_tables();
        let g = ComplexGraph {
            id: "g".into(),
            coords: vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-1.0, 0.5, 0.25]],
            types: vec![0, 1, 2],
            classes: vec![NodeClass::Ligand, NodeClass::Ligand, NodeClass::Pocket],
        };
        let mut shifted = g.clone();
        for c in shifted.coords.iter_mut() {
            c[0] += 5.0;
            c[1] += 5.0;
            c[2] += 5.0;
        }
        let a = assemble_state(&g, &tables).unwrap();
        let b = assemble_state(&shifted, &tables).unwrap();
        for (x, y) in a.coords.data().iter().zip(b.coords.data()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
        assert_eq!(a.feats, b.feats);
        for mean in a.coords.col_means() {
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn single_node_graph_is_rejected() {
        let tables = tiny_tables();
        let g = ComplexGraph {
            id: "lonely".into(),
            coords: vec![[0.0, 0.0, 0.0]],
            types: vec![0],
            classes: vec![NodeClass::Ligand],
        };
        assert!(assemble_state(&g, &tables).is_err());
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let graphs = vec![
            ComplexGraph {
                id: "a".into(),
                coords: vec![[0.1, -0.2, 1.0 / 3.0], [1e-17, 2.5e300, -0.0]],
                types: vec![0, 3],
                classes: vec![NodeClass::Ligand, NodeClass::Pocket],
            },
            ComplexGraph {
                id: "b".into(),
                coords: vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]],
                types: vec![1, 1, 2],
                classes: vec![NodeClass::Ligand, NodeClass::Ligand, NodeClass::Ligand],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graphs.jsonl");
        write_jsonl(&path, &graphs).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(graphs, back);
    }

    proptest! {
        #[test]
        fn com_project_is_idempotent_and_contractive(
            vals in proptest::collection::vec(-1e6f64..1e6, 15)
        ) {
            let m = Mat::from_vec(5, 3, vals);
            let once = com_project(&m);
            let twice = com_project(&once);
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
            prop_assert!(once.frobenius_norm() <= m.frobenius_norm() + 1e-9);
            for mean in once.col_means() {
                prop_assert!(mean.abs() < 1e-6);
            }
        }

        #[test]
        fn com_project_preserves_pairwise_differences(
            vals in proptest::collection::vec(-1e3f64..1e3, 12)
        ) {
            let m = Mat::from_vec(4, 3, vals);
            let p = com_project(&m);
            for i in 0..4 {
                for j in 0..4 {
                    for c in 0..3 {
                        let before = m.at(i, c) - m.at(j, c);
                        let after = p.at(i, c) - p.at(j, c);
                        prop_assert!((before - after).abs() < 1e-9 * before.abs().max(1.0));
                    }
                }
            }
        }
    }
}
