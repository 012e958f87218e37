//! Helpers shared by unit tests across modules.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::graph::{ComplexGraph, NodeClass, PrototypeTables};
use crate::mat::Mat;

pub(crate) fn gaussian_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.data_mut().iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    m
}

/// Uniform random rotation via Gram-Schmidt on Gaussian rows, determinant
/// forced to +1.
pub(crate) fn random_rotation(rng: &mut impl Rng) -> Mat {
    loop {
        let mut v: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for i in 0..3 {
            for j in 0..i {
                let d: f64 = (0..3).map(|k| v[i][k] * v[j][k]).sum();
                for k in 0..3 {
                    v[i][k] -= d * v[j][k];
                }
            }
            let norm: f64 = v[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            for x in v[i].iter_mut() {
                *x /= norm;
            }
        }
        if !ok {
            continue;
        }
        let det = v[0][0] * (v[1][1] * v[2][2] - v[1][2] * v[2][1])
            - v[0][1] * (v[1][0] * v[2][2] - v[1][2] * v[2][0])
            + v[0][2] * (v[1][0] * v[2][1] - v[1][1] * v[2][0]);
        if det < 0.0 {
            for x in v[2].iter_mut() {
                *x = -*x;
            }
        }
        let mut m = Mat::zeros(3, 3);
        for r in 0..3 {
            m.row_mut(r).copy_from_slice(&v[r]);
        }
        return m;
    }
}

/// Small learnable family: two jittered triangles (ligand near the origin,
/// pocket offset in z) whose node types follow the template slot, so both the
/// coordinate and the type heads have something to learn.
pub(crate) fn toy_graphs(count: usize, rng: &mut impl Rng) -> Vec<ComplexGraph> {
    let template = [
        [1.0, 0.0, 0.0],
        [-0.5, 0.8660254037844386, 0.0],
        [-0.5, -0.8660254037844386, 0.0],
        [1.2, 0.0, 2.0],
        [-0.6, 1.0392304845413263, 2.0],
        [-0.6, -1.0392304845413263, 2.0],
    ];
    (0..count)
        .map(|i| {
            let coords = template
                .iter()
                .map(|p| {
                    [
                        p[0] + 0.1 * rng.sample::<f64, _>(StandardNormal),
                        p[1] + 0.1 * rng.sample::<f64, _>(StandardNormal),
                        p[2] + 0.1 * rng.sample::<f64, _>(StandardNormal),
                    ]
                })
                .collect();
            ComplexGraph {
                id: format!("toy-{i}"),
                coords,
                types: vec![0, 1, 2, 0, 1, 2],
                classes: vec![
                    NodeClass::Ligand,
                    NodeClass::Ligand,
                    NodeClass::Ligand,
                    NodeClass::Pocket,
                    NodeClass::Pocket,
                    NodeClass::Pocket,
                ],
            }
        })
        .collect()
}

pub(crate) fn toy_tables(rng: &mut impl Rng) -> PrototypeTables {
    PrototypeTables::init_sphere(3, 3, 4, rng)
}
