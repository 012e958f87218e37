//! Bridging helpers between the workspace matrix type and nalgebra.

use driftwood_core::Mat;
use nalgebra::DMatrix;

pub fn to_dmatrix(m: &Mat) -> DMatrix<f64> {
    let (r, c) = m.shape();
    DMatrix::from_row_iterator(r, c, m.data().iter().cloned())
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Mat {
    let mut out = Mat::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.set(i, j, m[(i, j)]);
        }
    }
    out
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order; eigenvector signs are fixed so the entry of largest
/// magnitude is positive.
pub fn symmetric_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let mut values = Vec::with_capacity(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src]);
        let col = eig.eigenvectors.column(src);
        let lead = col
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().partial_cmp(&b.abs()).expect("finite eigenvectors"))
            .unwrap_or(1.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[(i, dst)] = sign * col[i];
        }
    }
    (values, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use driftwood_core::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn eigen_reconstructs_symmetric_matrices() {
        let mut rng = stream(5, "eigen");
        for _ in 0..10 {
            let d = 6;
            let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let sym = &a * a.transpose();
            let (values, vectors) = symmetric_eigen_desc(&sym);
            for w in values.windows(2) {
                assert!(w[0] >= w[1] - 1e-12);
            }
            let gram = vectors.transpose() * &vectors;
            let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(values));
            let rebuilt = &vectors * lambda * vectors.transpose();
            assert!((gram - DMatrix::identity(d, d)).norm() < 1e-9);
            assert!((rebuilt - sym).norm() < 1e-8);
        }
    }

    #[test]
    fn mat_round_trip() {
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let d = to_dmatrix(&m);
        assert_eq!(d[(2, 1)], 6.0);
        assert_eq!(from_dmatrix(&d), m);
    }
}
