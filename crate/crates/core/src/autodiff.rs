//! Reverse-mode automatic differentiation on a tape of matrix operations.
//!
//! The denoiser needs two gradient flavors the same machinery provides:
//! parameter gradients for training (seed the loss node with 1) and
//! vector-Jacobian products with respect to the inputs for Hutchinson
//! divergence probes (seed the output node with the probe). A tape is built
//! once per forward pass; `backward` walks it in reverse and can be called
//! repeatedly with different seeds, which is what makes multi-probe
//! divergence estimation cheap.
//!
//! The operation set is exactly what the equivariant message-passing
//! denoiser, its losses, and the drift construction require. Shapes are
//! checked at build time with assertions: a mismatch is a programming error,
//! not an input error.

use crate::mat::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// a + b, elementwise.
    Add(NodeId, NodeId),
    /// a - b, elementwise.
    Sub(NodeId, NodeId),
    /// a * b, elementwise.
    Mul(NodeId, NodeId),
    /// Matrix plus a broadcast 1xC row.
    AddRow(NodeId, NodeId),
    /// k * a for a constant k.
    Scale(NodeId, f64),
    /// a @ b.
    MatMul(NodeId, NodeId),
    /// a @ b^T.
    MatMulNT(NodeId, NodeId),
    /// x * logistic(x), elementwise.
    Silu(NodeId),
    /// Row-wise softmax.
    SoftmaxRows(NodeId),
    /// Row-wise log-sum-exp, [n x V] -> [n x 1].
    LogSumExpRows(NodeId),
    /// out[i] = a[i, idx[i]], [n x V] -> [n x 1].
    PickPerRow(NodeId, Vec<usize>),
    /// Sum of all entries -> 1x1.
    SumAll(NodeId),
    /// Rows rescaled to unit norm (smoothed at zero).
    RowUnit(NodeId),
    /// Row-wise sum of squares, [n x k] -> [n x 1].
    RowSumSq(NodeId),
    /// sqrt(x + shift), elementwise; the shift is folded in at build time.
    SqrtShift(NodeId),
    /// 1 / (x + shift), elementwise; the shift is folded in at build time.
    RecipShift(NodeId),
    /// Matrix times a broadcast [n x 1] column.
    MulCol(NodeId, NodeId),
    /// Row gather: out[r] = a[idx[r]].
    GatherRows(NodeId, Vec<usize>),
    /// Row scatter-add: out[idx[r]] += a[r].
    ScatterAddRows(NodeId, Vec<usize>),
    /// [a | b] along columns.
    ConcatCols(NodeId, NodeId),
    /// Columns lo..hi of a.
    SliceCols(NodeId, usize, usize),
    /// Subtract per-column means (orthogonal projection, self-adjoint).
    ComProjectRows(NodeId),
}

struct Node {
    op: Op,
    value: Mat,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node adjoints produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Adjoint of a node, if any path reached it. Missing means zero.
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    pub fn get_or_zeros(&self, id: NodeId, like: &Mat) -> Mat {
        match self.grads[id.0].as_ref() {
            Some(g) => g.clone(),
            None => Mat::zeros(like.rows(), like.cols()),
        }
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Mat) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let v = self.value(a).added(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let v = self.value(a).subbed(self.value(b));
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let va = self.value(a);
        let vb = self.value(b);
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Mat::from_vec(va.rows(), va.cols(), data);
        self.push(Op::Mul(a, b), v)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, c) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, c), "add_row needs a 1xC row");
        let mut v = self.value(a).clone();
        for i in 0..r {
            for (x, b) in v.row_mut(i).iter_mut().zip(self.value(row).row(0)) {
                *x += b;
            }
        }
        self.push(Op::AddRow(a, row), v)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).scaled(k);
        self.push(Op::Scale(a, k), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(Op::MatMulNT(a, b), v)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| x * logistic(x)).collect();
        let v = Mat::from_vec(va.rows(), va.cols(), data);
        self.push(Op::Silu(a), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = Mat::zeros(va.rows(), 1);
        for r in 0..va.rows() {
            let row = va.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            v.set(r, 0, max + sum.ln());
        }
        self.push(Op::LogSumExpRows(a), v)
    }

    pub fn pick_per_row(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let va = self.value(a);
        assert_eq!(idx.len(), va.rows(), "pick_per_row needs one index per row");
        let mut v = Mat::zeros(va.rows(), 1);
        for (r, &j) in idx.iter().enumerate() {
            v.set(r, 0, va.at(r, j));
        }
        self.push(Op::PickPerRow(a, idx), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Mat::scalar(s))
    }

    pub fn row_unit(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let norm = (row.iter().map(|x| x * x).sum::<f64>() + 1e-24).sqrt();
            for x in row.iter_mut() {
                *x /= norm;
            }
        }
        self.push(Op::RowUnit(a), v)
    }

    pub fn row_sum_sq(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = Mat::zeros(va.rows(), 1);
        for r in 0..va.rows() {
            v.set(r, 0, va.row(r).iter().map(|x| x * x).sum());
        }
        self.push(Op::RowSumSq(a), v)
    }

    pub fn sqrt_shift(&mut self, a: NodeId, shift: f64) -> NodeId {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| (x + shift).sqrt()).collect();
        let v = Mat::from_vec(va.rows(), va.cols(), data);
        self.push(Op::SqrtShift(a), v)
    }

    pub fn recip_shift(&mut self, a: NodeId, shift: f64) -> NodeId {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| 1.0 / (x + shift)).collect();
        let v = Mat::from_vec(va.rows(), va.cols(), data);
        self.push(Op::RecipShift(a), v)
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (r, _) = self.value(a).shape();
        assert_eq!(self.value(col).shape(), (r, 1), "mul_col needs an Nx1 column");
        let mut v = self.value(a).clone();
        for i in 0..r {
            let k = self.value(col).at(i, 0);
            for x in v.row_mut(i).iter_mut() {
                *x *= k;
            }
        }
        self.push(Op::MulCol(a, col), v)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let va = self.value(a);
        let mut v = Mat::zeros(idx.len(), va.cols());
        for (r, &j) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(va.row(j));
        }
        self.push(Op::GatherRows(a, idx), v)
    }

    pub fn scatter_add_rows(&mut self, a: NodeId, idx: Vec<usize>, n_out: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(idx.len(), va.rows(), "scatter needs one target per row");
        let mut v = Mat::zeros(n_out, va.cols());
        for (r, &j) in idx.iter().enumerate() {
            assert!(j < n_out, "scatter target out of range");
            for (o, x) in v.row_mut(j).iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        self.push(Op::ScatterAddRows(a, idx), v)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.rows(), vb.rows(), "concat_cols row mismatch");
        let mut v = Mat::zeros(va.rows(), va.cols() + vb.cols());
        for r in 0..va.rows() {
            let row = v.row_mut(r);
            row[..va.cols()].copy_from_slice(va.row(r));
            row[va.cols()..].copy_from_slice(vb.row(r));
        }
        self.push(Op::ConcatCols(a, b), v)
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let va = self.value(a);
        assert!(lo < hi && hi <= va.cols(), "slice_cols range");
        let mut v = Mat::zeros(va.rows(), hi - lo);
        for r in 0..va.rows() {
            v.row_mut(r).copy_from_slice(&va.row(r)[lo..hi]);
        }
        self.push(Op::SliceCols(a, lo, hi), v)
    }

    pub fn com_project_rows(&mut self, a: NodeId) -> NodeId {
        let v = crate::graph::com_project(self.value(a));
        self.push(Op::ComProjectRows(a), v)
    }

    /// Reverse sweep from `root`, seeded with `seed` (shape of the root
    /// value). Returns the adjoint of every node reached; call as many times
    /// as there are cotangents to evaluate.
    pub fn backward(&self, root: NodeId, seed: Mat) -> Gradients {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);

        let accum = |slot: &mut Option<Mat>, delta: Mat| match slot {
            Some(g) => g.add_assign(&delta),
            None => *slot = Some(delta),
        };

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accum(&mut grads[a.0], g.clone());
                    accum(&mut grads[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accum(&mut grads[a.0], g.clone());
                    accum(&mut grads[b.0], g.scaled(-1.0));
                }
                Op::Mul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let da: Vec<f64> =
                        g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> =
                        g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    accum(&mut grads[a.0], Mat::from_vec(va.rows(), va.cols(), da));
                    accum(&mut grads[b.0], Mat::from_vec(va.rows(), va.cols(), db));
                }
                Op::AddRow(a, row) => {
                    let mut drow = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in drow.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accum(&mut grads[a.0], g.clone());
                    accum(&mut grads[row.0], drow);
                }
                Op::Scale(a, k) => {
                    accum(&mut grads[a.0], g.scaled(*k));
                }
                Op::MatMul(a, b) => {
                    // c = a b  =>  da = g b^T, db = a^T g
                    accum(&mut grads[a.0], g.matmul_nt(self.value(*b)));
                    accum(&mut grads[b.0], self.value(*a).matmul_tn(&g));
                }
                Op::MatMulNT(a, b) => {
                    // c = a b^T  =>  da = g b, db = g^T a
                    accum(&mut grads[a.0], g.matmul(self.value(*b)));
                    accum(&mut grads[b.0], g.matmul_tn(self.value(*a)));
                }
                Op::Silu(a) => {
                    let va = self.value(*a);
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(gd, &x)| {
                            let s = logistic(x);
                            gd * (s * (1.0 + x * (1.0 - s)))
                        })
                        .collect();
                    accum(&mut grads[a.0], Mat::from_vec(va.rows(), va.cols(), data));
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for (o, (&yv, &gv)) in
                            da.row_mut(r).iter_mut().zip(yr.iter().zip(gr))
                        {
                            *o = yv * (gv - dot);
                        }
                    }
                    accum(&mut grads[a.0], da);
                }
                Op::LogSumExpRows(a) => {
                    let va = self.value(*a);
                    let lse = &self.nodes[i].value;
                    let mut da = Mat::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let gr = g.at(r, 0);
                        let l = lse.at(r, 0);
                        for (o, &x) in da.row_mut(r).iter_mut().zip(va.row(r)) {
                            *o = gr * (x - l).exp();
                        }
                    }
                    accum(&mut grads[a.0], da);
                }
                Op::PickPerRow(a, idx) => {
                    let va = self.value(*a);
                    let mut da = Mat::zeros(va.rows(), va.cols());
                    for (r, &j) in idx.iter().enumerate() {
                        da.set(r, j, g.at(r, 0));
                    }
                    accum(&mut grads[a.0], da);
                }
                Op::SumAll(a) => {
                    let va = self.value(*a);
                    let k = g.item();
                    let da = Mat::from_vec(
                        va.rows(),
                        va.cols(),
                        vec![k; va.rows() * va.cols()],
                    );
                    accum(&mut grads[a.0], da);
                }
                Op::RowUnit(a) => {
                    let va = self.value(*a);
                    let y = &self.nodes[i].value;
                    let mut da = Mat::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let norm = (va.row(r).iter().map(|x| x * x).sum::<f64>() + 1e-24).sqrt();
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for (o, (&yv, &gv)) in
                            da.row_mut(r).iter_mut().zip(yr.iter().zip(gr))
                        {
                            *o = (gv - yv * dot) / norm;
                        }
                    }
                    accum(&mut grads[a.0], da);
                }
                Op::RowSumSq(a) => {
                    let va = self.value(*a);
                    let mut da = Mat::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let gr = g.at(r, 0);
                        for (o, &x) in da.row_mut(r).iter_mut().zip(va.row(r)) {
                            *o = 2.0 * x * gr;
                        }
                    }
                    accum(&mut grads[a.0], da);
                }
                Op::SqrtShift(a) => {
                    let y = &self.nodes[i].value;
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gd, yv)| gd / (2.0 * yv))
                        .collect();
                    accum(&mut grads[a.0], Mat::from_vec(y.rows(), y.cols(), data));
                }
                Op::RecipShift(a) => {
                    let y = &self.nodes[i].value;
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gd, yv)| -gd * yv * yv)
                        .collect();
                    accum(&mut grads[a.0], Mat::from_vec(y.rows(), y.cols(), data));
                }
                Op::MulCol(a, col) => {
                    let va = self.value(*a);
                    let vc = self.value(*col);
                    let mut da = Mat::zeros(va.rows(), va.cols());
                    let mut dc = Mat::zeros(va.rows(), 1);
                    for r in 0..va.rows() {
                        let k = vc.at(r, 0);
                        let mut acc = 0.0;
                        for ((o, &gv), &xv) in
                            da.row_mut(r).iter_mut().zip(g.row(r)).zip(va.row(r))
                        {
                            *o = gv * k;
                            acc += gv * xv;
                        }
                        dc.set(r, 0, acc);
                    }
                    accum(&mut grads[a.0], da);
                    accum(&mut grads[col.0], dc);
                }
                Op::GatherRows(a, idx) => {
                    let va = self.value(*a);
                    let mut da = Mat::zeros(va.rows(), va.cols());
                    for (r, &j) in idx.iter().enumerate() {
                        for (o, x) in da.row_mut(j).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accum(&mut grads[a.0], da);
                }
                Op::ScatterAddRows(a, idx) => {
                    let va = self.value(*a);
                    let mut da = Mat::zeros(va.rows(), va.cols());
                    for (r, &j) in idx.iter().enumerate() {
                        da.row_mut(r).copy_from_slice(g.row(j));
                    }
                    accum(&mut grads[a.0], da);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let mut da = Mat::zeros(g.rows(), ca);
                    let mut db = Mat::zeros(g.rows(), g.cols() - ca);
                    for r in 0..g.rows() {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    accum(&mut grads[a.0], da);
                    accum(&mut grads[b.0], db);
                }
                Op::SliceCols(a, lo, _hi) => {
                    let va = self.value(*a);
                    let mut da = Mat::zeros(va.rows(), va.cols());
                    for r in 0..g.rows() {
                        for (c, x) in g.row(r).iter().enumerate() {
                            da.set(r, lo + c, *x);
                        }
                    }
                    accum(&mut grads[a.0], da);
                }
                Op::ComProjectRows(a) => {
                    // the projection is symmetric, so the adjoint is the
                    // projection of the incoming gradient
                    accum(&mut grads[a.0], crate::graph::com_project(&g));
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Mat::from_vec(rows, cols, data)
    }

    /// Scalar-valued builder over a list of leaf values. Gradients are
    /// checked against central finite differences entry by entry.
    fn grad_check(
        name: &str,
        inputs: &[Mat],
        build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &ids);
        let root = tape.sum_all(out);
        let grads = tape.backward(root, Mat::scalar(1.0));

        let eval = |inputs: &[Mat]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
            let out = build(&mut tape, &ids);
            let root = tape.sum_all(out);
            tape.value(root).item()
        };

        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(ids[k], input);
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[idx] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[idx];
                let denom = fd.abs().max(a.abs()).max(1e-4);
                assert!(
                    (fd - a).abs() / denom < 1e-5,
                    "{name}: input {k} entry {idx}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_broadcast_ops() {
        let mut rng = stream(1, "gradcheck");
        let a = randn(3, 4, &mut rng);
        let b = randn(3, 4, &mut rng);
        let row = randn(1, 4, &mut rng);
        grad_check("add/sub/mul", &[a.clone(), b, row], |t, ids| {
            let s = t.add(ids[0], ids[1]);
            let d = t.sub(s, ids[0]);
            let m = t.mul(d, ids[0]);
            let withrow = t.add_row(m, ids[2]);
            t.scale(withrow, 0.7)
        });
    }

    #[test]
    fn matmul_variants() {
        let mut rng = stream(2, "gradcheck");
        let a = randn(3, 4, &mut rng);
        let b = randn(4, 2, &mut rng);
        let c = randn(5, 4, &mut rng);
        grad_check("matmul", &[a.clone(), b], |t, ids| t.matmul(ids[0], ids[1]));
        grad_check("matmul_nt", &[a, c], |t, ids| t.matmul_nt(ids[0], ids[1]));
    }

    #[test]
    fn activations_and_normalizers() {
        let mut rng = stream(3, "gradcheck");
        let a = randn(4, 5, &mut rng);
        grad_check("silu", &[a.clone()], |t, ids| t.silu(ids[0]));
        grad_check("softmax", &[a.clone()], |t, ids| {
            let s = t.softmax_rows(ids[0]);
            t.mul(s, s)
        });
        grad_check("row_unit", &[a.clone()], |t, ids| {
            let u = t.row_unit(ids[0]);
            t.mul(u, u)
        });
        grad_check("lse", &[a], |t, ids| t.log_sum_exp_rows(ids[0]));
    }

    #[test]
    fn distance_chain_ops() {
        let mut rng = stream(4, "gradcheck");
        let a = randn(6, 3, &mut rng);
        let col = randn(6, 1, &mut rng);
        grad_check("dist chain", &[a, col], |t, ids| {
            let sq = t.row_sum_sq(ids[0]);
            let dist = t.sqrt_shift(sq, 1e-6);
            let inv = t.recip_shift(dist, 1.0);
            let gated = t.mul_col(ids[0], inv);
            t.mul_col(gated, ids[1])
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = stream(5, "gradcheck");
        let a = randn(4, 3, &mut rng);
        let b = randn(4, 2, &mut rng);
        grad_check("gather/scatter/concat/slice/project", &[a, b], |t, ids| {
            let g = t.gather_rows(ids[0], vec![0, 2, 2, 3, 1]);
            let s = t.scatter_add_rows(g, vec![0, 1, 1, 3, 2], 4);
            let cat = t.concat_cols(s, ids[1]);
            let sl = t.slice_cols(cat, 1, 4);
            t.com_project_rows(sl)
        });
    }

    #[test]
    fn pick_per_row_selects_and_routes_gradient() {
        let mut rng = stream(6, "gradcheck");
        let a = randn(4, 3, &mut rng);
        grad_check("pick", &[a], |t, ids| t.pick_per_row(ids[0], vec![2, 0, 1, 1]));
    }

    #[test]
    fn cross_entropy_composite() {
        // lse - picked logit, the exact form the trainer builds
        let mut rng = stream(7, "gradcheck");
        let logits = randn(5, 4, &mut rng);
        grad_check("cross entropy", &[logits], |t, ids| {
            let lse = t.log_sum_exp_rows(ids[0]);
            let picked = t.pick_per_row(ids[0], vec![0, 3, 1, 2, 2]);
            t.sub(lse, picked)
        });
    }

    #[test]
    fn backward_can_run_repeatedly_with_different_seeds() {
        let mut rng = stream(8, "gradcheck");
        let a = randn(3, 3, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(a);
        let y = tape.silu(x);
        let g1 = tape.backward(y, Mat::from_vec(3, 3, vec![1.0; 9]));
        let g2 = tape.backward(y, Mat::from_vec(3, 3, vec![2.0; 9]));
        let d1 = g1.get(x).unwrap();
        let d2 = g2.get(x).unwrap();
        for (a, b) in d1.data().iter().zip(d2.data()) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn vjp_seed_extracts_jacobian_rows() {
        // y = x W with W fixed: seeding e_k must return the k-th row of W^T
        let w = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::from_vec(1, 2, vec![0.3, -0.7]));
        let wid = tape.leaf(w.clone());
        let y = tape.matmul(x, wid);
        for k in 0..3 {
            let mut seed = Mat::zeros(1, 3);
            seed.set(0, k, 1.0);
            let grads = tape.backward(y, seed);
            let dx = grads.get(x).unwrap();
            assert_eq!(dx.row(0), &[w.at(0, k), w.at(1, k)]);
        }
    }
}
