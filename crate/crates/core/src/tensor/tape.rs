//! Reverse-mode differentiation over a flat operation tape.
//!
//! Nodes are appended during the forward pass, so ascending index order is
//! a topological order and the backward pass is a single reverse sweep. The
//! tape borrows its [`ParamSet`] immutably; parameter gradients land in a
//! detached [`GradStore`].

use crate::tensor::{GradStore, Matrix, ParamId, ParamSet};

/// Index of a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Leaf constant; no gradient flows out.
    Const,
    /// Leaf view of a parameter block (used for the scalar loss weights).
    Param(ParamId),
    /// `W x + b`; the workhorse of every fully connected layer.
    Linear {
        w: ParamId,
        b: Option<ParamId>,
        x: NodeId,
    },
    /// `a * b` for two tape values.
    MatMul { a: NodeId, b: NodeId },
    /// `a b^T` for column vectors a, b.
    Outer { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    /// Row-wise softmax with max subtraction.
    SoftmaxRows { x: NodeId },
    /// Column vectors stacked top to bottom.
    Concat { xs: Vec<NodeId> },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    /// Elementwise product.
    Mul { a: NodeId, b: NodeId },
    /// Elementwise exponential.
    Exp { x: NodeId },
    /// Elementwise mean of same-shaped values.
    Mean { xs: Vec<NodeId> },
    /// Scalar sum of all entries.
    Sum { x: NodeId },
    /// Rows `start..start+len` of a column vector.
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// Scalar `sum_i |x_i - t_i|` against a constant target.
    AbsSumDiff { x: NodeId, target: Matrix },
}

/// One recorded operation together with its forward value.
#[derive(Debug)]
pub struct TapeNode {
    op: Op,
    value: Matrix,
}

/// Append-only computation tape over a borrowed parameter set.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<TapeNode>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Forward value of a 1-by-1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar_value: node is not 1x1");
        v.as_slice()[0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(TapeNode { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = self.params.value(id).clone();
        self.push(Op::Param(id), value)
    }

    pub fn linear(&mut self, w: ParamId, b: Option<ParamId>, x: NodeId) -> NodeId {
        let wv = self.params.value(w);
        let mut y = wv.matvec(self.value(x));
        if let Some(b) = b {
            y.add_assign(self.params.value(b));
        }
        self.push(Op::Linear { w, b, x }, y)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul { a, b }, y)
    }

    pub fn outer(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), 1, "outer: a must be a column vector");
        assert_eq!(bv.cols(), 1, "outer: b must be a column vector");
        let y = av.matmul_nt(bv);
        self.push(Op::Outer { a, b }, y)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).clone();
        for v in y.as_mut_slice() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(Op::Relu { x }, y)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut y = Matrix::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let out = &mut y.as_mut_slice()[r * xv.cols()..(r + 1) * xv.cols()];
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            let inv = 1.0 / sum;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        self.push(Op::SoftmaxRows { x }, y)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            assert_eq!(v.cols(), 1, "concat: inputs must be column vectors");
            data.extend_from_slice(v.as_slice());
        }
        self.push(Op::Concat { xs: xs.to_vec() }, Matrix::column(data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(Op::Add { a, b }, y)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut y = self.value(x).clone();
        y.scale_assign(c);
        self.push(Op::Scale { x, c }, y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.same_shape(bv), "mul: shape mismatch");
        let mut y = av.clone();
        for (o, &v) in y.as_mut_slice().iter_mut().zip(bv.as_slice()) {
            *o *= v;
        }
        self.push(Op::Mul { a, b }, y)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).clone();
        for v in y.as_mut_slice() {
            *v = v.exp();
        }
        self.push(Op::Exp { x }, y)
    }

    pub fn mean(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "mean: empty input list");
        let mut y = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            y.add_assign(self.value(x));
        }
        y.scale_assign(1.0 / xs.len() as f64);
        self.push(Op::Mean { xs: xs.to_vec() }, y)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).as_slice().iter().sum();
        self.push(Op::Sum { x }, Matrix::scalar(s))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.cols(), 1, "slice_rows: input must be a column vector");
        assert!(start + len <= xv.rows(), "slice_rows: out of range");
        let y = Matrix::column(xv.as_slice()[start..start + len].to_vec());
        self.push(Op::SliceRows { x, start, len }, y)
    }

    pub fn abs_sum_diff(&mut self, x: NodeId, target: Matrix) -> NodeId {
        let xv = self.value(x);
        assert!(xv.same_shape(&target), "abs_sum_diff: shape mismatch");
        let s: f64 = xv
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(a, t)| (a - t).abs())
            .sum();
        self.push(Op::AbsSumDiff { x, target }, Matrix::scalar(s))
    }

    /// Reverse sweep from `root`, seeding its gradient with `seed` and
    /// accumulating parameter gradients into `grads`. The root must be a
    /// scalar. May be called repeatedly on one tape (gradients add up).
    pub fn backward(&self, root: NodeId, seed: f64, grads: &mut GradStore) {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward: root must be a scalar"
        );
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Matrix::scalar(seed));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(pid) => grads.get_mut(*pid).add_assign(&g),
                Op::Linear { w, b, x } => {
                    let xv = &self.nodes[x.0].value;
                    grads.get_mut(*w).add_outer_assign(&g, xv);
                    if let Some(b) = b {
                        grads.get_mut(*b).add_assign(&g);
                    }
                    let gx = self.params.value(*w).transpose_matvec(&g);
                    accumulate(&mut adj[x.0], gx);
                }
                Op::MatMul { a, b } => {
                    let ga = g.matmul_nt(&self.nodes[b.0].value);
                    let gb = self.nodes[a.0].value.matmul_tn(&g);
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::Outer { a, b } => {
                    let ga = g.matvec(&self.nodes[b.0].value);
                    let gb = g.transpose_matvec(&self.nodes[a.0].value);
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::Relu { x } => {
                    let mut gx = g;
                    for (gv, &xv) in gx
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.nodes[x.0].value.as_slice())
                    {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut adj[x.0], gx);
                }
                Op::SoftmaxRows { x } => {
                    let s = &self.nodes[i].value;
                    let mut gx = Matrix::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let srow = s.row(r);
                        let grow = g.row(r);
                        let inner = crate::tensor::matrix::dot(grow, srow);
                        let out =
                            &mut gx.as_mut_slice()[r * s.cols()..(r + 1) * s.cols()];
                        for ((o, &sv), &gv) in out.iter_mut().zip(srow).zip(grow) {
                            *o = sv * (gv - inner);
                        }
                    }
                    accumulate(&mut adj[x.0], gx);
                }
                Op::Concat { xs } => {
                    let mut offset = 0;
                    for &x in xs {
                        let len = self.nodes[x.0].value.rows();
                        let gx = Matrix::column(
                            g.as_slice()[offset..offset + len].to_vec(),
                        );
                        accumulate(&mut adj[x.0], gx);
                        offset += len;
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj[a.0], g.clone());
                    accumulate(&mut adj[b.0], g);
                }
                Op::Scale { x, c } => {
                    let mut gx = g;
                    gx.scale_assign(*c);
                    accumulate(&mut adj[x.0], gx);
                }
                Op::Mul { a, b } => {
                    let mut ga = g.clone();
                    for (o, &v) in ga
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.nodes[b.0].value.as_slice())
                    {
                        *o *= v;
                    }
                    let mut gb = g;
                    for (o, &v) in gb
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.nodes[a.0].value.as_slice())
                    {
                        *o *= v;
                    }
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::Exp { x } => {
                    let mut gx = g;
                    for (o, &y) in gx
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.nodes[i].value.as_slice())
                    {
                        *o *= y;
                    }
                    accumulate(&mut adj[x.0], gx);
                }
                Op::Mean { xs } => {
                    let mut gx = g;
                    gx.scale_assign(1.0 / xs.len() as f64);
                    for &x in xs {
                        accumulate(&mut adj[x.0], gx.clone());
                    }
                }
                Op::Sum { x } => {
                    let gs = g.as_slice()[0];
                    let xv = &self.nodes[x.0].value;
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    gx.fill(gs);
                    accumulate(&mut adj[x.0], gx);
                }
                Op::SliceRows { x, start, len } => {
                    let full = self.nodes[x.0].value.rows();
                    let mut gx = Matrix::zeros(full, 1);
                    gx.as_mut_slice()[*start..start + len]
                        .copy_from_slice(g.as_slice());
                    accumulate(&mut adj[x.0], gx);
                }
                Op::AbsSumDiff { x, target } => {
                    let gs = g.as_slice()[0];
                    let xv = &self.nodes[x.0].value;
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for ((o, &a), &t) in gx
                        .as_mut_slice()
                        .iter_mut()
                        .zip(xv.as_slice())
                        .zip(target.as_slice())
                    {
                        // subgradient 0 at the kink
                        let d = a - t;
                        *o = if d > 0.0 {
                            gs
                        } else if d < 0.0 {
                            -gs
                        } else {
                            0.0
                        };
                    }
                    accumulate(&mut adj[x.0], gx);
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_params() -> (ParamSet, ParamId, ParamId) {
        let mut set = ParamSet::new();
        let w = set.add(
            "w",
            Matrix::from_vec(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5]),
        );
        let b = set.add("b", Matrix::column(vec![0.1, -0.2]));
        (set, w, b)
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let mut set = ParamSet::new();
        let eye = set.add("eye", Matrix::from_fn(3, 3, |r, c| f64::from(r == c)));
        let zero = set.add("zero", Matrix::zeros(3, 3));
        let c = set.add("c", Matrix::column(vec![7.0, 8.0, 9.0]));

        let mut tape = Tape::new(&set);
        let x = tape.constant(Matrix::column(vec![1.0, -2.0, 3.0]));
        let same = tape.linear(eye, None, x);
        assert_eq!(tape.value(same).as_slice(), &[1.0, -2.0, 3.0]);
        let bias_only = tape.linear(zero, Some(c), x);
        assert_eq!(tape.value(bias_only).as_slice(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn linear_backward_matches_hand_gradients() {
        let (set, w, b) = simple_params();
        let mut tape = Tape::new(&set);
        let x = tape.constant(Matrix::column(vec![1.0, 2.0, -1.0]));
        let y = tape.linear(w, Some(b), x);
        let loss = tape.sum(y);

        let mut grads = GradStore::zeros_like(&set);
        tape.backward(loss, 1.0, &mut grads);

        // dL/dW = [1,1]^T [1,2,-1]
        assert_eq!(grads.get(w).as_slice(), &[1.0, 2.0, -1.0, 1.0, 2.0, -1.0]);
        assert_eq!(grads.get(b).as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn relu_forward_gates_negatives() {
        let set = ParamSet::new();
        let mut tape = Tape::new(&set);
        let x = tape.constant(Matrix::column(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).as_slice(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_rows_trivial_cases() {
        let set = ParamSet::new();
        let mut tape = Tape::new(&set);
        let x = tape.constant(Matrix::from_vec(1, 4, vec![3.0; 4]));
        let y = tape.softmax_rows(x);
        for &v in tape.value(y).as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let x = tape.constant(Matrix::from_vec(1, 2, vec![1000.0, 0.0]));
        let y = tape.softmax_rows(x);
        let out = tape.value(y).as_slice();
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12);
        let sum: f64 = out.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concat_splits_gradient() {
        let set = ParamSet::new();
        let mut tape = Tape::new(&set);
        let a = tape.constant(Matrix::column(vec![1.0]));
        let b = tape.constant(Matrix::column(vec![2.0, 3.0]));
        let y = tape.concat(&[a, b]);
        assert_eq!(tape.value(y).as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn mean_averages_and_distributes() {
        let set = ParamSet::new();
        let mut tape = Tape::new(&set);
        let a = tape.constant(Matrix::column(vec![1.0, 5.0]));
        let b = tape.constant(Matrix::column(vec![3.0, -1.0]));
        let m = tape.mean(&[a, b]);
        assert_eq!(tape.value(m).as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn abs_sum_diff_value_and_sign_gradient() {
        let set = ParamSet::new();
        let mut tape = Tape::new(&set);
        let x = tape.constant(Matrix::column(vec![1.0, -2.0, 0.5]));
        let loss = tape.abs_sum_diff(x, Matrix::column(vec![0.0, 0.0, 0.5]));
        assert_eq!(tape.scalar_value(loss), 3.0);
    }

    #[test]
    fn backward_through_shared_subexpression_accumulates() {
        // loss = sum(x + x) => dloss/dx = 2 per entry
        let mut set = ParamSet::new();
        let p = set.add("p", Matrix::column(vec![0.3, -0.7]));
        let mut tape = Tape::new(&set);
        let x = tape.param(p);
        let two_x = tape.add(x, x);
        let loss = tape.sum(two_x);
        let mut grads = GradStore::zeros_like(&set);
        tape.backward(loss, 1.0, &mut grads);
        assert_eq!(grads.get(p).as_slice(), &[2.0, 2.0]);
    }
}
