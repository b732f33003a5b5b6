//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! the gradient of that scalar with respect to every node that depends on a
//! variable leaf. Constant leaves and everything derived only from them are
//! skipped.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse row mixing: output row `i` is `sum_j w_ij * input[j]`.
#[derive(Clone, Debug, Default)]
pub struct RowMix {
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl RowMix {
    pub fn new() -> Self {
        Self { offsets: vec![0], entries: Vec::new() }
    }

    pub fn push_row<I: IntoIterator<Item = (usize, f64)>>(&mut self, terms: I) {
        self.entries.extend(terms);
        self.offsets.push(self.entries.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn apply(&self, input: &Tensor) -> Tensor {
        let cols = input.cols();
        let mut out = Tensor::zeros(self.rows(), cols);
        for i in 0..self.rows() {
            let dst = out.row_mut(i);
            for &(j, w) in self.row(i) {
                for (d, s) in dst.iter_mut().zip(input.row(j)) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    Mix(Var, RowMix),
    MaxPoolGroups(Var, Vec<usize>),
    ConcatCols(Var, Var),
    SumSquares(Var),
    Combine(Vec<(Var, f64)>),
    /// Scalar node whose local gradients were computed by the caller.
    Scalar(Vec<(Var, Tensor)>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads[var.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape mismatch");
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x -= y;
        }
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), t)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let bias = self.value(row);
        assert_eq!(bias.rows(), 1);
        assert_eq!(bias.cols(), self.value(a).cols(), "bias width mismatch");
        let bias = bias.data().to_vec();
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        debug_assert_eq!(cols, bias.len());
        let t = self.tracked(a) || self.tracked(row);
        self.push(value, Op::AddRow(a, row), t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x *= s);
        let t = self.tracked(a);
        self.push(value, Op::Scale(a, s), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        let t = self.tracked(a);
        self.push(value, Op::Relu(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x = sigmoid(*x));
        let t = self.tracked(a);
        self.push(value, Op::Sigmoid(a), t)
    }

    /// Softmax across the columns of each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let t = self.tracked(a);
        self.push(value, Op::SoftmaxRows(a), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let t = self.tracked(a);
        self.push(value, Op::Transpose(a), t)
    }

    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut value = Tensor::zeros(index.len(), src.cols());
        for (i, &j) in index.iter().enumerate() {
            value.row_mut(i).copy_from_slice(src.row(j));
        }
        let t = self.tracked(a);
        self.push(value, Op::GatherRows(a, index), t)
    }

    pub fn mix_rows(&mut self, a: Var, mix: RowMix) -> Var {
        let value = mix.apply(self.value(a));
        let t = self.tracked(a);
        self.push(value, Op::Mix(a, mix), t)
    }

    /// Column-wise max over consecutive blocks of `group` rows.
    pub fn max_pool_groups(&mut self, a: Var, group: usize) -> Var {
        let src = self.value(a);
        assert!(group > 0 && src.rows().is_multiple_of(group), "rows not divisible by group size");
        let groups = src.rows() / group;
        let cols = src.cols();
        let mut value = Tensor::zeros(groups, cols);
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            for c in 0..cols {
                let mut best = g * group;
                let mut best_v = src.get(best, c);
                for r in g * group + 1..(g + 1) * group {
                    let v = src.get(r, c);
                    if v > best_v {
                        best = r;
                        best_v = v;
                    }
                }
                value.set(g, c, best_v);
                argmax[g * cols + c] = best;
            }
        }
        let t = self.tracked(a);
        self.push(value, Op::MaxPoolGroups(a, argmax), t)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "concat row mismatch");
        let (ca, cb) = (va.cols(), vb.cols());
        let mut value = Tensor::zeros(va.rows(), ca + cb);
        for r in 0..va.rows() {
            let dst = value.row_mut(r);
            dst[..ca].copy_from_slice(va.row(r));
            dst[ca..].copy_from_slice(vb.row(r));
        }
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::ConcatCols(a, b), t)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_squares());
        let t = self.tracked(a);
        self.push(value, Op::SumSquares(a), t)
    }

    /// Weighted sum of scalar nodes.
    pub fn combine(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let mut total = 0.0;
        let mut t = false;
        for &(v, w) in &terms {
            total += w * self.value(v).item();
            t |= self.tracked(v);
        }
        self.push(Tensor::scalar(total), Op::Combine(terms), t)
    }

    /// Records a scalar computed outside the tape together with its partial
    /// derivatives with respect to `inputs`.
    pub fn custom_scalar(&mut self, value: f64, inputs: Vec<(Var, Tensor)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(self.value(*v).shape(), g.shape(), "custom gradient shape mismatch");
        }
        let t = inputs.iter().any(|(v, _)| self.tracked(*v));
        self.push(Tensor::scalar(value), Op::Scalar(inputs), t)
    }

    /// Gradients of the scalar `root` with respect to every tracked node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads.resize_with(self.nodes.len(), || None);
        if !self.tracked(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    let ga = gemm(g, false, self.value(*b), true);
                    self.accumulate(grads, *a, ga);
                }
                if self.tracked(*b) {
                    let gb = gemm(self.value(*a), true, g, false);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*b) {
                    let mut neg = g.clone();
                    neg.data_mut().iter_mut().for_each(|x| *x = -*x);
                    self.accumulate(grads, *b, neg);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*row) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    self.accumulate(grads, *row, gb);
                }
            }
            Op::Scale(a, s) => {
                let mut ga = g.clone();
                ga.data_mut().iter_mut().for_each(|x| *x *= s);
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                for (x, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                    if *y <= 0.0 {
                        *x = 0.0;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                for (x, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                    *x *= y * (1.0 - y);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((dst, p), q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dst = p * (q - inner);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::GatherRows(a, index) => {
                let src = self.value(*a);
                let mut ga = Tensor::zeros(src.rows(), src.cols());
                for (i, &j) in index.iter().enumerate() {
                    for (d, s) in ga.row_mut(j).iter_mut().zip(g.row(i)) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Mix(a, mix) => {
                let src = self.value(*a);
                let mut ga = Tensor::zeros(src.rows(), src.cols());
                for i in 0..mix.rows() {
                    let gi = g.row(i);
                    for &(j, w) in mix.row(i) {
                        for (d, s) in ga.row_mut(j).iter_mut().zip(gi) {
                            *d += w * s;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::MaxPoolGroups(a, argmax) => {
                let src = self.value(*a);
                let cols = src.cols();
                let mut ga = Tensor::zeros(src.rows(), cols);
                for (k, &r) in argmax.iter().enumerate() {
                    let c = k % cols;
                    let v = ga.get(r, c) + g.data()[k];
                    ga.set(r, c, v);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                if self.tracked(*a) {
                    let mut ga = Tensor::zeros(g.rows(), ca);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.tracked(*b) {
                    let mut gb = Tensor::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::SumSquares(a) => {
                let s = 2.0 * g.item();
                let mut ga = self.value(*a).clone();
                ga.data_mut().iter_mut().for_each(|x| *x *= s);
                self.accumulate(grads, *a, ga);
            }
            Op::Combine(terms) => {
                let s = g.item();
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(s * w));
                }
            }
            Op::Scalar(inputs) => {
                let s = g.item();
                for (v, local) in inputs {
                    if self.tracked(*v) {
                        let mut gv = local.clone();
                        gv.data_mut().iter_mut().for_each(|x| *x *= s);
                        self.accumulate(grads, *v, gv);
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = libm::exp(*x - max);
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor) -> Tensor {
        let h = 1e-5;
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    // Exercises every op in one graph and compares with central differences.
    fn composite(x: &Tensor, tape: &mut Tape, track: bool) -> Var {
        let xv = if track { tape.variable(x.clone()) } else { tape.constant(x.clone()) };
        let w = tape.constant(sample(3, 4, 7));
        let bias = tape.constant(sample(1, 4, 8));
        let h = tape.matmul(xv, w);
        let h = tape.add_row(h, bias);
        let s = tape.sigmoid(h);
        let r = tape.relu(h);
        let sum = tape.add(s, r);
        let d = tape.sub(sum, h);
        let sc = tape.scale(d, 1.7);
        let sm = tape.softmax_rows(sc);
        let tr = tape.transpose(sm);
        let g = tape.gather_rows(tr, alloc::vec![0, 2, 2, 3]);
        let mut mix = RowMix::new();
        mix.push_row([(0, 0.3), (1, 0.7)]);
        mix.push_row([(2, 1.0), (3, -0.5)]);
        let m = tape.mix_rows(g, mix);
        let mp = tape.max_pool_groups(g, 2);
        let cat = tape.concat_cols(m, mp);
        let ss = tape.sum_squares(cat);
        let ss2 = tape.sum_squares(h);
        tape.combine(alloc::vec![(ss, 2.0), (ss2, 0.1)])
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let x = sample(6, 3, 42);
        let mut tape = Tape::new();
        let root = composite(&x, &mut tape, true);
        let grads = tape.backward(root);
        let analytic = grads.get(Var(0)).unwrap().clone();
        let f = |t: &Tensor| {
            let mut tape = Tape::new();
            let root = composite(t, &mut tape, false);
            tape.value(root).item()
        };
        let numeric = numeric_grad(&f, &x);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let v = tape.variable(Tensor::scalar(3.0));
        let s = tape.combine(alloc::vec![(c, 1.0), (v, 4.0)]);
        let g = tape.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(v).unwrap().item(), 4.0);
    }
}
