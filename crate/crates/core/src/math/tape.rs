//! Reverse-mode differentiation over a linear record of matrix operations.
//!
//! Values are computed eagerly when an operation is recorded. Calling
//! [`Tape::gradient`] replays the record backwards from a 1×1 loss node and
//! returns one adjoint per recorded node. Nodes that the loss does not depend
//! on keep an exactly-zero adjoint.
//!
//! ```
//! use plpcl::math::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.gradient(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::math::matrix::{self, Matrix, NORM_EPS};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulTransB(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a 1×c row to every row.
    AddRow(Var, Var),
    MulConst(Var, Matrix),
    AddConst(Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    /// `ln(max(x, floor))`
    LogClamped(Var, f64),
    SoftmaxRows(Var),
    /// Row norms are cached for the backward pass.
    NormalizeRows(Var, Vec<f64>),
    NormalizeCols(Var, Vec<f64>),
    ConcatRows(Var, Var),
    SelectRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    /// Per-row log-sum-exp over the entries where the mask is set.
    LogSumExpRows(Var, Vec<bool>),
    /// `Σ w ⊙ x` into a 1×1 node.
    WeightedSum(Var, Matrix),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::gradient`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; all zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.adjoints[v.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.adjoints[v.0].take() {
            Some(m) => m,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value recorded by {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::matmul_transb(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMulTransB(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(shape_err("add_row", x, r));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    /// Elementwise product with a constant.
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Result<Var> {
        let value = self.value(a).hadamard(&c)?;
        Ok(self.push(value, Op::MulConst(a, c)))
    }

    /// Elementwise sum with a constant.
    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Result<Var> {
        let value = self.value(a).add(c)?;
        Ok(self.push(value, Op::AddConst(a)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|v| v.max(floor).ln());
        self.push(value, Op::LogClamped(a, floor))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = matrix::softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let norms: Vec<f64> = x.row_iter().map(matrix::norm).collect();
        if let Some(row) = norms.iter().position(|&n| n <= NORM_EPS) {
            return Err(Error::ZeroRow { row, eps: NORM_EPS });
        }
        let mut value = x.clone();
        for (i, n) in norms.iter().enumerate() {
            value.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        Ok(self.push(value, Op::NormalizeRows(a, norms)))
    }

    /// Scales every column to unit norm; fails with `ZeroColumn`.
    pub fn normalize_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut norms = vec![0.0; x.cols()];
        for row in x.row_iter() {
            for (n, v) in norms.iter_mut().zip(row) {
                *n += v * v;
            }
        }
        norms.iter_mut().for_each(|n| *n = n.sqrt());
        if let Some(col) = norms.iter().position(|&n| n <= NORM_EPS) {
            return Err(Error::ZeroColumn(col));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, n) in value.row_mut(i).iter_mut().zip(&norms) {
                *v /= n;
            }
        }
        Ok(self.push(value, Op::NormalizeCols(a, norms)))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_rows(self.value(b))?;
        Ok(self.push(value, Op::ConcatRows(a, b)))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(indices)?;
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec())))
    }

    pub fn select_cols(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).select_cols(indices)?;
        Ok(self.push(value, Op::SelectCols(a, indices.to_vec())))
    }

    /// `out[i] = ln Σ_{j: mask[i][j]} exp(a[i][j])`, an n×1 column.
    ///
    /// Every row needs at least one set mask entry.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.rows() * x.cols() {
            return Err(Error::ShapeMismatch {
                op: "logsumexp_rows",
                left: x.shape(),
                right: (mask.len(), 1),
            });
        }
        let cols = x.cols();
        let mut out = Vec::with_capacity(x.rows());
        for (i, row) in x.row_iter().enumerate() {
            let m = &mask[i * cols..(i + 1) * cols];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidParams(format!(
                    "logsumexp_rows: row {i} has an empty mask"
                )));
            }
            let total: f64 = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            out.push(max + total.ln());
        }
        let value = Matrix::new(x.rows(), 1, out)?;
        Ok(self.push(value, Op::LogSumExpRows(a, mask)))
    }

    /// `Σ_ij w_ij · a_ij` as a 1×1 node.
    pub fn weighted_sum(&mut self, a: Var, weights: Matrix) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != weights.shape() {
            return Err(shape_err("weighted_sum", x, &weights));
        }
        let total = matrix::dot(x.data(), weights.data());
        Ok(self.push(Matrix::scalar(total), Op::WeightedSum(a, weights)))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        self.weighted_sum(a, Matrix::filled(r, c, 1.0))
    }

    /// Reverse sweep from a 1×1 `loss`.
    pub fn gradient(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "gradient",
                left: lv.shape(),
                right: (1, 1),
            });
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop(node, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn backprop(&self, node: &Node, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        let mut acc = |v: Var, delta: Matrix| -> Result<()> {
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, matrix::matmul_transb(g, bv)?)?;
                acc(*b, matrix::matmul_transa(av, g)?)?;
            }
            Op::MatMulTransB(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // out = a bᵀ: da = g b, db = gᵀ a
                acc(*a, matrix::matmul(g, bv)?)?;
                acc(*b, matrix::matmul_transa(g, av)?)?;
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.hadamard(bv)?)?;
                acc(*b, g.hadamard(av)?)?;
            }
            Op::AddRow(a, row) => {
                let mut col_sums = vec![0.0; g.cols()];
                for r in g.row_iter() {
                    for (s, v) in col_sums.iter_mut().zip(r) {
                        *s += v;
                    }
                }
                acc(*a, g.clone())?;
                acc(*row, Matrix::row_vector(&col_sums))?;
            }
            Op::MulConst(a, c) => acc(*a, g.hadamard(c)?)?,
            Op::AddConst(a) => acc(*a, g.clone())?,
            Op::Scale(a, s) => acc(*a, g.scale(*s))?,
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(
                    *a,
                    g.zip_map(x, "relu", |gi, xi| if xi > 0.0 { gi } else { 0.0 })?,
                )?;
            }
            Op::Exp(a) => acc(*a, g.hadamard(&node.value)?)?,
            Op::LogClamped(a, floor) => {
                let x = self.value(*a);
                let floor = *floor;
                acc(
                    *a,
                    g.zip_map(x, "log", |gi, xi| if xi > floor { gi / xi } else { 0.0 })?,
                )?;
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let inner = matrix::dot(yr, gr);
                    for ((d, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - inner);
                    }
                }
                acc(*a, dx)?;
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for (i, n) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let inner = matrix::dot(yr, gr);
                    for ((d, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * inner) / n;
                    }
                }
                acc(*a, dx)?;
            }
            Op::NormalizeCols(a, norms) => {
                let y = &node.value;
                let mut inner = vec![0.0; y.cols()];
                for i in 0..y.rows() {
                    for ((s, yv), gv) in inner.iter_mut().zip(y.row(i)).zip(g.row(i)) {
                        *s += yv * gv;
                    }
                }
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let row = dx.row_mut(i);
                    for j in 0..row.len() {
                        row[j] = (g[(i, j)] - y[(i, j)] * inner[j]) / norms[j];
                    }
                }
                acc(*a, dx)?;
            }
            Op::ConcatRows(a, b) => {
                let top = self.value(*a).rows();
                let cols = g.cols();
                let (ga, gb) = g.data().split_at(top * cols);
                acc(*a, Matrix::new(top, cols, ga.to_vec())?)?;
                acc(*b, Matrix::new(g.rows() - top, cols, gb.to_vec())?)?;
            }
            Op::SelectRows(a, indices) => {
                let (r, c) = self.value(*a).shape();
                let mut dx = Matrix::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
                acc(*a, dx)?;
            }
            Op::SelectCols(a, indices) => {
                let (r, c) = self.value(*a).shape();
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    for (k, &j) in indices.iter().enumerate() {
                        dx[(i, j)] += g[(i, k)];
                    }
                }
                acc(*a, dx)?;
            }
            Op::LogSumExpRows(a, mask) => {
                let x = self.value(*a);
                let cols = x.cols();
                let mut dx = Matrix::zeros(x.rows(), cols);
                for i in 0..x.rows() {
                    let lse = node.value[(i, 0)];
                    let gi = g[(i, 0)];
                    let m = &mask[i * cols..(i + 1) * cols];
                    for ((d, &xv), &keep) in dx.row_mut(i).iter_mut().zip(x.row(i)).zip(m) {
                        if keep {
                            *d = gi * (xv - lse).exp();
                        }
                    }
                }
                acc(*a, dx)?;
            }
            Op::WeightedSum(a, w) => acc(*a, w.scale(g.item()))?,
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` around `x`.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for k in 0..x.data().len() {
            let mut plus = x.clone();
            plus.data_mut()[k] += h;
            let mut minus = x.clone();
            minus.data_mut()[k] -= h;
            out.data_mut()[k] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn sample() -> Matrix {
        Matrix::from_rows(&[[0.3, -1.2, 0.8], [1.1, 0.4, -0.5]]).unwrap()
    }

    fn check(build: impl Fn(&mut Tape, Var) -> Var) {
        let x0 = sample();
        let eval = |x: &Matrix| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let out = build(&mut t, v);
            t.value(out).item()
        };
        let mut t = Tape::new();
        let v = t.leaf(x0.clone());
        let out = build(&mut t, v);
        let analytic = t.gradient(out).unwrap().wrt(v);
        let numeric = numeric_grad(&x0, eval);
        assert!(
            analytic.max_abs_diff(&numeric) < 1e-7,
            "analytic {analytic:?} numeric {numeric:?}"
        );
    }

    fn weights(t: &Tape, v: Var) -> Matrix {
        let (r, c) = t.value(v).shape();
        let data = (0..r * c)
            .map(|k| 0.5 + 0.37 * k as f64 - 0.11 * (k * k) as f64)
            .collect();
        Matrix::new(r, c, data).unwrap()
    }

    #[test]
    fn square_at_three() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.gradient(y).unwrap().wrt(x).item(), 6.0);
    }

    #[test]
    fn constant_loss_has_zero_adjoints() {
        let mut t = Tape::new();
        let x = t.leaf(sample());
        let c = t.leaf(Matrix::scalar(4.0));
        let grads = t.gradient(c).unwrap();
        assert_eq!(grads.wrt(x), Matrix::zeros(2, 3));
    }

    #[test]
    fn primitives_match_finite_differences() {
        check(|t, x| {
            let y = t.softmax_rows(x);
            let w = weights(t, y);
            t.weighted_sum(y, w).unwrap()
        });
        check(|t, x| {
            let y = t.normalize_rows(x).unwrap();
            let w = weights(t, y);
            t.weighted_sum(y, w).unwrap()
        });
        check(|t, x| {
            let y = t.normalize_cols(x).unwrap();
            let w = weights(t, y);
            t.weighted_sum(y, w).unwrap()
        });
        check(|t, x| {
            let s = t.matmul_transb(x, x).unwrap();
            let mask = vec![false, true, true, false];
            let l = t.logsumexp_rows(s, mask).unwrap();
            t.sum(l).unwrap()
        });
        check(|t, x| {
            let xt = t.leaf(sample().transpose());
            let p = t.matmul(x, xt).unwrap();
            let e = t.exp(p);
            let l = t.log_clamped(e, 1e-12);
            let w = weights(t, l);
            t.weighted_sum(l, w).unwrap()
        });
        check(|t, x| {
            let a = t.select_rows(x, &[1, 1, 0]).unwrap();
            let b = t.select_cols(a, &[2, 0]).unwrap();
            let b = t.transpose(b);
            let b = t.transpose(b);
            let c = t.concat_rows(b, b).unwrap();
            let r = t.relu(c);
            let s = t.scale(r, -1.5);
            let w = weights(t, s);
            t.weighted_sum(s, w).unwrap()
        });
        check(|t, x| {
            let bias = t.leaf(Matrix::row_vector(&[0.1, -0.2, 0.3]));
            let y = t.add_row(x, bias).unwrap();
            let z = t.mul(y, x).unwrap();
            let d = t.sub(z, x).unwrap();
            let e = t.add(d, y).unwrap();
            let w = weights(t, e);
            t.weighted_sum(e, w).unwrap()
        });
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut t = Tape::new();
        let x = t.leaf(sample());
        let unused = t.leaf(sample());
        let y = t.sum(x).unwrap();
        let grads = t.gradient(y).unwrap();
        assert_eq!(grads.wrt(unused), Matrix::zeros(2, 3));
        assert_eq!(grads.wrt(x), Matrix::filled(2, 3, 1.0));
    }

    #[test]
    fn gradient_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(sample());
        assert!(t.gradient(x).is_err());
    }
}
