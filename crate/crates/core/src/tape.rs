//! Reverse-mode autodiff on an arena tape.
//!
//! Each op pushes one node holding the forward value and the indices of its
//! inputs. Node indices grow monotonically, so the tape itself is a valid
//! topological order and `backward` is a single reverse sweep that
//! accumulates adjoints. Gradients land on every node with
//! `requires_grad = true`; leaves created with [`Tape::leaf`] stay out of the
//! sweep entirely, as does anything computed purely from them.

use crate::error::{Error, Result};
use crate::tensor::{col_sums, matmul_nn, matmul_nt, matmul_tn, Matrix};

/// Index of a node on its tape. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    /// A * B
    Matmul(TensorId, TensorId),
    /// A * B^T
    MatmulNt(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    /// Elementwise product, equal shapes.
    Mul(TensorId, TensorId),
    /// Rows of A scaled by the entries of a column vector.
    MulCol(TensorId, TensorId),
    Scale(TensorId, f64),
    /// A plus a [1 x n] bias broadcast over rows.
    AddBias(TensorId, TensorId),
    Relu(TensorId),
    SoftmaxRows(TensorId),
    LogSoftmaxRows(TensorId),
    Exp(TensorId),
    ConcatCols(TensorId, TensorId),
    ConcatRows(TensorId, TensorId),
    /// Columns [from, to) of the input.
    SliceCols(TensorId, usize, usize),
    RowSum(TensorId),
    SumAll(TensorId),
}

/// One tape node: forward value plus accumulated gradient.
pub struct Tensor {
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    op: Op,
}

impl Tensor {
    pub fn value(&self) -> &Matrix {
        &self.value
    }

    /// Gradient accumulated by `backward`, if any sweep has reached this node.
    pub fn grad(&self) -> Option<&Matrix> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
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

    /// Constant input. Never receives a gradient and blocks propagation
    /// through subtrees that depend only on constants.
    pub fn leaf(&mut self, value: Matrix) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input. `backward` accumulates into its gradient.
    pub fn leaf_grad(&mut self, value: Matrix) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: TensorId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Clears accumulated gradients on every node, keeping values intact.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Tensor {
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push_unary(&mut self, input: TensorId, value: Matrix, op: Op) -> TensorId {
        let rg = self.nodes[input.0].requires_grad;
        self.push(value, op, rg)
    }

    fn push_binary(&mut self, a: TensorId, b: TensorId, value: Matrix, op: Op) -> TensorId {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    // ── forward ops ──────────────────────────────────────────────────────

    /// A [m x k] * B [k x n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Error::shape("matmul", format!("{ar}x{ac} * {br}x{bc}")));
        }
        let value = matmul_nn(self.value(a), self.value(b));
        Ok(self.push_binary(a, b, value, Op::Matmul(a, b)))
    }

    /// A [m x k] * B^T with B [n x k].
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != bc {
            return Err(Error::shape("matmul_nt", format!("{ar}x{ac} * ({br}x{bc})^T")));
        }
        let value = matmul_nt(self.value(a), self.value(b));
        Ok(self.push_binary(a, b, value, Op::MatmulNt(a, b)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn elementwise_binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::shape(name, format!("{sa:?} vs {sb:?}")));
        }
        let mut value = self.value(a).clone();
        for (v, y) in value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *v = f(*v, *y);
        }
        Ok(self.push_binary(a, b, value, op))
    }

    /// Each row of A [m x n] scaled by the matching entry of C [m x 1].
    pub fn mul_col(&mut self, a: TensorId, c: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.value(a).shape();
        let (cr, cc) = self.value(c).shape();
        if cc != 1 || cr != ar {
            return Err(Error::shape("mul_col", format!("{ar}x{ac} vs {cr}x{cc}")));
        }
        let mut value = self.value(a).clone();
        for r in 0..ar {
            let s = self.nodes[c.0].value.get(r, 0);
            for x in &mut value.data_mut()[r * ac..(r + 1) * ac] {
                *x *= s;
            }
        }
        Ok(self.push_binary(a, c, value, Op::MulCol(a, c)))
    }

    pub fn scale(&mut self, a: TensorId, s: f64) -> TensorId {
        let value = self.value(a).map(|x| x * s);
        self.push_unary(a, value, Op::Scale(a, s))
    }

    /// A [m x n] plus bias [1 x n] added to every row.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(bias).shape();
        if br != 1 || bc != ac {
            return Err(Error::shape("add_bias", format!("{ar}x{ac} vs {br}x{bc}")));
        }
        let mut value = self.value(a).clone();
        for r in 0..ar {
            for (x, b) in value.data_mut()[r * ac..(r + 1) * ac]
                .iter_mut()
                .zip(self.nodes[bias.0].value.data())
            {
                *x += b;
            }
        }
        Ok(self.push_binary(a, bias, value, Op::AddBias(a, bias)))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push_unary(a, value, Op::Relu(a))
    }

    /// Softmax over each row, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let input = self.value(a);
        let (rows, cols) = input.shape();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = input.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                value.set(r, c, e);
                sum += e;
            }
            for c in 0..cols {
                value.set(r, c, value.get(r, c) / sum);
            }
        }
        self.push_unary(a, value, Op::SoftmaxRows(a))
    }

    /// Log-softmax over each row. Safe where softmax would underflow.
    pub fn log_softmax_rows(&mut self, a: TensorId) -> TensorId {
        let input = self.value(a);
        let (rows, cols) = input.shape();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = input.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let log_sum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for c in 0..cols {
                value.set(r, c, row[c] - max - log_sum);
            }
        }
        self.push_unary(a, value, Op::LogSoftmaxRows(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let value = self.value(a).map(f64::exp);
        self.push_unary(a, value, Op::Exp(a))
    }

    /// [m x p] ++ [m x q] side by side.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ar != br {
            return Err(Error::shape("concat_cols", format!("{ar}x{ac} vs {br}x{bc}")));
        }
        let mut data = Vec::with_capacity(ar * (ac + bc));
        for r in 0..ar {
            data.extend_from_slice(self.nodes[a.0].value.row(r));
            data.extend_from_slice(self.nodes[b.0].value.row(r));
        }
        let value = Matrix::from_vec(ar, ac + bc, data)?;
        Ok(self.push_binary(a, b, value, Op::ConcatCols(a, b)))
    }

    /// [p x n] stacked on top of [q x n].
    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != bc {
            return Err(Error::shape("concat_rows", format!("{ar}x{ac} vs {br}x{bc}")));
        }
        let mut data = Vec::with_capacity((ar + br) * ac);
        data.extend_from_slice(self.nodes[a.0].value.data());
        data.extend_from_slice(self.nodes[b.0].value.data());
        let value = Matrix::from_vec(ar + br, ac, data)?;
        Ok(self.push_binary(a, b, value, Op::ConcatRows(a, b)))
    }

    /// Columns [from, to) of A.
    pub fn slice_cols(&mut self, a: TensorId, from: usize, to: usize) -> Result<TensorId> {
        let (rows, cols) = self.value(a).shape();
        if from > to || to > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("[{from}, {to}) of {rows}x{cols}"),
            ));
        }
        let mut data = Vec::with_capacity(rows * (to - from));
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[a.0].value.row(r)[from..to]);
        }
        let value = Matrix::from_vec(rows, to - from, data)?;
        Ok(self.push_unary(a, value, Op::SliceCols(a, from, to)))
    }

    /// Row sums of A [m x n] as a column [m x 1].
    pub fn row_sum(&mut self, a: TensorId) -> TensorId {
        let input = self.value(a);
        let sums: Vec<f64> = (0..input.rows()).map(|r| input.row(r).iter().sum()).collect();
        let value = Matrix::col_vector(&sums);
        self.push_unary(a, value, Op::RowSum(a))
    }

    /// Sum of all entries as a 1x1 matrix.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push_unary(a, Matrix::scalar_matrix(total), Op::SumAll(a))
    }

    /// softmax(Q K^T / sqrt(d_k)) V for Q [q x d], K [n x d], V [n x p].
    /// With a single key row the weight is exactly 1 and the output equals V.
    pub fn scaled_dot_attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
    ) -> Result<TensorId> {
        let (kr, kc) = self.value(k).shape();
        let (vr, _) = self.value(v).shape();
        if kr == 0 {
            return Err(Error::NoIncomingMessages);
        }
        if kr != vr {
            return Err(Error::shape(
                "scaled_dot_attention",
                format!("{kr} keys vs {vr} values"),
            ));
        }
        let scores = self.matmul_nt(q, k)?;
        let scaled = self.scale(scores, 1.0 / (kc as f64).sqrt());
        let weights = self.softmax_rows(scaled);
        self.matmul(weights, v)
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Seeds the loss adjoint with 1 and
    /// accumulates `d loss / d node` into every node that requires a
    /// gradient. Repeated calls keep accumulating; use [`Tape::zero_grads`]
    /// between independent passes.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let (lr, lc) = self.value(loss).shape();
        if (lr, lc) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: lr, cols: lc });
        }
        let mut pending: Vec<Option<Matrix>> = Vec::new();
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(Matrix::scalar_matrix(1.0));

        for i in (0..=loss.0).rev() {
            let Some(out_grad) = pending[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &mut self.nodes[i].grad {
                Some(g) => g.add_assign(&out_grad),
                slot @ None => *slot = Some(out_grad.clone()),
            }
            let op = self.nodes[i].op;
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let ga = matmul_nt(&out_grad, self.value(b));
                    let gb = matmul_tn(self.value(a), &out_grad);
                    self.stage(&mut pending, a, ga);
                    self.stage(&mut pending, b, gb);
                }
                Op::MatmulNt(a, b) => {
                    // C = A B^T: dA = dC B, dB = dC^T A.
                    let ga = matmul_nn(&out_grad, self.value(b));
                    let gb = matmul_tn(&out_grad, self.value(a));
                    self.stage(&mut pending, a, ga);
                    self.stage(&mut pending, b, gb);
                }
                Op::Add(a, b) => {
                    self.stage(&mut pending, a, out_grad.clone());
                    self.stage(&mut pending, b, out_grad);
                }
                Op::Sub(a, b) => {
                    self.stage(&mut pending, a, out_grad.clone());
                    self.stage(&mut pending, b, out_grad.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = elementwise_product(&out_grad, self.value(b));
                    let gb = elementwise_product(&out_grad, self.value(a));
                    self.stage(&mut pending, a, ga);
                    self.stage(&mut pending, b, gb);
                }
                Op::MulCol(a, c) => {
                    let av = self.value(a);
                    let cv = self.value(c);
                    let (rows, cols) = av.shape();
                    let mut ga = out_grad.clone();
                    let mut gc = Matrix::zeros(rows, 1);
                    for r in 0..rows {
                        let s = cv.get(r, 0);
                        let mut dot = 0.0;
                        for col in 0..cols {
                            dot += out_grad.get(r, col) * av.get(r, col);
                            let v = ga.get(r, col) * s;
                            ga.set(r, col, v);
                        }
                        gc.set(r, 0, dot);
                    }
                    self.stage(&mut pending, a, ga);
                    self.stage(&mut pending, c, gc);
                }
                Op::Scale(a, s) => {
                    self.stage(&mut pending, a, out_grad.map(|x| x * s));
                }
                Op::AddBias(a, bias) => {
                    self.stage(&mut pending, bias, col_sums(&out_grad));
                    self.stage(&mut pending, a, out_grad);
                }
                Op::Relu(a) => {
                    // Subgradient 0 at the kink.
                    let av = self.value(a);
                    let mut ga = out_grad;
                    for (g, &x) in ga.data_mut().iter_mut().zip(av.data()) {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    self.stage(&mut pending, a, ga);
                }
                Op::SoftmaxRows(a) => {
                    // dx = y * (dy - <dy, y>) per row.
                    let y = &self.nodes[i].value;
                    let (rows, cols) = y.shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let dot: f64 = (0..cols).map(|c| out_grad.get(r, c) * y.get(r, c)).sum();
                        for c in 0..cols {
                            ga.set(r, c, y.get(r, c) * (out_grad.get(r, c) - dot));
                        }
                    }
                    self.stage(&mut pending, a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    // dx = dy - softmax * sum(dy) per row; softmax = exp(y).
                    let y = &self.nodes[i].value;
                    let (rows, cols) = y.shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let total: f64 = (0..cols).map(|c| out_grad.get(r, c)).sum();
                        for c in 0..cols {
                            ga.set(r, c, out_grad.get(r, c) - y.get(r, c).exp() * total);
                        }
                    }
                    self.stage(&mut pending, a, ga);
                }
                Op::Exp(a) => {
                    let ga = elementwise_product(&out_grad, &self.nodes[i].value);
                    self.stage(&mut pending, a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(a).cols();
                    let rows = out_grad.rows();
                    let total = out_grad.cols();
                    let mut ga = Matrix::zeros(rows, ac);
                    let mut gb = Matrix::zeros(rows, total - ac);
                    for r in 0..rows {
                        for c in 0..ac {
                            ga.set(r, c, out_grad.get(r, c));
                        }
                        for c in ac..total {
                            gb.set(r, c - ac, out_grad.get(r, c));
                        }
                    }
                    self.stage(&mut pending, a, ga);
                    self.stage(&mut pending, b, gb);
                }
                Op::ConcatRows(a, b) => {
                    let ar = self.value(a).rows();
                    let cols = out_grad.cols();
                    let br = out_grad.rows() - ar;
                    let ga = Matrix::from_vec(ar, cols, out_grad.data()[..ar * cols].to_vec())
                        .expect("split preserves length");
                    let gb = Matrix::from_vec(br, cols, out_grad.data()[ar * cols..].to_vec())
                        .expect("split preserves length");
                    self.stage(&mut pending, a, ga);
                    self.stage(&mut pending, b, gb);
                }
                Op::SliceCols(a, from, _to) => {
                    let (rows, cols) = self.value(a).shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..out_grad.cols() {
                            ga.set(r, from + c, out_grad.get(r, c));
                        }
                    }
                    self.stage(&mut pending, a, ga);
                }
                Op::RowSum(a) => {
                    let (rows, cols) = self.value(a).shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let g = out_grad.get(r, 0);
                        for c in 0..cols {
                            ga.set(r, c, g);
                        }
                    }
                    self.stage(&mut pending, a, ga);
                }
                Op::SumAll(a) => {
                    let (rows, cols) = self.value(a).shape();
                    let ga = Matrix::filled(rows, cols, out_grad.scalar());
                    self.stage(&mut pending, a, ga);
                }
            }
        }
        Ok(())
    }

    /// Adds `grad` to the pending adjoint of `id` if that node wants one.
    fn stage(&self, pending: &mut [Option<Matrix>], id: TensorId, grad: Matrix) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut pending[id.0] {
            Some(g) => g.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }
}

fn elementwise_product(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
        *x *= y;
    }
    out
}
