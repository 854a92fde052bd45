//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in strict reverse order of recording, so the adjoint of
//! a node is complete before it is propagated to its inputs. Gradients are
//! held in `f64` whatever the storage precision.

use std::sync::atomic::{AtomicU64, Ordering};

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::{Matrix, Real};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// An operation defined outside the substrate. `backward` returns one
/// entry per input, `None` meaning no gradient flows to that input.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Matrix<T>],
        output: &Matrix<T>,
        grad_output: &[f64],
    ) -> Result<Vec<Option<Vec<f64>>>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Sigmoid(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    RmsNorm { x: Var, gain: Var, eps: f64 },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    MulCol { x: Var, w: Var },
    GatherElems { x: Var, coords: Vec<(usize, usize)> },
    SoftmaxRows(Var),
    ColMean(Var),
    Dot { x: Var, weights: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Matrix<T>,
    op: Op<T>,
}

pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable #{} does not belong to this tape",
                v.index
            )));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.index].value.shape()
    }

    fn vals(&self, v: Var) -> &[T] {
        self.nodes[v.index].value.as_slice()
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let out = gemm_nn(self.vals(a), self.vals(b), m, k, n);
        Ok(self.push(Matrix::from_f64_vec(m, n, out), Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix<T>> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let (r, c) = self.shape(a);
        let out = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(x, y)| T::from_f64(f(x.to_f64(), y.to_f64())))
            .collect();
        Ok(Matrix::from_raw(r, c, out))
    }

    fn map_one(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Result<Matrix<T>> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        let out = self.vals(a).iter().map(|x| T::from_f64(f(x.to_f64()))).collect();
        Ok(Matrix::from_raw(r, c, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map_one(a, |x| x * c)?;
        Ok(self.push(v, Op::Scale(a, c)))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check(a)?;
        self.check(row)?;
        let ((m, n), (r1, n2)) = (self.shape(a), self.shape(row));
        if r1 != 1 || n != n2 {
            return Err(shape_err("add_row", (m, n), (r1, n2)));
        }
        let rv = self.vals(row).to_vec();
        let out = self
            .vals(a)
            .chunks(n)
            .flat_map(|r| r.iter().zip(&rv).map(|(x, y)| T::from_f64(x.to_f64() + y.to_f64())))
            .collect();
        Ok(self.push(Matrix::from_raw(m, n, out), Op::AddRow(a, row)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map_one(a, |x| 1.0 / (1.0 + (-x).exp()))?;
        Ok(self.push(v, Op::Sigmoid(a)))
    }

    /// Elementwise exponential. Inputs above ~709 overflow to `+inf`;
    /// callers are expected to shift their inputs beforehand.
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.map_one(a, f64::exp)?;
        Ok(self.push(v, Op::Exp(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s: f64 = self.vals(a).iter().map(|x| x.to_f64()).sum();
        Ok(self.push(Matrix::from_f64_vec(1, 1, vec![s]), Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.vals(a).len() as f64;
        let s: f64 = self.vals(a).iter().map(|x| x.to_f64()).sum();
        Ok(self.push(Matrix::from_f64_vec(1, 1, vec![s / n]), Op::Mean(a)))
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        let ((m, n), gshape) = (self.shape(x), self.shape(gain));
        if gshape != (1, n) {
            return Err(shape_err("rms_norm", (m, n), gshape));
        }
        let g = self.vals(gain).to_vec();
        let mut out = Vec::with_capacity(m * n);
        for row in self.vals(x).chunks(n) {
            let inv = inv_rms(row, eps);
            out.extend(row.iter().zip(&g).map(|(v, w)| T::from_f64(v.to_f64() * inv * w.to_f64())));
        }
        Ok(self.push(Matrix::from_raw(m, n, out), Op::RmsNorm { x, gain, eps }))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let (v, d) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {v}")));
        }
        let t = self.vals(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let value = Matrix::from_raw(ids.len(), d, out);
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check(x)?;
        let (m, d) = self.shape(x);
        if idx.iter().any(|&i| i >= m) {
            return Err(Error::Shape(format!("gather_rows index outside {m} rows")));
        }
        let src = self.vals(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Matrix::from_raw(idx.len(), d, out);
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Sums row `r` of `x` into row `idx[r]` of an `rows x d` zero matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        self.check(x)?;
        let (m, d) = self.shape(x);
        if idx.len() != m || idx.iter().any(|&i| i >= rows) {
            return Err(Error::Shape(format!(
                "scatter_rows: {} indices for {m} rows into {rows}",
                idx.len()
            )));
        }
        let mut acc = vec![0.0f64; rows * d];
        for (r, &target) in idx.iter().enumerate() {
            for (o, v) in acc[target * d..(target + 1) * d].iter_mut().zip(&self.vals(x)[r * d..(r + 1) * d]) {
                *o += v.to_f64();
            }
        }
        let value = Matrix::from_f64_vec(rows, d, acc);
        Ok(self.push(value, Op::ScatterRows { x, idx: idx.to_vec() }))
    }

    /// Scales row `r` of `x` by `w[r]`, `w` being `m x 1`.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let ((m, d), ws) = (self.shape(x), self.shape(w));
        if ws != (m, 1) {
            return Err(shape_err("mul_col", (m, d), ws));
        }
        let wv = self.vals(w).to_vec();
        let out = self
            .vals(x)
            .chunks(d)
            .zip(&wv)
            .flat_map(|(row, s)| row.iter().map(move |v| T::from_f64(v.to_f64() * s.to_f64())))
            .collect();
        Ok(self.push(Matrix::from_raw(m, d, out), Op::MulCol { x, w }))
    }

    /// Picks single entries into an `n x 1` column.
    pub fn gather_elems(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        self.check(x)?;
        let (m, n) = self.shape(x);
        if coords.iter().any(|&(r, c)| r >= m || c >= n) {
            return Err(Error::Shape(format!("gather_elems coordinate outside {m}x{n}")));
        }
        let v = self.value(x);
        let out = coords.iter().map(|&(r, c)| v.get(r, c)).collect();
        let value = Matrix::from_raw(coords.len(), 1, out);
        Ok(self.push(value, Op::GatherElems { x, coords: coords.to_vec() }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (m, n) = self.shape(x);
        let mut out = Vec::with_capacity(m * n);
        for row in self.vals(x).chunks(n) {
            out.extend(softmax(row).into_iter().map(T::from_f64));
        }
        Ok(self.push(Matrix::from_raw(m, n, out), Op::SoftmaxRows(x)))
    }

    /// Column means, `m x n -> 1 x n`.
    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (m, n) = self.shape(x);
        let mut acc = vec![0.0f64; n];
        for row in self.vals(x).chunks(n) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v.to_f64();
            }
        }
        acc.iter_mut().for_each(|a| *a /= m as f64);
        Ok(self.push(Matrix::from_f64_vec(1, n, acc), Op::ColMean(x)))
    }

    /// `sum(x * weights)` against constant weights.
    pub fn dot_const(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        self.check(x)?;
        if weights.len() != self.vals(x).len() {
            return Err(Error::Shape("dot_const: weight length differs".into()));
        }
        let s: f64 = self.vals(x).iter().zip(weights).map(|(v, w)| v.to_f64() * w).sum();
        let value = Matrix::from_f64_vec(1, 1, vec![s]);
        Ok(self.push(value, Op::Dot { x, weights: weights.to_vec() }))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let (m, n) = self.shape(logits);
        if targets.len() != m || targets.iter().any(|&t| t >= n) {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {m} rows of width {n}",
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (row, &t) in self.vals(logits).chunks(n).zip(targets) {
            let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[t].to_f64();
        }
        let value = Matrix::from_f64_vec(1, 1, vec![total / m as f64]);
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec() }))
    }

    /// Records an externally defined operation with a precomputed output.
    pub fn custom(&mut self, inputs: &[Var], output: Matrix<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        Ok(self.push(output, Op::Custom { inputs: inputs.to_vec(), op }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.shape(loss) != (1, 1) {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(vec![1.0]);
        let mut order = Vec::new();

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            order.push(i);
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
            order,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let ga = gemm_nt(g, self.vals(*b), m, n, k);
                let gb = gemm_tn(self.vals(*a), g, m, k, n);
                add_into(grads, *a, &ga, m * k);
                add_into(grads, *b, &gb, k * n);
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g, g.len());
                add_into(grads, *b, g, g.len());
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g, g.len());
                with_grad(grads, *b, g.len(), |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                with_grad(grads, *a, g.len(), |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y.to_f64();
                    }
                });
                with_grad(grads, *b, g.len(), |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y.to_f64();
                    }
                });
            }
            Op::Scale(a, c) => {
                with_grad(grads, *a, g.len(), |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x));
            }
            Op::AddRow(a, row) => {
                let n = self.shape(*row).1;
                add_into(grads, *a, g, g.len());
                with_grad(grads, *row, n, |gr| {
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.as_slice();
                with_grad(grads, *a, g.len(), |ga| {
                    for ((o, x), s) in ga.iter_mut().zip(g).zip(y) {
                        let s = s.to_f64();
                        *o += x * s * (1.0 - s);
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.as_slice();
                with_grad(grads, *a, g.len(), |ga| {
                    for ((o, x), e) in ga.iter_mut().zip(g).zip(y) {
                        *o += x * e.to_f64();
                    }
                });
            }
            Op::Sum(a) => {
                let n = self.vals(*a).len();
                with_grad(grads, *a, n, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(a) => {
                let n = self.vals(*a).len();
                with_grad(grads, *a, n, |ga| ga.iter_mut().for_each(|o| *o += g[0] / n as f64));
            }
            Op::RmsNorm { x, gain, eps } => {
                let (m, n) = self.shape(*x);
                let xv = self.vals(*x);
                let gv: Vec<f64> = self.vals(*gain).iter().map(|v| v.to_f64()).collect();
                let mut gx = vec![0.0; m * n];
                let mut gg = vec![0.0; n];
                for r in 0..m {
                    let row = &xv[r * n..(r + 1) * n];
                    let gy = &g[r * n..(r + 1) * n];
                    let inv = inv_rms(row, *eps);
                    let mut dot = 0.0;
                    for d in 0..n {
                        let xd = row[d].to_f64();
                        dot += gy[d] * gv[d] * xd;
                        gg[d] += gy[d] * xd * inv;
                    }
                    let coef = inv * inv * inv * dot / n as f64;
                    for d in 0..n {
                        gx[r * n + d] = inv * gv[d] * gy[d] - row[d].to_f64() * coef;
                    }
                }
                add_into(grads, *x, &gx, m * n);
                add_into(grads, *gain, &gg, n);
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.shape(*table);
                with_grad(grads, *table, v * d, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, x) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += x;
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let (m, d) = self.shape(*x);
                with_grad(grads, *x, m * d, |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, v) in gx[src * d..(src + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ScatterRows { x, idx } => {
                let (m, d) = self.shape(*x);
                with_grad(grads, *x, m * d, |gx| {
                    for (r, &dst) in idx.iter().enumerate() {
                        for (o, v) in gx[r * d..(r + 1) * d].iter_mut().zip(&g[dst * d..(dst + 1) * d]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::MulCol { x, w } => {
                let (m, d) = self.shape(*x);
                let (xv, wv) = (self.vals(*x), self.vals(*w));
                with_grad(grads, *x, m * d, |gx| {
                    for r in 0..m {
                        let s = wv[r].to_f64();
                        for c in 0..d {
                            gx[r * d + c] += g[r * d + c] * s;
                        }
                    }
                });
                with_grad(grads, *w, m, |gw| {
                    for r in 0..m {
                        gw[r] += (0..d).map(|c| g[r * d + c] * xv[r * d + c].to_f64()).sum::<f64>();
                    }
                });
            }
            Op::GatherElems { x, coords } => {
                let (m, n) = self.shape(*x);
                with_grad(grads, *x, m * n, |gx| {
                    for (k, &(r, c)) in coords.iter().enumerate() {
                        gx[r * n + c] += g[k];
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = self.shape(*x);
                let y = out.as_slice();
                with_grad(grads, *x, m * n, |gx| {
                    for r in 0..m {
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a.to_f64() * b).sum();
                        for c in 0..n {
                            gx[r * n + c] += ys[c].to_f64() * (gs[c] - dot);
                        }
                    }
                });
            }
            Op::ColMean(x) => {
                let (m, n) = self.shape(*x);
                with_grad(grads, *x, m * n, |gx| {
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += g[c] / m as f64;
                        }
                    }
                });
            }
            Op::Dot { x, weights } => {
                with_grad(grads, *x, weights.len(), |gx| {
                    gx.iter_mut().zip(weights).for_each(|(o, w)| *o += g[0] * w);
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let (m, n) = self.shape(*logits);
                let lv = self.vals(*logits);
                with_grad(grads, *logits, m * n, |gl| {
                    let scale = g[0] / m as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        let p = softmax(&lv[r * n..(r + 1) * n]);
                        for c in 0..n {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * n + c] += scale * (p[c] - onehot);
                        }
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Matrix<T>> = inputs.iter().map(|v| &self.nodes[v.index].value).collect();
                let parts = op.backward(&values, out, g)?;
                if parts.len() != inputs.len() {
                    return Err(Error::Tape(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        parts.len(),
                        inputs.len()
                    )));
                }
                for (v, part) in inputs.iter().zip(parts) {
                    if let Some(part) = part {
                        add_into(grads, *v, &part, self.vals(*v).len());
                    }
                }
            }
        }
        Ok(())
    }
}

fn inv_rms<T: Real>(row: &[T], eps: f64) -> f64 {
    let ms = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>() / row.len() as f64;
    1.0 / (ms + eps).sqrt()
}

fn softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= z);
    e
}

fn with_grad(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.index].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], len: usize) {
    debug_assert_eq!(g.len(), len);
    with_grad(grads, v, len, |slot| slot.iter_mut().zip(g).for_each(|(o, x)| *o += x));
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<Vec<f64>>>,
    order: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Result<Matrix<f64>> {
        if v.tape != self.tape || v.index >= self.shapes.len() {
            return Err(Error::Tape("variable does not belong to this tape".into()));
        }
        let (r, c) = self.shapes[v.index];
        Ok(match &self.grads[v.index] {
            Some(g) => Matrix::from_raw(r, c, g.clone()),
            None => Matrix::zeros(r, c),
        })
    }

    pub fn slice(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index)?.as_deref()
    }

    /// Node indices in the order the reverse sweep processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.order
    }
}
