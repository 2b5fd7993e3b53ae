//! Reverse-mode differentiation over a recorded list of primitive ops.
//!
//! A [`Graph`] is built forward, one node per primitive, in topological order.
//! [`Graph::backward`] visits the nodes in exact reverse and accumulates
//! parameter gradients into a [`Gradients`] map. Parameters are read from a
//! borrowed [`ParamStore`], never copied into the graph.
//!
//! The op set is deliberately closed: everything the model needs beyond it is
//! composed from these primitives.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{dot, matmul_into, Scalar, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceMode {
    Mean,
    Max,
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + 1ᵀb` for a row vector `b`.
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor<T>,
        rstd: Vec<T>,
    },
    SoftmaxRows(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
    SegmentReduce {
        x: Var,
        runs: Vec<(usize, usize)>,
        mode: ReduceMode,
        argmax: Vec<usize>,
    },
    GatherRows(Var, Vec<usize>),
    GatherElements(Var, Vec<(usize, usize)>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Sum(Var),
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    track_params: bool,
}

fn shape_err<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Shape(format!("{op} {:?} vs {:?}", a.shape(), b.shape()))
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph whose parameter leaves receive gradients.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            track_params: true,
        }
    }

    /// Forward-only graph; nothing requires a gradient.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            track_params: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.value(*id),
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-param node without value"),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Constant, t, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulT(a, b), out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let mut out = ta.clone();
        let b = tb.data();
        for r in 0..out.rows() {
            for (o, &v) in out.row_mut(r).iter_mut().zip(b) {
                *o = *o + v;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Op::AddRow(a, row), out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_rows(ta.rows(), ta.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::from_f64_lossy(scale), T::from_f64_lossy(shift));
        let out = self.value(x).map(|v| s * v + c);
        let rg = self.rg(x);
        self.push(Op::Affine(x, scale), out, rg)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(Op::Relu(x), out, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(Op::Gelu(x), out, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(Op::Sigmoid(x), out, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(Op::Tanh(x), out, rg)
    }

    /// Row-wise layer normalization with learned `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.len() != n || tb.len() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let inv_n = T::one() / T::from_usize(n).expect("width");
        let mut normalized = Tensor::zeros(tx.rows(), n);
        let mut out = Tensor::zeros(tx.rows(), n);
        let mut rstds = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rstd = T::one() / (var + eps).sqrt();
            rstds.push(rstd);
            let nrow = normalized.row_mut(r);
            for (o, &v) in nrow.iter_mut().zip(row) {
                *o = (v - mean) * rstd;
            }
            let orow = out.row_mut(r);
            for j in 0..n {
                orow[j] = tg.data()[j] * normalized.get(r, j) + tb.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd: rstds,
            },
            out,
            rg,
        ))
    }

    /// Row-wise softmax. With `causal`, row `i` only spans columns `0..=i`
    /// and the masked entries are exactly zero.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Var {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let width = if causal { (r + 1).min(cols) } else { cols };
            let row = &tx.row(r)[..width];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let orow = &mut out.row_mut(r)[..width];
            let mut total = T::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                total = total + *o;
            }
            for o in orow.iter_mut() {
                *o = *o / total;
            }
        }
        let rg = self.rg(x);
        self.push(Op::SoftmaxRows(x), out, rg)
    }

    /// Summed softmax cross-entropy over rows: `Σ_r -log softmax(logits_r)[targets_r]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let tl = self.value(logits);
        if targets.len() != tl.rows() {
            return Err(Error::Shape(format!(
                "softmax_xent: {} targets for logits {:?}",
                targets.len(),
                tl.shape()
            )));
        }
        if tl.cols() < 2 {
            return Err(Error::Shape(format!(
                "softmax_xent needs at least 2 classes, got {:?}",
                tl.shape()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= tl.cols()) {
            return Err(Error::Shape(format!(
                "softmax_xent target {t} out of range for {:?}",
                tl.shape()
            )));
        }
        let mut probs = Tensor::zeros(tl.rows(), tl.cols());
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = tl.row(r);
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (j, v)| if v > best.1 { (j, v) } else { best });
            // log Σ exp(v - max) = ln(1 + rest); ln_1p keeps precision when
            // the target dominates.
            let rest: T = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, &v)| (v - max).exp())
                .sum();
            let log_sum = rest.ln_1p();
            let log_z = max + log_sum;
            loss = loss + ((max - row[t]) + log_sum);
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Per-segment mean or max over rows. `segment_ids` must be
    /// non-decreasing; equal ids form one segment.
    pub fn segment_reduce(&mut self, x: Var, segment_ids: &[usize], mode: ReduceMode) -> Result<Var> {
        let runs = segment_runs(segment_ids)?;
        self.segment_reduce_runs(x, runs, mode)
    }

    /// Segment reduction over explicit `(start, len)` row runs covering `x`.
    pub fn segment_reduce_runs(
        &mut self,
        x: Var,
        runs: Vec<(usize, usize)>,
        mode: ReduceMode,
    ) -> Result<Var> {
        let tx = self.value(x);
        let covered: usize = runs.iter().map(|r| r.1).sum();
        if covered != tx.rows() || runs.iter().any(|r| r.1 == 0) {
            return Err(Error::Shape(format!(
                "segment runs cover {covered} rows (or include an empty segment) for input {:?}",
                tx.shape()
            )));
        }
        let d = tx.cols();
        let mut out = Tensor::zeros(runs.len(), d);
        let mut argmax = Vec::new();
        for (s, &(start, len)) in runs.iter().enumerate() {
            let orow = out.row_mut(s);
            orow.copy_from_slice(tx.row(start));
            match mode {
                ReduceMode::Mean => {
                    for r in start + 1..start + len {
                        for (o, &v) in orow.iter_mut().zip(tx.row(r)) {
                            *o = *o + v;
                        }
                    }
                    let n = T::from_usize(len).expect("segment length");
                    for o in orow.iter_mut() {
                        *o = *o / n;
                    }
                }
                ReduceMode::Max => {
                    let mut best = vec![start; d];
                    for r in start + 1..start + len {
                        for (j, &v) in tx.row(r).iter().enumerate() {
                            if v > orow[j] {
                                orow[j] = v;
                                best[j] = r;
                            }
                        }
                    }
                    argmax.extend(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Op::SegmentReduce {
                x,
                runs,
                mode,
                argmax,
            },
            out,
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, ids: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tx.rows()) {
            return Err(Error::OutOfVocabulary {
                table: format!("{:?}", tx.shape()),
                id: bad,
                size: tx.rows(),
            });
        }
        let d = tx.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in &ids {
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::from_rows(ids.len(), d, data);
        let rg = self.rg(x);
        Ok(self.push(Op::GatherRows(x, ids), out, rg))
    }

    /// Picks `(row, col)` entries of `x` into a `rows × cols` result.
    pub fn gather_elements(
        &mut self,
        x: Var,
        index: Vec<(usize, usize)>,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let tx = self.value(x);
        if index.len() != rows * cols {
            return Err(Error::Shape(format!(
                "gather_elements: {} indices for {rows}x{cols}",
                index.len()
            )));
        }
        if let Some(&(r, c)) = index.iter().find(|&&(r, c)| r >= tx.rows() || c >= tx.cols()) {
            return Err(Error::Shape(format!(
                "gather_elements: ({r}, {c}) outside {:?}",
                tx.shape()
            )));
        }
        let data = index.iter().map(|&(r, c)| tx.get(r, c)).collect();
        let out = Tensor::from_rows(rows, cols, data);
        let rg = self.rg(x);
        Ok(self.push(Op::GatherElements(x, index), out, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_rows(rows, cols, data);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.cols() {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                tx.shape()
            )));
        }
        let mut data = Vec::with_capacity(tx.rows() * len);
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let out = Tensor::from_rows(tx.rows(), len, data);
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols(x, start), out, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let out = Tensor::from_rows(rows, cols, data);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.rows() {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} of {:?}",
                start + len,
                tx.shape()
            )));
        }
        let c = tx.cols();
        let out = Tensor::from_rows(len, c, tx.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(x);
        Ok(self.push(Op::SliceRows(x, start), out, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Op::Sum(x), out, rg)
    }

    /// Gradients of the `1 × 1` node `loss` with respect to every parameter
    /// reached from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut sweep = Sweep {
            grads: (0..=loss.0).map(|_| None).collect(),
            out: Gradients::new(),
        };
        if !self.rg(loss) {
            return Ok(sweep.out);
        }
        sweep.grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(dy) = sweep.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(idx, &dy, &mut sweep);
        }
        Ok(sweep.out)
    }

    fn backward_node(&self, idx: usize, dy: &Tensor<T>, sw: &mut Sweep<T>) {
        let node = &self.nodes[idx];
        let y = node.value.as_ref();
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => sw.out.accumulate_dense(*id, dy),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.send(*a, dy.matmul_t(tb).expect("shapes checked"), sw);
                }
                if self.rg(*b) {
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let mut g = vec![T::zero(); k * n];
                    // Aᵀ·dY
                    for i in 0..m {
                        let drow = &dy.data()[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == T::zero() {
                                continue;
                            }
                            for (o, &d) in g[p * n..(p + 1) * n].iter_mut().zip(drow) {
                                *o = *o + av * d;
                            }
                        }
                    }
                    self.send(*b, Tensor::from_rows(k, n, g), sw);
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.send(*a, dy.matmul(tb).expect("shapes checked"), sw);
                }
                if self.rg(*b) {
                    let (m, n, k) = (ta.rows(), tb.rows(), ta.cols());
                    let dyt = dy.transpose();
                    let mut g = vec![T::zero(); n * k];
                    matmul_into(dyt.data(), ta.data(), &mut g, n, m, k);
                    self.send(*b, Tensor::from_rows(n, k, g), sw);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    self.send(*a, dy.clone(), sw);
                }
                if self.rg(*b) {
                    self.send(*b, dy.clone(), sw);
                }
            }
            Op::AddRow(a, b) => {
                if self.rg(*a) {
                    self.send(*a, dy.clone(), sw);
                }
                if self.rg(*b) {
                    let mut g = vec![T::zero(); dy.cols()];
                    for r in 0..dy.rows() {
                        for (o, &v) in g.iter_mut().zip(dy.row(r)) {
                            *o = *o + v;
                        }
                    }
                    self.send(*b, Tensor::row_vector(g), sw);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.send(*a, zip_map(dy, tb, |d, v| d * v), sw);
                }
                if self.rg(*b) {
                    self.send(*b, zip_map(dy, ta, |d, v| d * v), sw);
                }
            }
            Op::Affine(x, scale) => {
                let s = T::from_f64_lossy(*scale);
                self.send(*x, dy.map(|d| d * s), sw);
            }
            Op::Relu(x) => {
                let g = zip_map(dy, self.value(*x), |d, v| if v > T::zero() { d } else { T::zero() });
                self.send(*x, g, sw);
            }
            Op::Gelu(x) => {
                let g = zip_map(dy, self.value(*x), |d, v| d * gelu_grad(v));
                self.send(*x, g, sw);
            }
            Op::Sigmoid(x) => {
                let g = zip_map(dy, y.unwrap(), |d, s| d * s * (T::one() - s));
                self.send(*x, g, sw);
            }
            Op::Tanh(x) => {
                let g = zip_map(dy, y.unwrap(), |d, t| d * (T::one() - t * t));
                self.send(*x, g, sw);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            } => {
                let n = normalized.cols();
                let tg = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![T::zero(); n];
                    let mut db = vec![T::zero(); n];
                    for r in 0..dy.rows() {
                        for j in 0..n {
                            dg[j] = dg[j] + dy.get(r, j) * normalized.get(r, j);
                            db[j] = db[j] + dy.get(r, j);
                        }
                    }
                    if self.rg(*gamma) {
                        self.send(*gamma, Tensor::row_vector(dg), sw);
                    }
                    if self.rg(*beta) {
                        self.send(*beta, Tensor::row_vector(db), sw);
                    }
                }
                if self.rg(*x) {
                    let inv_n = T::one() / T::from_usize(n).expect("width");
                    let mut dx = Tensor::zeros(dy.rows(), n);
                    for r in 0..dy.rows() {
                        let dxhat: Vec<T> = (0..n).map(|j| dy.get(r, j) * tg[j]).collect();
                        let xhat = normalized.row(r);
                        let mean_d = dxhat.iter().copied().sum::<T>() * inv_n;
                        let mean_dx = dot(&dxhat, xhat) * inv_n;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        }
                    }
                    self.send(*x, dx, sw);
                }
            }
            Op::SoftmaxRows(x) => {
                let p = y.unwrap();
                let mut dx = Tensor::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let inner = dot(dy.row(r), p.row(r));
                    for ((o, &pv), &dv) in dx.row_mut(r).iter_mut().zip(p.row(r)).zip(dy.row(r)) {
                        *o = pv * (dv - inner);
                    }
                }
                self.send(*x, dx, sw);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let scale = dy.item();
                let mut g = probs.map(|p| p * scale);
                for (r, &t) in targets.iter().enumerate() {
                    let c = g.cols();
                    g.data_mut()[r * c + t] = g.data()[r * c + t] - scale;
                }
                self.send(*logits, g, sw);
            }
            Op::SegmentReduce {
                x,
                runs,
                mode,
                argmax,
            } => {
                let tx = self.value(*x);
                let d = tx.cols();
                let mut dx = Tensor::zeros(tx.rows(), d);
                for (s, &(start, len)) in runs.iter().enumerate() {
                    let drow = dy.row(s);
                    match mode {
                        ReduceMode::Mean => {
                            let n = T::from_usize(len).expect("segment length");
                            for r in start..start + len {
                                for (o, &v) in dx.row_mut(r).iter_mut().zip(drow) {
                                    *o = v / n;
                                }
                            }
                        }
                        ReduceMode::Max => {
                            for (j, &v) in drow.iter().enumerate() {
                                let r = argmax[s * d + j];
                                dx.data_mut()[r * d + j] = v;
                            }
                        }
                    }
                }
                self.send(*x, dx, sw);
            }
            Op::GatherRows(x, ids) => {
                if let Op::Param(pid) = self.nodes[x.0].op {
                    for (k, &i) in ids.iter().enumerate() {
                        sw.out.accumulate_row(pid, i, dy.row(k));
                    }
                } else {
                    let tx = self.value(*x);
                    let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                    for (k, &i) in ids.iter().enumerate() {
                        for (o, &v) in dx.row_mut(i).iter_mut().zip(dy.row(k)) {
                            *o = *o + v;
                        }
                    }
                    self.send(*x, dx, sw);
                }
            }
            Op::GatherElements(x, index) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = Tensor::zeros(tx.rows(), c);
                for (&(r, col), &v) in index.iter().zip(dy.data()) {
                    dx.data_mut()[r * c + col] = dx.data()[r * c + col] + v;
                }
                self.send(*x, dx, sw);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(dy.rows() * w);
                        for r in 0..dy.rows() {
                            data.extend_from_slice(&dy.row(r)[offset..offset + w]);
                        }
                        self.send(p, Tensor::from_rows(dy.rows(), w, data), sw);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                for r in 0..dy.rows() {
                    dx.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                }
                self.send(*x, dx, sw);
            }
            Op::ConcatRows(parts) => {
                let c = dy.cols();
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.rg(p) {
                        let data = dy.data()[offset * c..(offset + h) * c].to_vec();
                        self.send(p, Tensor::from_rows(h, c, data), sw);
                    }
                    offset += h;
                }
            }
            Op::SliceRows(x, start) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = Tensor::zeros(tx.rows(), c);
                dx.data_mut()[start * c..(start + dy.rows()) * c].copy_from_slice(dy.data());
                self.send(*x, dx, sw);
            }
            Op::Sum(x) => {
                let tx = self.value(*x);
                self.send(*x, Tensor::full(tx.rows(), tx.cols(), dy.item()), sw);
            }
        }
    }

    fn send(&self, to: Var, grad: Tensor<T>, sw: &mut Sweep<T>) {
        if !self.rg(to) {
            return;
        }
        if let Op::Param(id) = self.nodes[to.0].op {
            sw.out.accumulate_dense(id, &grad);
            return;
        }
        match &mut sw.grads[to.0] {
            Some(g) => g.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }
}

struct Sweep<T> {
    grads: Vec<Option<Tensor<T>>>,
    out: Gradients<T>,
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_rows(a.rows(), a.cols(), data)
}

/// Converts non-decreasing segment ids into `(start, len)` runs.
pub fn segment_runs(segment_ids: &[usize]) -> Result<Vec<(usize, usize)>> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (i, w) in segment_ids.iter().enumerate() {
        if i > 0 && *w < segment_ids[i - 1] {
            return Err(Error::Invalid(format!(
                "segment ids must be non-decreasing: {} follows {} at row {i}",
                w,
                segment_ids[i - 1]
            )));
        }
        match runs.last_mut() {
            Some(last) if segment_ids[i - 1] == *w => last.1 += 1,
            _ => runs.push((i, 1)),
        }
    }
    Ok(runs)
}
