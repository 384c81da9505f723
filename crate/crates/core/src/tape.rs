//! Reverse-mode differentiation over a linear tape of rank-2 kernels.
//!
//! Nodes are appended in execution order, so a node's parents always precede
//! it and the reverse pass is a single backwards sweep. A tape is built for
//! one forward computation and dropped afterwards; data-parallel training
//! gives each worker its own tape and sums the resulting gradients.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Variance epsilon for layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEF: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Finite-value validation is on in debug builds.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, parents: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Numeric { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input; gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        if self.check_finite && !tensor.all_finite() {
            return Err(Error::Numeric { op: "leaf" });
        }
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Loads a named parameter once per tape and returns the cached node on
    /// later calls.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.leaf(store.require(name)?.clone())?;
        self.nodes[v.0].param = Some(name.to_string());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`, the natural layout for `x W^T` with `W` stored `out x in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("{m}x{k} * ({n}x{k2})^T")));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul_nt", Tensor::matrix(m, n, out), Op::MatMulNT(a, b), &[a, b])
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * factor).collect())?;
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let (br, bn) = self.dims(bias);
        if br != 1 || bn != n {
            return Err(Error::dim("add_row", format!("{m}x{n} + {br}x{bn}")));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push("add_row", Tensor::matrix(m, n, out), Op::AddRow(x, bias), &[x, bias])
    }

    /// Row-wise softmax, shifted by the row maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push("softmax", Tensor::matrix(m, n, out), Op::Softmax(x), &[x])
    }

    /// Row-wise layer normalisation with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        for (name, p) in [("gain", gain), ("offset", offset)] {
            if self.dims(p) != (1, n) {
                return Err(Error::dim("layer_norm", format!("{name} must be 1x{n}")));
            }
        }
        let g = self.value(gain).data();
        let b = self.value(offset).data();
        let mut xhat = self.value(x).data().to_vec();
        let mut rstd = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for (row, out_row) in xhat.chunks_mut(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for ((v, o), (gv, bv)) in row.iter_mut().zip(out_row.iter_mut()).zip(g.iter().zip(b)) {
                *v = (*v - mean) * r;
                *o = *v * gv + bv;
            }
            rstd.push(r);
        }
        let op = Op::LayerNorm {
            x,
            gain,
            offset,
            xhat,
            rstd,
        };
        self.push("layer_norm", Tensor::matrix(m, n, out), op, &[x, gain, offset])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::dim("embedding", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::dim("embedding", format!("id {bad} outside table of {v} rows")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push("embedding", Tensor::matrix(ids.len(), d, out), op, &[table])
    }

    /// Column means over all rows: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut out = vec![0.0; n];
        for row in self.value(x).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push("mean_rows", Tensor::matrix(1, n, out), Op::MeanRows(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > m {
            return Err(Error::dim("slice_rows", format!("rows {start}..{} of {m}", start + len)));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        self.push("slice_rows", Tensor::matrix(len, n, out), Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", format!("cols {start}..{} of {n}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for row in src.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push("slice_cols", Tensor::matrix(m, len, out), Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let m = self.dims(first).0;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let n: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push("concat_cols", Tensor::matrix(m, n, out), Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Mean negative log-likelihood of `targets[i]` under the softmax of
    /// logits row `i`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::dim("cross_entropy", format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::dim("cross_entropy", format!("target {bad} outside {n} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(n).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss / m as f64), op, &[logits])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut named = BTreeMap::new();
        for (name, &v) in &self.params {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            let t = &self.nodes[v.0].value;
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::new(t.shape().to_vec(), vec![0.0; t.numel()]).expect("shape"));
            named.insert(name.clone(), g);
        }
        Ok(Gradients { nodes: grads, named })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.nodes[v.0].value.shape().to_vec(), data).expect("shape");

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).cols();
                if wants(a) {
                    acc(a, like(a, matmul_nt(g.data(), val(b).data(), m, n, k)));
                }
                if wants(b) {
                    acc(b, like(b, matmul_tn(val(a).data(), g.data(), m, k, n)));
                }
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).rows();
                if wants(a) {
                    acc(a, like(a, matmul(g.data(), val(b).data(), m, n, k)));
                }
                if wants(b) {
                    acc(b, like(b, matmul_tn(g.data(), val(a).data(), m, n, k)));
                }
            }
            &Op::Add(a, b) => {
                acc(a, like(a, g.data().to_vec()));
                acc(b, like(b, g.data().to_vec()));
            }
            &Op::Sub(a, b) => {
                acc(a, like(a, g.data().to_vec()));
                acc(b, like(b, g.data().iter().map(|v| -v).collect()));
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    acc(a, like(a, g.data().iter().zip(val(b).data()).map(|(x, y)| x * y).collect()));
                }
                if wants(b) {
                    acc(b, like(b, g.data().iter().zip(val(a).data()).map(|(x, y)| x * y).collect()));
                }
            }
            &Op::Scale(a, f) => acc(a, like(a, g.data().iter().map(|v| v * f).collect())),
            &Op::AddRow(x, bias) => {
                acc(x, like(x, g.data().to_vec()));
                if wants(bias) {
                    let n = val(bias).cols();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(bias, like(bias, gb));
                }
            }
            &Op::Softmax(x) => {
                let n = val(x).cols();
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for ((gy_row, y_row), gx_row) in g.data().chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gy_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                    for ((o, gy), yv) in gx_row.iter_mut().zip(gy_row).zip(y_row) {
                        *o = yv * (gy - dot);
                    }
                }
                acc(x, like(x, gx));
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            } => {
                let n = val(*x).cols();
                let gv = val(*gain).data();
                if wants(*gain) || wants(*offset) {
                    let mut gg = vec![0.0; n];
                    let mut gb = vec![0.0; n];
                    for (gy_row, xh_row) in g.data().chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gy_row[j] * xh_row[j];
                            gb[j] += gy_row[j];
                        }
                    }
                    acc(*gain, like(*gain, gg));
                    acc(*offset, like(*offset, gb));
                }
                if wants(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    let nf = n as f64;
                    for (((gy_row, xh_row), gx_row), &r) in
                        g.data().chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).zip(rstd)
                    {
                        let dxh: Vec<f64> = gy_row.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / nf;
                        let mean_dxh_xh = dxh.iter().zip(xh_row).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for j in 0..n {
                            gx_row[j] = r * (dxh[j] - mean_dxh - xh_row[j] * mean_dxh_xh);
                        }
                    }
                    acc(*x, like(*x, gx));
                }
            }
            &Op::Gelu(x) => {
                let gx = g
                    .data()
                    .iter()
                    .zip(val(x).data())
                    .map(|(gy, &v)| gy * gelu_derivative(v))
                    .collect();
                acc(x, like(x, gx));
            }
            Op::Embedding { table, ids } => {
                let t = val(*table);
                let d = t.cols();
                let mut gt = vec![0.0; t.numel()];
                for (row, &i) in g.data().chunks(d).zip(ids) {
                    for (o, v) in gt[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*table, like(*table, gt));
            }
            &Op::MeanRows(x) => {
                let m = val(x).rows();
                let row: Vec<f64> = g.data().iter().map(|v| v / m as f64).collect();
                acc(x, like(x, row.repeat(m)));
            }
            &Op::SumAll(x) => {
                let n = val(x).numel();
                acc(x, like(x, vec![g.item(); n]));
            }
            &Op::MeanAll(x) => {
                let n = val(x).numel();
                acc(x, like(x, vec![g.item() / n as f64; n]));
            }
            &Op::SliceRows { x, start } => {
                let n = val(x).cols();
                let mut gx = vec![0.0; val(x).numel()];
                gx[start * n..start * n + g.numel()].copy_from_slice(g.data());
                acc(x, like(x, gx));
            }
            &Op::SliceCols { x, start } => {
                let n = val(x).cols();
                let len = g.cols();
                let mut gx = vec![0.0; val(x).numel()];
                for (gx_row, g_row) in gx.chunks_mut(n).zip(g.data().chunks(len)) {
                    gx_row[start..start + len].copy_from_slice(g_row);
                }
                acc(x, like(x, gx));
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut gp = Vec::with_capacity(val(p).numel());
                        for row in g.data().chunks(total) {
                            gp.extend_from_slice(&row[offset..offset + w]);
                        }
                        acc(p, like(p, gp));
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = val(*logits).cols();
                let scale = g.item() / targets.len() as f64;
                let mut gl = probs.clone();
                for (row, &t) in gl.chunks_mut(n).zip(targets) {
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(*logits, like(*logits, gl));
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a trainable parameter loaded onto the tape.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name)
    }

    /// One gradient per trainable parameter of `store`; parameters the loss
    /// never touched get zeros.
    pub fn for_store(mut self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        store
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(name, t)| {
                let g = self.named.remove(name).unwrap_or_else(|| {
                    Tensor::new(t.shape().to_vec(), vec![0.0; t.numel()]).expect("shape")
                });
                (name.clone(), g)
            })
            .collect()
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn gelu(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grad_input(t: Tensor) -> Tensor {
        t.with_requires_grad(true)
    }

    /// Central differences on every entry of `input`, independent of the
    /// reverse sweep.
    fn check<F>(input: Tensor, f: F)
    where
        F: Fn(&mut Tape, Var) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(grad_input(input.clone())).unwrap();
        let loss = f(&mut tape, x).unwrap();
        let analytic = tape.backward(loss).unwrap().wrt(x).unwrap().clone();

        let eval = |t: Tensor| {
            let mut tape = Tape::new();
            let x = tape.leaf(t).unwrap();
            let l = f(&mut tape, x).unwrap();
            tape.value(l).item()
        };
        let eps = 1e-5;
        for i in 0..input.numel() {
            let mut plus = input.clone();
            plus.data_mut()[i] += eps;
            let mut minus = input.clone();
            minus.data_mut()[i] -= eps;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "entry {i}: analytic {a} numeric {numeric}");
        }
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(rows, cols, 1.0, &mut rng)
    }

    /// Weighted sum, so every output entry gets a distinct upstream gradient.
    fn weighted(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let t = tape.value(y);
        let w = rand_matrix(t.rows(), t.cols(), seed);
        let w = tape.constant(w)?;
        let p = tape.mul(y, w)?;
        tape.sum_all(p)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let i = tape.constant(Tensor::identity(2)).unwrap();
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let b = tape.constant(Tensor::zeros(2, 3)).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 3)).unwrap();
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_hand_computed() {
        // mean 2, population variance 2/3
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0])).unwrap();
        let g = tape.constant(Tensor::filled(1, 3, 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(1, 3)).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        let sigma = (2.0f64 / 3.0 + LAYER_NORM_EPS).sqrt();
        let expected = [-1.0 / sigma, 0.0, 1.0 / sigma];
        for (v, e) in tape.value(y).data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
        let out = tape.value(y).data();
        let mean = out.iter().sum::<f64>() / 3.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9);
        // eps inside the sqrt shrinks the variance by var / (var + eps)
        let shrink = (2.0 / 3.0) / (2.0 / 3.0 + LAYER_NORM_EPS);
        assert!((var - shrink).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn layer_norm_rows_are_standardised(
            row in proptest::collection::vec(-50.0f64..50.0, 2..12),
        ) {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let pop_var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            // eps moves the variance by eps / var; keep rows where that is below 1e-6
            proptest::prop_assume!(pop_var >= 10.0);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::row_vector(row.clone())).unwrap();
            let g = tape.constant(Tensor::filled(1, row.len(), 1.0)).unwrap();
            let b = tape.constant(Tensor::zeros(1, row.len())).unwrap();
            let y = tape.layer_norm(x, g, b).unwrap();
            let out = tape.value(y).data();
            let mean = out.iter().sum::<f64>() / n;
            let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            proptest::prop_assert!(mean.abs() < 1e-9);
            proptest::prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let mut tape = Tape::new().with_finite_checks(true);
        assert!(matches!(
            tape.constant(Tensor::row_vector(vec![f64::NAN])),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(grad_input(Tensor::zeros(2, 2))).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_of_wx_gradient_replicates_x() {
        let mut tape = Tape::new();
        let w = tape.leaf(grad_input(rand_matrix(3, 2, 1))).unwrap();
        let x = tape.constant(Tensor::matrix(2, 1, vec![0.5, -2.0])).unwrap();
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap();
        let gw = g.wrt(w).unwrap();
        for r in 0..3 {
            assert_eq!(gw.row(r), &[0.5, -2.0]);
        }
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::filled(1, 2, 1.0).with_requires_grad(true));
        store.insert("unused", Tensor::filled(1, 2, 1.0).with_requires_grad(true));
        let mut tape = Tape::new();
        let u = tape.param(&store, "used").unwrap();
        let loss = tape.sum_all(u).unwrap();
        let grads = tape.backward(loss).unwrap().for_store(&store);
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
        assert_eq!(grads["used"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_probs_minus_onehot() {
        let logits = rand_matrix(1, 5, 3);
        let mut tape = Tape::new();
        let x = tape.leaf(grad_input(logits.clone())).unwrap();
        let loss = tape.cross_entropy(x, &[2]).unwrap();
        let g = tape.backward(loss).unwrap().wrt(x).unwrap().clone();
        let mut p = logits.data().to_vec();
        softmax_in_place(&mut p);
        p[2] -= 1.0;
        for (a, b) in g.data().iter().zip(&p) {
            assert!((a - b).abs() < 1e-14);
        }
        check(logits, |t, x| t.cross_entropy(x, &[2]));
    }

    #[test]
    fn kernel_gradients_match_finite_differences() {
        let other = rand_matrix(4, 3, 11);
        let square = rand_matrix(3, 3, 12);
        check(rand_matrix(3, 4, 1), |t, x| {
            let b = t.constant(other.clone())?;
            let y = t.matmul(x, b)?;
            weighted(t, y, 2)
        });
        check(rand_matrix(3, 4, 1), |t, x| {
            let b = t.constant(other.clone())?;
            let y = t.matmul(b, x)?;
            weighted(t, y, 2)
        });
        check(rand_matrix(2, 3, 1), |t, x| {
            let b = t.constant(square.clone())?;
            let y = t.matmul_nt(x, b)?;
            let z = t.matmul_nt(b, x)?;
            let s = weighted(t, y, 3)?;
            let u = weighted(t, z, 4)?;
            t.add(s, u)
        });
        check(rand_matrix(3, 3, 5), |t, x| {
            let b = t.constant(square.clone())?;
            let y = t.add(x, b)?;
            let z = t.sub(y, x)?;
            let w = t.mul(z, x)?;
            let w = t.mul(w, x)?;
            let s = t.scale(w, 0.7)?;
            weighted(t, s, 6)
        });
        check(rand_matrix(1, 3, 7), |t, bias| {
            let b = t.constant(square.clone())?;
            let y = t.add_row(b, bias)?;
            let y = t.mul(y, y)?;
            t.mean_all(y)
        });
        check(rand_matrix(3, 5, 8), |t, x| {
            let y = t.softmax(x)?;
            weighted(t, y, 9)
        });
        check(rand_matrix(3, 6, 10), |t, x| {
            let g = t.constant(rand_matrix(1, 6, 13))?;
            let b = t.constant(rand_matrix(1, 6, 14))?;
            let y = t.layer_norm(x, g, b)?;
            weighted(t, y, 15)
        });
        check(rand_matrix(1, 6, 16), |t, g| {
            let x = t.constant(rand_matrix(3, 6, 17))?;
            let b = t.constant(rand_matrix(1, 6, 18))?;
            let y = t.layer_norm(x, g, b)?;
            weighted(t, y, 19)
        });
        check(rand_matrix(4, 3, 20), |t, x| {
            let y = t.gelu(x)?;
            weighted(t, y, 21)
        });
        check(rand_matrix(5, 3, 22), |t, table| {
            let y = t.embedding(table, &[4, 0, 4, 2])?;
            weighted(t, y, 23)
        });
        check(rand_matrix(4, 3, 24), |t, x| {
            let m = t.mean_rows(x)?;
            let r = t.slice_rows(x, 1, 2)?;
            let c = t.slice_cols(x, 1, 2)?;
            let cc = t.concat_cols(&[c, x, c])?;
            let a = weighted(t, m, 25)?;
            let b = weighted(t, r, 26)?;
            let d = weighted(t, cc, 27)?;
            let s = t.add(a, b)?;
            t.add(s, d)
        });
        check(rand_matrix(3, 4, 28), |t, x| t.cross_entropy(x, &[0, 3, 1]));
    }
}
