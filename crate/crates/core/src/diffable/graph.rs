use std::sync::Arc;

use super::Array;
use crate::error::{ensure, Error, Result};
use crate::gmm::LN_2PI;

/// Epsilon inside the root-mean-square of [`Graph::rms_norm`].
pub const RMS_EPS: f64 = 1e-8;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    BroadcastRows(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Gelu { x: Var, tanh: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { x: Var, axis: Axis, start: usize },
    Sum(Var),
    Mean(Var),
    ClampMin(Var, f64),
    GmmNll {
        means: Var,
        sigmas: Var,
        data: Arc<Array>,
        resp: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Sqrt(_) => "sqrt",
            Op::Softmax(_) => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Gelu { .. } => "gelu",
            Op::Embedding { .. } => "embedding",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ClampMin(..) => "clamp_min",
            Op::GmmNll { .. } => "gmm_nll",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(x)
            | Op::BroadcastRows(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Sqrt(x)
            | Op::Softmax(x)
            | Op::Gelu { x, .. }
            | Op::Slice { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::ClampMin(x, _) => vec![*x],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { parts, .. } => parts.clone(),
            Op::GmmNll { means, sigmas, .. } => vec![*means, *sigmas],
        }
    }
}

struct Node {
    value: Arc<Array>,
    op: Op,
    requires_grad: bool,
}

/// Tape of array operations recorded in evaluation order.
///
/// Nodes only ever reference earlier nodes, so the tape is a topological
/// order and [`Graph::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices sized for the (m, k, n) problem with the
    // given strides; `c` is exclusively borrowed and row-major `m x n`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu_tanh(x: f64) -> f64 {
    (GELU_K * (x + GELU_C * x * x * x)).tanh()
}

fn gelu_grad(x: f64, th: f64) -> f64 {
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Arc<Array>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, a: Array) -> Var {
        self.leaf(Arc::new(a), false)
    }

    pub fn constant_shared(&mut self, a: Arc<Array>) -> Var {
        self.leaf(a, false)
    }

    pub fn param(&mut self, a: Array) -> Var {
        self.leaf(Arc::new(a), true)
    }

    pub fn param_shared(&mut self, a: Arc<Array>) -> Var {
        self.leaf(a, true)
    }

    fn push(&mut self, value: Array, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output from {}",
                op.name()
            )));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            Shape,
            "{what}: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|v| f(*v)).collect();
        let out = Array::new(src.shape().to_vec(), data)?;
        self.push(out, op)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Array::new(va.shape().to_vec(), data)?;
        self.push(out, op)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        ensure!(
            vb.shape().len() == 2 && va.cols() == vb.shape()[0],
            Shape,
            "matmul: {:?} x {:?}",
            va.shape(),
            vb.shape()
        );
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        gemm((m, k, n), va.data(), (k, 1), vb.data(), (n, 1), &mut out, 0.0);
        self.push(Array::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.data()[i * c + j];
            }
        }
        self.push(Array::matrix(c, r, out)?, Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        ensure!(
            vb.len() == c,
            Shape,
            "add_row: bias of {} for {c} columns",
            vb.len()
        );
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + vb.data()[i % c])
            .collect();
        let out = Array::new(vx.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(x, bias))
    }

    /// Repeats a vector as `rows` identical rows.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let v = self.value(x);
        let c = v.len();
        let data = (0..rows).flat_map(|_| v.data().iter().copied()).collect();
        self.push(Array::matrix(rows, c, data)?, Op::BroadcastRows(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.map(x, f64::ln, Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.map(x, f64::sqrt, Op::Sqrt(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let tanh: Vec<f64> = v.data().iter().map(|a| gelu_tanh(*a)).collect();
        let data = v.data().iter().zip(&tanh).map(|(a, t)| 0.5 * a * (1.0 + t)).collect();
        let out = Array::new(v.shape().to_vec(), data)?;
        self.push(out, Op::Gelu { x, tanh })
    }

    /// Elementwise `max(x, floor)`; the gradient passes where `x >= floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.map(x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    /// Row-wise softmax of `x + mask`.
    ///
    /// `mask` is either a single row (applied to every row) or the full shape
    /// of `x`; entries may be `-inf` to exclude positions. Every row must keep
    /// at least one finite position.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&Array>) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        if let Some(m) = mask {
            ensure!(
                m.len() == c || m.shape() == v.shape(),
                Shape,
                "softmax mask {:?} does not fit {:?}",
                m.shape(),
                v.shape()
            );
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v.data()[i * c..(i + 1) * c];
            let dst = &mut out[i * c..(i + 1) * c];
            for (j, d) in dst.iter_mut().enumerate() {
                let add = mask.map_or(0.0, |m| {
                    if m.len() == c {
                        m.data()[j]
                    } else {
                        m.data()[i * c + j]
                    }
                });
                *d = row[j] + add;
            }
            let max = dst.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ensure!(max.is_finite(), Numeric, "softmax row {i} is fully masked");
            let mut sum = 0.0;
            for d in dst.iter_mut() {
                *d = (*d - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let out = Array::new(v.shape().to_vec(), out)?;
        self.push(out, Op::Softmax(x))
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (v, g) = (self.value(x), self.value(gain));
        let (r, c) = (v.rows(), v.cols());
        ensure!(
            g.len() == c,
            Shape,
            "rms_norm: gain of {} for {c} columns",
            g.len()
        );
        let mut out = vec![0.0; r * c];
        let mut inv_rms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &v.data()[i * c..(i + 1) * c];
            let ms = row.iter().map(|a| a * a).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for (j, o) in out[i * c..(i + 1) * c].iter_mut().enumerate() {
                *o = row[j] * inv * g.data()[j];
            }
        }
        let out = Array::new(v.shape().to_vec(), out)?;
        self.push(out, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Gathers rows of `table` (`[vocab, d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = (t.rows(), t.cols());
        ensure!(
            ids.iter().all(|&i| i < vocab),
            Shape,
            "embedding id out of range for vocabulary of {vocab}"
        );
        let data = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let out = Array::matrix(ids.len(), d, data)?;
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        ensure!(!parts.is_empty(), Shape, "concat of nothing");
        let out = match axis {
            Axis::Rows => {
                let c = self.value(parts[0]).cols();
                ensure!(
                    parts.iter().all(|p| self.value(*p).cols() == c),
                    Shape,
                    "concat rows: column counts differ"
                );
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let v = self.value(*p);
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Array::matrix(rows, c, data)?
            }
            Axis::Cols => {
                let r = self.value(parts[0]).rows();
                ensure!(
                    parts.iter().all(|p| self.value(*p).rows() == r),
                    Shape,
                    "concat cols: row counts differ"
                );
                let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for p in parts {
                        data.extend_from_slice(self.value(*p).row(i));
                    }
                }
                Array::matrix(r, total, data)?
            }
        };
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        let out = match axis {
            Axis::Rows => {
                ensure!(start + len <= r, Shape, "row slice {start}+{len} of {r}");
                Array::matrix(len, c, v.data()[start * c..(start + len) * c].to_vec())?
            }
            Axis::Cols => {
                ensure!(start + len <= c, Shape, "column slice {start}+{len} of {c}");
                let data = (0..r)
                    .flat_map(|i| v.row(i)[start..start + len].iter().copied())
                    .collect();
                Array::matrix(r, len, data)?
            }
        };
        self.push(out, Op::Slice { x, axis, start })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Array::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        ensure!(!v.is_empty(), Shape, "mean of an empty array");
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Array::scalar(s), Op::Mean(x))
    }

    /// Mean per-sample negative log-likelihood of `data` (`[N, T]`) under a
    /// diagonal Gaussian mixture with component means and standard
    /// deviations given as `[J, T]` nodes and fixed `weights`.
    pub fn gmm_nll(
        &mut self,
        means: Var,
        sigmas: Var,
        data: Arc<Array>,
        weights: &[f64],
    ) -> Result<Var> {
        self.same_shape(means, sigmas, "gmm_nll")?;
        let (mu, sd) = (self.value(means), self.value(sigmas));
        let (j, t) = (mu.rows(), mu.cols());
        ensure!(
            weights.len() == j && data.cols() == t && !data.is_empty(),
            Shape,
            "gmm_nll: {j} components over {t} dims, {} weights, data {:?}",
            weights.len(),
            data.shape()
        );
        ensure!(
            sd.data().iter().all(|s| *s > 0.0),
            Numeric,
            "gmm_nll: non-positive sigma"
        );
        let n = data.rows();
        let log_norm: Vec<f64> = (0..j)
            .map(|k| {
                weights[k].ln()
                    - 0.5 * t as f64 * LN_2PI
                    - sd.row(k).iter().map(|s| s.ln()).sum::<f64>()
            })
            .collect();
        let inv_sd: Vec<f64> = sd.data().iter().map(|s| 1.0 / s).collect();
        let mut resp = vec![0.0; n * j];
        let mut total = 0.0;
        for i in 0..n {
            let x = data.row(i);
            let terms = &mut resp[i * j..(i + 1) * j];
            for (k, term) in terms.iter_mut().enumerate() {
                let m = mu.row(k);
                let is = &inv_sd[k * t..(k + 1) * t];
                let mut quad = 0.0;
                for d in 0..t {
                    let z = (x[d] - m[d]) * is[d];
                    quad += z * z;
                }
                *term = log_norm[k] - 0.5 * quad;
            }
            let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for term in terms.iter_mut() {
                *term = (*term - max).exp();
                s += *term;
            }
            for term in terms.iter_mut() {
                *term /= s;
            }
            total -= max + s.ln();
        }
        let out = Array::scalar(total / n as f64);
        self.push(
            out,
            Op::GmmNll {
                means,
                sigmas,
                data,
                resp,
            },
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(
            self.value(loss).is_scalar(),
            Shape,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|data| Array::new(node.value.shape().to_vec(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| -> &Array { &nodes[v.0].value };
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
                } else {
                    None
                }
            }};
        }
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if let Some(da) = acc!(*a) {
                    gemm((m, n, k), g, (n, 1), vb.data(), (1, n), da, 1.0);
                }
                if let Some(db) = acc!(*b) {
                    gemm((k, m, n), va.data(), (1, k), g, (n, 1), db, 1.0);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (y.rows(), y.cols());
                if let Some(dx) = acc!(*x) {
                    // y is [r, c]; x is [c, r].
                    for i in 0..r {
                        for j in 0..c {
                            dx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
                if let Some(db) = acc!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
                if let Some(db) = acc!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if let Some(da) = acc!(*a) {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(vb) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = acc!(*b) {
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(va) {
                        *d += gi * ai;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let c = y.cols();
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
                if let Some(db) = acc!(*bias) {
                    for (i, gi) in g.iter().enumerate() {
                        db[i % c] += gi;
                    }
                }
            }
            Op::BroadcastRows(x) => {
                let c = y.cols();
                if let Some(dx) = acc!(*x) {
                    for (i, gi) in g.iter().enumerate() {
                        dx[i % c] += gi;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += s * gi);
                }
            }
            Op::AddScalar(x) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            Op::Exp(x) => {
                if let Some(dx) = acc!(*x) {
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y.data()) {
                        *d += gi * yi;
                    }
                }
            }
            Op::Ln(x) => {
                let vx = val(*x).data();
                if let Some(dx) = acc!(*x) {
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(vx) {
                        *d += gi / xi;
                    }
                }
            }
            Op::Sqrt(x) => {
                if let Some(dx) = acc!(*x) {
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y.data()) {
                        *d += gi / (2.0 * yi);
                    }
                }
            }
            Op::Softmax(x) => {
                let c = y.cols();
                if let Some(dx) = acc!(*x) {
                    for (i, (yr, gr)) in y.data().chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (vx, vg) = (val(*x), val(*gain).data());
                let c = vx.cols();
                if let Some(dgain) = acc!(*gain) {
                    for (i, inv) in inv_rms.iter().enumerate() {
                        for j in 0..c {
                            dgain[j] += g[i * c + j] * vx.data()[i * c + j] * inv;
                        }
                    }
                }
                if let Some(dx) = acc!(*x) {
                    for (i, inv) in inv_rms.iter().enumerate() {
                        let xr = &vx.data()[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = (0..c).map(|j| gr[j] * vg[j] * xr[j] * inv).sum::<f64>()
                            / c as f64;
                        for j in 0..c {
                            let normed = xr[j] * inv;
                            dx[i * c + j] += inv * (gr[j] * vg[j] - normed * dot);
                        }
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let vx = val(*x).data();
                if let Some(dx) = acc!(*x) {
                    for (((d, gi), xi), th) in dx.iter_mut().zip(g).zip(vx).zip(tanh) {
                        *d += gi * gelu_grad(*xi, *th);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = y.cols();
                if let Some(dt) = acc!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for k in 0..d {
                            dt[id * d + k] += g[r * d + k];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => match axis {
                Axis::Rows => {
                    let mut offset = 0;
                    for p in parts {
                        let len = val(*p).len();
                        if let Some(dp) = acc!(*p) {
                            dp.iter_mut()
                                .zip(&g[offset..offset + len])
                                .for_each(|(d, gi)| *d += gi);
                        }
                        offset += len;
                    }
                }
                Axis::Cols => {
                    let (r, total) = (y.rows(), y.cols());
                    let mut col = 0;
                    for p in parts {
                        let c = val(*p).cols();
                        if let Some(dp) = acc!(*p) {
                            for i in 0..r {
                                for j in 0..c {
                                    dp[i * c + j] += g[i * total + col + j];
                                }
                            }
                        }
                        col += c;
                    }
                }
            },
            Op::Slice { x, axis, start } => {
                let vx = val(*x);
                let c = vx.cols();
                if let Some(dx) = acc!(*x) {
                    match axis {
                        Axis::Rows => {
                            dx[start * c..start * c + g.len()]
                                .iter_mut()
                                .zip(g)
                                .for_each(|(d, gi)| *d += gi);
                        }
                        Axis::Cols => {
                            let len = y.cols();
                            for i in 0..vx.rows() {
                                for j in 0..len {
                                    dx[i * c + start + j] += g[i * len + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::ClampMin(x, floor) => {
                let vx = val(*x).data();
                if let Some(dx) = acc!(*x) {
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(vx) {
                        if *xi >= *floor {
                            *d += gi;
                        }
                    }
                }
            }
            Op::GmmNll {
                means,
                sigmas,
                data,
                resp,
            } => {
                let (mu, sd) = (val(*means), val(*sigmas));
                let (j, t) = (mu.rows(), mu.cols());
                let n = data.rows();
                let scale = g[0] / n as f64;
                // d(-log p)/d mu = -gamma (x - mu) / s^2
                // d(-log p)/d s  = gamma (1/s - (x - mu)^2 / s^3)
                let mut dmu = vec![0.0; j * t];
                let mut dsd = vec![0.0; j * t];
                for i in 0..n {
                    let x = data.row(i);
                    for k in 0..j {
                        let gam = resp[i * j + k];
                        if gam == 0.0 {
                            continue;
                        }
                        for d in 0..t {
                            let s = sd.data()[k * t + d];
                            let diff = x[d] - mu.data()[k * t + d];
                            let z = diff / s;
                            dmu[k * t + d] -= gam * z / s;
                            dsd[k * t + d] += gam * (1.0 - z * z) / s;
                        }
                    }
                }
                if let Some(dm) = acc!(*means) {
                    dm.iter_mut().zip(&dmu).for_each(|(d, v)| *d += scale * v);
                }
                if let Some(ds) = acc!(*sigmas) {
                    ds.iter_mut().zip(&dsd).for_each(|(d, v)| *d += scale * v);
                }
            }
        }
    }
}
