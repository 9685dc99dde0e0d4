use super::{ParamId, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Rows whose Euclidean norm falls below this are treated as zero vectors by
/// [`Graph::normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Log(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    NormalizeRows(Var),
    MaskedLogSumExpRows(Var, Vec<bool>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Dynamic reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order and backward simply walks it in reverse. A graph is
/// rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, keyed by parameter.
#[derive(Debug, Default)]
pub struct Gradients {
    pub entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a parameter; its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        let v = self.push(value.clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Leaf that takes part in differentiation without being a registered
    /// parameter (used by finite-difference checks on intermediate inputs).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Adds the `1 × m` row `b` to every row of the `n × m` matrix `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.0 != 1 || sb.1 != sa.1 {
            return Err(Error::Shape {
                op: "add_row",
                left: sa,
                right: sb,
            });
        }
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for r in 0..sa.0 {
            for c in 0..sa.1 {
                v.data_mut()[r * sa.1 + c] += bv[c];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::AddRow(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(v, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::arg("concat_cols of nothing"))?;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(parts[0]),
                    right: s,
                });
            }
            cols += s.1;
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p);
                let w = src.cols();
                out.data_mut()[r * cols + off..r * cols + off + w].copy_from_slice(src.row_slice(r));
                off += w;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| Error::arg("concat_rows of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.shape(parts[0]),
                    right: s,
                });
            }
            rows += s.0;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > c {
            return Err(Error::Shape {
                op: "slice_cols",
                left: (r, c),
                right: (start, end),
            });
        }
        let w = end - start;
        let src = self.value(a);
        let mut out = Tensor::zeros(r, w);
        for i in 0..r {
            out.data_mut()[i * w..(i + 1) * w].copy_from_slice(&src.row_slice(i)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > r {
            return Err(Error::Shape {
                op: "slice_rows",
                left: (r, c),
                right: (start, end),
            });
        }
        let out = Tensor::from_vec(end - start, c, self.value(a).data()[start * c..end * c].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    /// Row sums as an `n × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let sums: Vec<f64> = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let n = sums.len();
        let v = Tensor::from_vec(n, 1, sums).expect("row sums");
        let rg = self.rg(a);
        self.push(v, Op::SumCols(a), rg)
    }

    /// Scales every row to unit Euclidean norm; rows with norm below
    /// [`NORM_EPS`] map to zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        let c = t.cols();
        for r in 0..t.rows() {
            let norm = t.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            if norm < NORM_EPS {
                row.iter_mut().for_each(|x| *x = 0.0);
            } else {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::NormalizeRows(a), rg)
    }

    /// `out_i = log Σ_{j : mask_ij} exp(a_ij)` as an `n × 1` column, computed
    /// with the row maximum subtracted.
    pub fn masked_logsumexp_rows(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(Error::Shape {
                op: "masked_logsumexp_rows",
                left: t.shape(),
                right: (mask.len(), 1),
            });
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let m = &mask[r * c..(r + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::arg(format!("row {r} has an empty logsumexp mask")));
            }
            let s: f64 = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| (x - max).exp())
                .sum();
            out.push(max + s.ln());
        }
        let n = out.len();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec(n, 1, out)?, Op::MaskedLogSumExpRows(a, mask), rg))
    }

    /// Reverse pass from a scalar output. Gradients of parameter leaves are
    /// returned; the graph itself is left untouched so the pass can be
    /// repeated.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        Ok(self.backward_all(output)?.0)
    }

    /// Like [`Graph::backward`] but also returns the gradient of every
    /// `variable` leaf, in creation order.
    pub fn backward_all(&self, output: Var) -> Result<(Gradients, Vec<(Var, Tensor)>)> {
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut params = Gradients::default();
        let mut vars = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let g = grads[idx]
                .take()
                .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
            match node.param {
                Some(id) => match params.entries.iter_mut().find(|(p, _)| *p == id) {
                    Some((_, acc)) => acc.add_assign(&g),
                    None => params.entries.push((id, g)),
                },
                None => vars.push((Var(idx), g)),
            }
        }
        Ok((params, vars))
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, g.matmul_t(self.value(*b))?);
                }
                if self.rg(*b) {
                    acc(grads, *b, self.value(*a).t_matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, g.matmul(self.value(*b))?);
                }
                if self.rg(*b) {
                    acc(grads, *b, g.t_matmul(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                acc_if(self, grads, *a, || g.clone());
                acc_if(self, grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                acc_if(self, grads, *a, || g.clone());
                acc_if(self, grads, *b, || g.map(|x| -x));
            }
            Op::AddRow(a, b) => {
                acc_if(self, grads, *a, || g.clone());
                acc_if(self, grads, *b, || {
                    let mut s = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in s.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *o += x;
                        }
                    }
                    s
                });
            }
            Op::Mul(a, b) => {
                acc_if(self, grads, *a, || g.zip_map(self.value(*b), |d, y| d * y));
                acc_if(self, grads, *b, || g.zip_map(self.value(*a), |d, x| d * x));
            }
            Op::Scale(a, c) => acc_if(self, grads, *a, || g.map(|d| d * c)),
            Op::AddScalar(a) => acc_if(self, grads, *a, || g.clone()),
            Op::Sigmoid(a) => acc_if(self, grads, *a, || g.zip_map(y, |d, s| d * s * (1.0 - s))),
            Op::Tanh(a) => acc_if(self, grads, *a, || g.zip_map(y, |d, t| d * (1.0 - t * t))),
            Op::Relu(a) => acc_if(self, grads, *a, || {
                g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 })
            }),
            Op::Softplus(a) => acc_if(self, grads, *a, || g.zip_map(self.value(*a), |d, x| d * sigmoid(x))),
            Op::Square(a) => acc_if(self, grads, *a, || g.zip_map(self.value(*a), |d, x| 2.0 * d * x)),
            Op::Sqrt(a) => acc_if(self, grads, *a, || g.zip_map(y, |d, s| d / (2.0 * s))),
            Op::Log(a) => acc_if(self, grads, *a, || g.zip_map(self.value(*a), |d, x| d / x)),
            Op::Exp(a) => acc_if(self, grads, *a, || g.zip_map(y, |d, e| d * e)),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        let mut part = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            part.data_mut()[r * w..(r + 1) * w].copy_from_slice(&g.row_slice(r)[off..off + w]);
                        }
                        acc(grads, p, part);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let c = g.cols();
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.rg(p) {
                        let part = Tensor::from_vec(h, c, g.data()[off * c..(off + h) * c].to_vec())?;
                        acc(grads, p, part);
                    }
                    off += h;
                }
            }
            Op::SliceCols(a, start) => acc_if(self, grads, *a, || {
                let (r, c) = self.shape(*a);
                let w = g.cols();
                let mut full = Tensor::zeros(r, c);
                for i in 0..r {
                    full.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row_slice(i));
                }
                full
            }),
            Op::SliceRows(a, start) => acc_if(self, grads, *a, || {
                let (r, c) = self.shape(*a);
                let mut full = Tensor::zeros(r, c);
                full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                full
            }),
            Op::Sum(a) => acc_if(self, grads, *a, || {
                let (r, c) = self.shape(*a);
                Tensor::full(r, c, g.item())
            }),
            Op::Mean(a) => acc_if(self, grads, *a, || {
                let (r, c) = self.shape(*a);
                Tensor::full(r, c, g.item() / (r * c) as f64)
            }),
            Op::SumCols(a) => acc_if(self, grads, *a, || {
                let (r, c) = self.shape(*a);
                let mut full = Tensor::zeros(r, c);
                for i in 0..r {
                    full.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|x| *x = g.get(i, 0));
                }
                full
            }),
            Op::NormalizeRows(a) => acc_if(self, grads, *a, || {
                let x = self.value(*a);
                let c = x.cols();
                let mut out = Tensor::zeros(x.rows(), c);
                for r in 0..x.rows() {
                    let norm = x.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < NORM_EPS {
                        continue;
                    }
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out.data_mut()[r * c + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                out
            }),
            Op::MaskedLogSumExpRows(a, mask) => acc_if(self, grads, *a, || {
                let x = self.value(*a);
                let c = x.cols();
                let mut out = Tensor::zeros(x.rows(), c);
                for r in 0..x.rows() {
                    let lse = y.get(r, 0);
                    for j in 0..c {
                        if mask[r * c + j] {
                            out.data_mut()[r * c + j] = g.get(r, 0) * (x.get(r, j) - lse).exp();
                        }
                    }
                }
                out
            }),
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn acc_if(graph: &Graph, grads: &mut [Option<Tensor>], v: Var, g: impl FnOnce() -> Tensor) {
    if graph.rg(v) {
        acc(grads, v, g());
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
