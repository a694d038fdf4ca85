use super::tensor::{matmul_raw, Tensor};
use super::TapeError;

/// Handle to a node recorded on a [`Tape`].
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
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Log(Var),
    Gelu(Var),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Slice {
        x: Var,
        row0: usize,
        col0: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Variance(Var),
    Cosine {
        a: Var,
        b: Var,
        norm_a: f64,
        norm_b: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        student: Var,
        teacher: Var,
        tau: f64,
        p_student: Vec<f64>,
        p_teacher: Vec<f64>,
        row_kl: Vec<f64>,
    },
    StraightThrough {
        x: Var,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode recording of a computation.
///
/// Nodes are appended in evaluation order, so parents always precede their
/// children and a single reverse sweep suffices for backpropagation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Max-subtracted softmax of one row; entries flagged as masked are exactly zero.
pub(crate) fn softmax_row(row: &[f64], visible: usize, out: &mut [f64]) {
    let max = row[..visible]
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &v) in out[..visible].iter_mut().zip(&row[..visible]) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in &mut out[..visible] {
        *o /= sum;
    }
    for o in &mut out[visible..] {
        *o = 0.0;
    }
}

fn log_softmax_row(row: &[f64], scale: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
    let lse = row.iter().map(|&v| (v * scale - max).exp()).sum::<f64>().ln() + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v * scale - lse;
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TapeError {
        TapeError::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 || self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose2();
        let rg = self.rg(&[a]);
        self.push(t, Op::Transpose(a), rg)
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TapeError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err(name, a, b));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_raw(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v + c);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Natural logarithm; every input element must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var, TapeError> {
        if let Some(index) = self.value(a).data().iter().position(|&v| v <= 0.0) {
            return Err(TapeError::Domain { op: "log", index });
        }
        let t = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Log(a), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Left-to-right sum of equally shaped nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var, TapeError> {
        let (&first, rest) = vars.split_first().ok_or(TapeError::Empty { op: "add_all" })?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Softmax over the last dimension. With `causal`, the input is viewed as a
    /// stack of square `[N, N]` blocks and entries with `j > i` are exactly zero.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var, TapeError> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if cols == 0 || (causal && rows % cols != 0) {
            return Err(TapeError::Shape {
                op: "softmax_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let visible = if causal { r % cols + 1 } else { cols };
            softmax_row(t.row(r), visible, &mut out[r * cols..(r + 1) * cols]);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_raw(shape, out), Op::Softmax(x), rg))
    }

    /// Per-row normalization with population variance, then `gain * xhat + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TapeError> {
        let cols = self.value(x).cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(self.shape_err("layernorm", x, gain));
        }
        let t = self.value(x);
        let rows = t.rows();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..cols {
                let h = (row[j] - mean) * inv;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[V, D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TapeError> {
        let (v, d) = self.dims2(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TapeError::Index { index: bad, bound: v });
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_raw(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// 2-D sub-block `x[rows, cols]`.
    pub fn slice(
        &mut self,
        x: Var,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<Var, TapeError> {
        let (r, c) = self.dims2(x);
        if rows.end > r || cols.end > c || rows.start > rows.end || cols.start > cols.end {
            return Err(TapeError::Index {
                index: rows.end.max(cols.end),
                bound: r.max(c),
            });
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            out.extend_from_slice(&t.row(i)[cols.clone()]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_raw(vec![rows.len(), cols.len()], out),
            Op::Slice {
                x,
                row0: rows.start,
                col0: cols.start,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        let first = *parts.first().ok_or(TapeError::Empty { op: "concat_rows" })?;
        let cols = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != cols {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += self.value(p).rows();
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_raw(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        let first = *parts.first().ok_or(TapeError::Empty { op: "concat_cols" })?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(self.shape_err("concat_cols", first, p));
            }
            cols += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_raw(vec![rows, cols], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Population variance over every element.
    pub fn variance(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let n = d.len().max(1) as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(var), Op::Variance(x), rg)
    }

    /// Cosine similarity of two equally sized tensors viewed as flat vectors.
    /// Zero-norm inputs yield 0.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        if self.value(a).len() != self.value(b).len() {
            return Err(self.shape_err("cosine", a, b));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let dot: f64 = da.iter().zip(db).map(|(x, y)| x * y).sum();
        let norm_a = da.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm_b = db.iter().map(|x| x * x).sum::<f64>().sqrt();
        let c = if norm_a > 0.0 && norm_b > 0.0 {
            dot / (norm_a * norm_b)
        } else {
            0.0
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::scalar(c),
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TapeError> {
        let t = self.value(logits);
        let (rows, v) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(TapeError::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(TapeError::Index { index: bad, bound: v });
        }
        let mut probs = vec![0.0; rows * v];
        let mut loss = 0.0;
        for r in 0..rows {
            let lp = &mut probs[r * v..(r + 1) * v];
            log_softmax_row(t.row(r), 1.0, lp);
            loss -= lp[targets[r]];
            for p in lp.iter_mut() {
                *p = p.exp();
            }
        }
        loss /= rows.max(1) as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `KL(softmax(teacher/tau) || softmax(student/tau))`, averaged over rows.
    pub fn kl_divergence(&mut self, student: Var, teacher: Var, tau: f64) -> Result<Var, TapeError> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(TapeError::Parameter {
                name: "tau",
                value: tau,
            });
        }
        if self.value(student).shape() != self.value(teacher).shape() {
            return Err(self.shape_err("kl_divergence", student, teacher));
        }
        let (s, t) = (self.value(student), self.value(teacher));
        let (rows, v) = (s.rows(), s.cols());
        let inv_tau = 1.0 / tau;
        let mut ls = vec![0.0; v];
        let mut lt = vec![0.0; v];
        let mut p_student = vec![0.0; rows * v];
        let mut p_teacher = vec![0.0; rows * v];
        let mut row_kl = vec![0.0; rows];
        let mut total = 0.0;
        for r in 0..rows {
            log_softmax_row(s.row(r), inv_tau, &mut ls);
            log_softmax_row(t.row(r), inv_tau, &mut lt);
            let mut kl = 0.0;
            for j in 0..v {
                let pt = lt[j].exp();
                kl += pt * (lt[j] - ls[j]);
                p_teacher[r * v + j] = pt;
                p_student[r * v + j] = ls[j].exp();
            }
            row_kl[r] = kl;
            total += kl;
        }
        total /= rows.max(1) as f64;
        let rg = self.rg(&[student, teacher]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::KlDiv {
                student,
                teacher,
                tau,
                p_student,
                p_teacher,
                row_kl,
            },
            rg,
        ))
    }

    /// Custom-gradient node: forward is `value`, backward passes the incoming
    /// gradient where `mask` is set and zero elsewhere.
    pub fn straight_through(
        &mut self,
        x: Var,
        value: Tensor,
        mask: Vec<bool>,
    ) -> Result<Var, TapeError> {
        if value.shape() != self.value(x).shape() || mask.len() != value.len() {
            return Err(TapeError::Shape {
                op: "straight_through",
                lhs: self.value(x).shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::StraightThrough { x, mask }, rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, TapeError> {
        if !self.value(root).is_scalar() {
            return Err(TapeError::NonScalarRoot {
                shape: self.value(root).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_raw(self.value(root).shape().to_vec(), vec![1.0]));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::from_raw(self.value(v).shape().to_vec(), data)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).cols();
                if self.requires_grad(*a) {
                    let bt = self.value(*b).transpose2();
                    let da = matmul_raw(gd, bt.data(), m, n, k);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.requires_grad(*b) {
                    let at = self.value(*a).transpose2();
                    let db = matmul_raw(at.data(), gd, k, m, n);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose2());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(vb).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, self.like(*a, da));
                self.accumulate(grads, *b, self.like(*b, db));
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, self.like(*a, vec![gd[0]; n]));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        d[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = self.value(*x).cols();
                let rows = self.value(*x).rows();
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; rows * cols];
                let mut dg = vec![0.0; cols];
                let mut db = vec![0.0; cols];
                let nf = cols as f64;
                for r in 0..rows {
                    let off = r * cols;
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..cols {
                        let dy = gd[off + j];
                        dg[j] += dy * xhat[off + j];
                        db[j] += dy;
                        let dh = dy * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[off + j];
                    }
                    for j in 0..cols {
                        let dh = gd[off + j] * gv[j];
                        dx[off + j] =
                            inv_std[r] / nf * (nf * dh - sum_dh - xhat[off + j] * sum_dh_h);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
                self.accumulate(grads, *gain, self.like(*gain, dg));
                self.accumulate(grads, *bias, self.like(*bias, db));
            }
            Op::Embedding { table, ids } => {
                if self.requires_grad(*table) {
                    let d = self.value(*table).cols();
                    let mut dt = vec![0.0; self.value(*table).len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += gd[r * d + j];
                        }
                    }
                    self.accumulate(grads, *table, self.like(*table, dt));
                }
            }
            Op::Slice { x, row0, col0 } => {
                let cols = self.value(*x).cols();
                let (sr, sc) = (node.value.rows(), node.value.cols());
                let mut d = vec![0.0; self.value(*x).len()];
                for r in 0..sr {
                    let dst = (row0 + r) * cols + col0;
                    d[dst..dst + sc].copy_from_slice(&gd[r * sc..(r + 1) * sc]);
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, self.like(p, gd[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let (r, c) = self.dims2(p);
                    let mut d = Vec::with_capacity(r * c);
                    for row in 0..r {
                        d.extend_from_slice(&gd[row * total + col..row * total + col + c]);
                    }
                    self.accumulate(grads, p, self.like(p, d));
                    col += c;
                }
            }
            Op::Variance(a) => {
                let x = self.value(*a).data();
                let n = x.len().max(1) as f64;
                let mean = x.iter().sum::<f64>() / n;
                let d = x.iter().map(|v| gd[0] * 2.0 * (v - mean) / n).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                if *norm_a > 0.0 && *norm_b > 0.0 {
                    let c = node.value.data()[0];
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let nn = norm_a * norm_b;
                    let da = va
                        .iter()
                        .zip(vb)
                        .map(|(x, y)| gd[0] * (y / nn - c * x / (norm_a * norm_a)))
                        .collect();
                    let db = va
                        .iter()
                        .zip(vb)
                        .map(|(x, y)| gd[0] * (x / nn - c * y / (norm_b * norm_b)))
                        .collect();
                    self.accumulate(grads, *a, self.like(*a, da));
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let scale = gd[0] / targets.len().max(1) as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in targets.iter().enumerate() {
                    d[r * v + y] -= scale;
                }
                self.accumulate(grads, *logits, self.like(*logits, d));
            }
            Op::KlDiv {
                student,
                teacher,
                tau,
                p_student,
                p_teacher,
                row_kl,
            } => {
                let v = self.value(*student).cols();
                let rows = row_kl.len().max(1) as f64;
                let scale = gd[0] / (tau * rows);
                if self.requires_grad(*student) {
                    let d = p_student
                        .iter()
                        .zip(p_teacher)
                        .map(|(ps, pt)| (ps - pt) * scale)
                        .collect();
                    self.accumulate(grads, *student, self.like(*student, d));
                }
                if self.requires_grad(*teacher) {
                    let d = (0..p_teacher.len())
                        .map(|idx| {
                            let pt = p_teacher[idx];
                            let ps = p_student[idx];
                            if pt == 0.0 {
                                0.0
                            } else {
                                pt * (pt.ln() - ps.ln() - row_kl[idx / v]) * scale
                            }
                        })
                        .collect();
                    self.accumulate(grads, *teacher, self.like(*teacher, d));
                }
            }
            Op::StraightThrough { x, mask } => {
                let d = gd
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| if m { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
        }
    }
}
