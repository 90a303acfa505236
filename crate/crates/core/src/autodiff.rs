//! Reverse-mode automatic differentiation over dense row-major `f64` tensors.
//!
//! A [`Tape`] records a closed set of primitives (see [`OpKind`]). Every
//! value lives in a node owned by the tape and is addressed by a copyable
//! [`Var`] handle. Nodes are pushed in evaluation order, so the tape is
//! always topologically sorted and [`Tape::backward`] is a single reverse
//! sweep.
//!
//! Tensors are at most rank 2; vectors are carried as `1 × n` rows.

use std::fmt;
use std::ops::Range;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: OpKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensors of rank {0} are not supported (max rank 2)")]
    RankTooHigh(usize),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: {detail}")]
    InvalidArgument { op: OpKind, detail: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense tensor with an optional accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(AutodiffError::RankTooHigh(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(AutodiffError::LengthMismatch {
                shape,
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinities, for values
    /// coming from files or users.
    pub fn from_data(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { index, value });
        }
        Self::new(shape, values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: consistent length")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Self {
            shape: vec![1, values.len()],
            values,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the accumulated gradient, creating it if absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.values.len(), "gradient length");
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Rows and columns, treating rank 0/1 tensors as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Sigmoid,
    Tanh,
    SoftmaxRows,
    Concat,
    Slice,
    Transpose,
    Sum,
    Square,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::SoftmaxRows => "softmax-rowwise",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Transpose => "transpose",
            OpKind::Sum => "sum",
            OpKind::Square => "square",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Same-shape addition, or `b` a single row broadcast over the rows of `a`.
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    Concat(Vec<Var>, Axis),
    Slice {
        src: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    Transpose(Var),
    Sum(Var),
    Square(Var),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a tensor as a leaf. Gradients are tracked only for trainable leaves.
    pub fn leaf(&mut self, tensor: &Tensor, trainable: bool) -> Var {
        let (r, c) = tensor.dims2();
        self.push(r, c, tensor.values.clone(), Op::Leaf, trainable)
    }

    /// Leaf from raw row-major values.
    pub fn leaf_values(&mut self, rows: usize, cols: usize, values: Vec<f64>, trainable: bool) -> Result<Var> {
        if rows * cols != values.len() {
            return Err(AutodiffError::LengthMismatch {
                shape: vec![rows, cols],
                expected: rows * cols,
                actual: values.len(),
            });
        }
        Ok(self.push(rows, cols, values, Op::Leaf, trainable))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        self.leaf_values(rows, cols, values, false)
    }

    pub fn filled(&mut self, rows: usize, cols: usize, value: f64) -> Var {
        self.push(rows, cols, vec![value; rows * cols], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node out into a detached [`Tensor`].
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: vec![n.rows, n.cols],
            values: n.value.clone(),
            grad: None,
        }
    }

    fn shape_vec(&self, v: Var) -> Vec<usize> {
        let (r, c) = self.shape(v);
        vec![r, c]
    }

    fn mismatch(&self, op: OpKind, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            lhs: self.shape_vec(a),
            rhs: self.shape_vec(b),
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch(OpKind::MatMul, a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        let out = if (ra, ca) == (rb, cb) {
            let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            x.iter().zip(y).map(|(x, y)| x + y).collect()
        } else if rb == 1 && cb == ca {
            let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            let mut out = x.clone();
            for row in out.chunks_exact_mut(ca) {
                row.iter_mut().zip(y).for_each(|(o, y)| *o += y);
            }
            out
        } else {
            return Err(self.mismatch(OpKind::Add, a, b));
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(ra, ca, out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(OpKind::Mul, a, b));
        }
        let (r, c) = self.shape(a);
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = x.iter().zip(y).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Mul(a, b), rg))
    }

    /// Multiplies every entry by a constant (recorded as `mul` against a filled constant).
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.shape(a);
        let k = self.filled(r, c, factor);
        self.mul(a, k).expect("same shape by construction")
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.nodes[a.0].value.clone();
        if c > 0 {
            for row in out.chunks_exact_mut(c) {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::SoftmaxRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(c, r, out, Op::Transpose(a), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| AutodiffError::InvalidArgument {
            op: OpKind::Concat,
            detail: "no inputs".into(),
        })?;
        let (r0, c0) = self.shape(first);
        let (rows, cols) = match axis {
            Axis::Rows => {
                let mut rows = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if c != c0 {
                        return Err(self.mismatch(OpKind::Concat, first, p));
                    }
                    rows += r;
                }
                (rows, c0)
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if r != r0 {
                        return Err(self.mismatch(OpKind::Concat, first, p));
                    }
                    cols += c;
                }
                (r0, cols)
            }
        };
        let mut out = Vec::with_capacity(rows * cols);
        match axis {
            Axis::Rows => {
                for &p in parts {
                    out.extend_from_slice(&self.nodes[p.0].value);
                }
            }
            Axis::Cols => {
                for i in 0..rows {
                    for &p in parts {
                        let n = &self.nodes[p.0];
                        out.extend_from_slice(&n.value[i * n.cols..(i + 1) * n.cols]);
                    }
                }
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(rows, cols, out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Rectangular sub-block `rows × cols` of `a`.
    pub fn slice(&mut self, a: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if rows.start > rows.end || cols.start > cols.end || rows.end > r || cols.end > c {
            return Err(AutodiffError::InvalidArgument {
                op: OpKind::Slice,
                detail: format!("range rows {rows:?} cols {cols:?} outside shape [{r}, {c}]"),
            });
        }
        let x = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            out.extend_from_slice(&x[i * c + cols.start..i * c + cols.end]);
        }
        let rg = self.rg(&[a]);
        let (nr, nc) = (rows.len(), cols.len());
        Ok(self.push(nr, nc, out, Op::Slice { src: a, rows, cols }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Result<Var> {
        let r = self.shape(a).0;
        self.slice(a, 0..r, cols)
    }

    pub fn slice_rows(&mut self, a: Var, rows: Range<usize>) -> Result<Var> {
        let c = self.shape(a).1;
        self.slice(a, rows, 0..c)
    }

    /// Gradient of the last backward root with respect to `v`, if `v` was
    /// reached and requires gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (zero if unreached) into `tensor`'s grad.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) {
        match self.grad(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0; tensor.len()]),
        }
    }

    /// Reverse sweep from a scalar root. Replaces gradients from any
    /// previous call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let (r, c) = self.shape(root);
        if r * c != 1 {
            return Err(AutodiffError::NonScalarRoot(vec![r, c]));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream);
            self.grads[idx] = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Gradient buffer of `v`, zero-initialized on first touch.
    fn grad_buf(&mut self, v: Var) -> &mut [f64] {
        let n = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, up: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(a);
                let n = self.nodes[b.0].cols;
                if self.wants(a) {
                    // dA = dC · Bᵀ
                    let bv = &self.nodes[b.0].value;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let urow = &up[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            da[i * k + kk] = dot(urow, brow);
                        }
                    }
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    // dB += Aᵀ · dC
                    let nb = self.nodes[b.0].value.len();
                    let db = self.grads[b.0].get_or_insert_with(|| vec![0.0; nb]);
                    let av = &self.nodes[a.0].value;
                    for i in 0..m {
                        let urow = &up[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let s = av[i * k + kk];
                            if s != 0.0 {
                                axpy(s, urow, &mut db[kk * n..(kk + 1) * n]);
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(a) {
                    self.accumulate(a, up.to_vec());
                }
                if self.wants(b) {
                    let (rb, cb) = self.shape(b);
                    let ra = self.nodes[a.0].rows;
                    if rb == ra {
                        self.accumulate(b, up.to_vec());
                    } else {
                        let db = self.grad_buf(b);
                        for row in up.chunks_exact(cb) {
                            db.iter_mut().zip(row).for_each(|(d, u)| *d += u);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let bv = &self.nodes[b.0].value;
                    let da = up.iter().zip(bv).map(|(u, y)| u * y).collect();
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let av = &self.nodes[a.0].value;
                    let db = up.iter().zip(av).map(|(u, x)| u * x).collect();
                    self.accumulate(b, db);
                }
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let da = up.iter().zip(y).map(|(u, y)| u * y * (1.0 - y)).collect();
                self.accumulate(a, da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let da = up.iter().zip(y).map(|(u, y)| u * (1.0 - y * y)).collect();
                self.accumulate(a, da);
            }
            Op::Square(a) => {
                let x = &self.nodes[a.0].value;
                let da = up.iter().zip(x).map(|(u, x)| 2.0 * u * x).collect();
                self.accumulate(a, da);
            }
            Op::SoftmaxRows(a) => {
                let c = self.nodes[idx].cols;
                let y = &self.nodes[idx].value;
                let mut da = vec![0.0; y.len()];
                if c > 0 {
                    for ((drow, yrow), urow) in da.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(up.chunks_exact(c)) {
                        let s = dot(yrow, urow);
                        for j in 0..c {
                            drow[j] = yrow[j] * (urow[j] - s);
                        }
                    }
                }
                self.accumulate(a, da);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                self.accumulate(a, vec![up[0]; n]);
            }
            Op::Transpose(a) => {
                let (r, c) = self.shape(a);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = up[j * r + i];
                    }
                }
                self.accumulate(a, da);
            }
            Op::Slice { src, rows, cols } => {
                if self.wants(src) {
                    let c = self.nodes[src.0].cols;
                    let w = cols.len();
                    let ds = self.grad_buf(src);
                    for (k, i) in rows.enumerate() {
                        let dst = &mut ds[i * c + cols.start..i * c + cols.end];
                        dst.iter_mut().zip(&up[k * w..(k + 1) * w]).for_each(|(d, u)| *d += u);
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let cols = self.nodes[idx].cols;
                match axis {
                    Axis::Rows => {
                        let mut offset = 0;
                        for p in parts {
                            let n = self.nodes[p.0].value.len();
                            if self.wants(p) {
                                let dp = self.grad_buf(p);
                                dp.iter_mut().zip(&up[offset..offset + n]).for_each(|(d, u)| *d += u);
                            }
                            offset += n;
                        }
                    }
                    Axis::Cols => {
                        let rows = self.nodes[idx].rows;
                        let mut col0 = 0;
                        for p in parts {
                            let pc = self.nodes[p.0].cols;
                            if self.wants(p) {
                                let dp = self.grad_buf(p);
                                for i in 0..rows {
                                    let src = &up[i * cols + col0..i * cols + col0 + pc];
                                    dp[i * pc..(i + 1) * pc].iter_mut().zip(src).for_each(|(d, u)| *d += u);
                                }
                            }
                            col0 += pc;
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (row maximum subtracted first).
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent partial sums so the loop vectorizes
    let n = a.len().min(b.len());
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let (ac, bc) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        s0 += x[0] * y[0];
        s1 += x[1] * y[1];
        s2 += x[2] * y[2];
        s3 += x[3] * y[3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// `out = a (m×k) · b (k×n)`, row-major, `out` pre-zeroed.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let s = a[i * k + kk];
            if s != 0.0 {
                axpy(s, &b[kk * n..(kk + 1) * n], orow);
            }
        }
    }
}

/// Central finite-difference check of the tape gradient of a scalar function.
///
/// `f` records a scalar on a fresh tape from the leaf it is given. Returns the
/// maximum over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-4)`;
/// the floor keeps coordinates with vanishing gradient from amplifying
/// rounding noise.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(AutodiffError::InvalidArgument {
            op: OpKind::Leaf,
            detail: format!("grad_check eps {eps} outside (0, 1e-2]"),
        });
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x, true);
    let root = f(&mut tape, leaf)?;
    tape.backward(root)?;
    let analytic = tape.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let shifted = Tensor::new(x.shape().to_vec(), values)?;
        let leaf = t.leaf(&shifted, true);
        let root = f(&mut t, leaf)?;
        Ok(t.value(root)[0])
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.values().to_vec();
        let mut minus = x.values().to_vec();
        plus[i] += eps;
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let v = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, v).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_length_and_nonfinite() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(AutodiffError::LengthMismatch { expected: 6, .. })
        ));
        assert!(matches!(
            Tensor::from_data(vec![2], vec![1.0, f64::NAN]),
            Err(AutodiffError::NonFinite { index: 1, .. })
        ));
        assert!(Tensor::new(vec![1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn add_elementwise() {
        let mut t = Tape::new();
        let a = t.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let b = t.constant(1, 2, vec![3.0, 4.0]).unwrap();
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c), &[4.0, 6.0]);
    }

    #[test]
    fn add_broadcasts_row_bias_only() {
        let mut t = Tape::new();
        let a = t.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant(1, 2, vec![10.0, 20.0]).unwrap();
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c), &[11.0, 22.0, 13.0, 24.0]);
        let col = t.constant(2, 1, vec![1.0, 1.0]).unwrap();
        assert!(t.add(a, col).is_err());
    }

    #[test]
    fn matmul_shape_rule_and_error() {
        let mut t = Tape::new();
        let a = t.constant(2, 3, vec![1.0; 6]).unwrap();
        let b = t.constant(3, 1, vec![1.0; 3]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), (2, 1));
        let err = t.matmul(b, b).unwrap_err();
        match err {
            AutodiffError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, OpKind::MatMul);
                assert_eq!(lhs, vec![3, 1]);
                assert_eq!(rhs, vec![3, 1]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_msg_names_op(&t.matmul(b, b).unwrap_err(), "matmul"));
    }

    fn err_msg_names_op(e: &AutodiffError, op: &str) -> bool {
        e.to_string().contains(op)
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let mut t = Tape::new();
        let a = t.constant(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let s = t.softmax_rows(a);
        for &v in t.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_square() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::scalar(3.0), true);
        let y = t.square(x);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_product_rule() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::scalar(2.0), true);
        let b = t.leaf(&Tensor::scalar(5.0), true);
        let c = t.mul(a, b).unwrap();
        t.backward(c).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[5.0]);
        assert_eq!(t.grad(b).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_sum_of_softmax_is_zero() {
        let mut t = Tape::new();
        let v = t.leaf(&Tensor::row(vec![0.3, -1.2, 2.5, 0.0]), true);
        let s = t.softmax_rows(v);
        let r = t.sum(s);
        t.backward(r).unwrap();
        for g in t.grad(v).unwrap() {
            assert!(g.abs() < 1e-15, "{g}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let v = t.leaf(&Tensor::row(vec![1.0, 2.0]), true);
        assert!(matches!(t.backward(v), Err(AutodiffError::NonScalarRoot(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + x  -> dy/dx = 2x + 1
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::scalar(1.5), true);
        let sq = t.mul(x, x).unwrap();
        let y = t.add(sq, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn tensor_grad_is_sum_into_until_zeroed() {
        let mut w = Tensor::row(vec![1.0, 2.0]);
        for _ in 0..2 {
            let mut t = Tape::new();
            let v = t.leaf(&w, true);
            let s = t.sum(v);
            t.backward(s).unwrap();
            t.accumulate_into(v, &mut w);
        }
        assert_eq!(w.grad().unwrap(), &[2.0, 2.0]);
        w.zero_grad();
        assert_eq!(w.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_check_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 1, 6);
        let err = grad_check(
            |t, x| {
                let s = t.square(x);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_tanh_at_zero() {
        let x = Tensor::row(vec![0.0; 4]);
        let mut t = Tape::new();
        let leaf = t.leaf(&x, true);
        let y = t.tanh(leaf);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(leaf).unwrap(), &[1.0; 4]);
        let err = grad_check(
            |t, x| {
                let y = t.tanh(x);
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, x| Ok(t.square(x)), &x, 0.1).is_err());
        assert!(grad_check(|t, x| Ok(t.square(x)), &x, 0.0).is_err());
    }

    /// Every primitive wrapped into a scalar objective with a fixed random
    /// projection so that each output coordinate carries a distinct weight.
    fn primitive_objectives() -> Vec<(&'static str, usize, usize)> {
        vec![
            ("matmul", 3, 4),
            ("add", 3, 4),
            ("add_bias", 3, 4),
            ("mul", 3, 4),
            ("sigmoid", 3, 4),
            ("tanh", 3, 4),
            ("softmax", 3, 4),
            ("concat_rows", 3, 4),
            ("concat_cols", 3, 4),
            ("slice", 3, 4),
            ("transpose", 3, 4),
            ("sum", 3, 4),
            ("square", 3, 4),
        ]
    }

    fn apply_primitive(name: &str, t: &mut Tape, x: Var, other: &Tensor, proj_seed: u64) -> Result<Var> {
        let o = t.leaf(other, false);
        let y = match name {
            "matmul" => {
                let w = t.transpose(o);
                t.matmul(x, w)?
            }
            "add" => t.add(x, o)?,
            "add_bias" => {
                let b = t.slice_rows(o, 0..1)?;
                t.add(x, b)?
            }
            "mul" => t.mul(x, o)?,
            "sigmoid" => t.sigmoid(x),
            "tanh" => t.tanh(x),
            "softmax" => t.softmax_rows(x),
            "concat_rows" => t.concat(&[x, o, x], Axis::Rows)?,
            "concat_cols" => t.concat(&[o, x], Axis::Cols)?,
            "slice" => t.slice(x, 1..3, 1..4)?,
            "transpose" => t.transpose(x),
            "sum" => t.sum(x),
            "square" => t.square(x),
            _ => unreachable!(),
        };
        let (r, c) = t.shape(y);
        let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
        let proj = random_tensor(&mut rng, r, c);
        let p = t.leaf(&proj, false);
        let weighted = t.mul(y, p)?;
        Ok(t.sum(weighted))
    }

    #[test]
    fn every_primitive_passes_grad_check_on_seeded_inputs() {
        for (name, r, c) in primitive_objectives() {
            for seed in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + 7);
                let x = random_tensor(&mut rng, r, c);
                let other = random_tensor(&mut rng, r, c);
                let err = grad_check(|t, x| apply_primitive(name, t, x, &other, seed), &x, 1e-5).unwrap();
                assert!(err < 1e-4, "{name} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn gradients_are_bitwise_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = random_tensor(&mut rng, 4, 5);
            let w = random_tensor(&mut rng, 5, 3);
            let mut t = Tape::new();
            let xv = t.leaf(&x, true);
            let wv = t.leaf(&w, true);
            let h = t.matmul(xv, wv).unwrap();
            let h = t.tanh(h);
            let s = t.softmax_rows(h);
            let q = t.square(s);
            let l = t.sum(q);
            t.backward(l).unwrap();
            (t.grad(xv).unwrap().to_vec(), t.grad(wv).unwrap().to_vec())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(b1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let x = t.leaf(&Tensor::row(vec![3.0, 4.0]), true);
        let y = t.mul(c, x).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0]);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(row in proptest::collection::vec(-700.0f64..700.0, 1..12)) {
                let mut t = Tape::new();
                let n = row.len();
                let a = t.constant(1, n, row).unwrap();
                let s = t.softmax_rows(a);
                let total: f64 = t.value(s).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
