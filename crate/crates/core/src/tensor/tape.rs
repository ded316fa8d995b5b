use std::collections::BTreeMap;

use rand::Rng;

use super::{numel, Gradients, ParamId, ParamStore, Result, Tensor, TensorError};
use crate::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary<S> {
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Gelu,
    LeakyRelu(S),
    LogSigmoid,
}

/// Output shape and per-operand strides (0 along broadcast axes).
struct Broadcast {
    out: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl Broadcast {
    /// Calls `f(t, i, j)` for each output offset `t` with the operand
    /// offsets it reads.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let nd = self.out.len();
        let mut coord = vec![0usize; nd];
        let (mut i, mut j) = (0, 0);
        for t in 0..numel(&self.out) {
            f(t, i, j);
            for d in (0..nd).rev() {
                coord[d] += 1;
                i += self.sa[d];
                j += self.sb[d];
                if coord[d] < self.out[d] {
                    break;
                }
                i -= self.sa[d] * self.out[d];
                j -= self.sb[d] * self.out[d];
                coord[d] = 0;
            }
        }
    }
}

enum Op<S> {
    Input,
    Variable,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Add(Var, Var, Option<Broadcast>),
    Sub(Var, Var, Option<Broadcast>),
    Mul(Var, Var, Option<Broadcast>),
    Div(Var, Var, Option<Broadcast>),
    Scale(Var, S),
    Unary(Var, Unary<S>),
    Softmax(Var, usize),
    Dropout(Var, Vec<S>),
    Sum(Var),
    Mean(Var),
    SumLast(Var, usize),
    SliceRows {
        x: Var,
        offset: usize,
    },
    SliceCols {
        x: Var,
        rows: usize,
        cols: usize,
        start: usize,
        len: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols {
        parts: Vec<Var>,
        rows: usize,
    },
    Reshape(Var),
    Gather {
        table: Var,
        idx: Vec<usize>,
        width: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        width: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
}

enum Value<S> {
    Owned(Vec<S>),
    Param(ParamId),
}

struct Node<S> {
    value: Value<S>,
    shape: Vec<usize>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records a forward computation for one reverse sweep.
///
/// Parameter nodes borrow their values from the store, so building a tape
/// never copies embedding tables.
pub struct Tape<'p, S: Scalar> {
    store: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    check_finite: bool,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn broadcast(a: &[usize], b: &[usize], op: &'static str) -> Result<(Vec<usize>, Option<Broadcast>)> {
    if a == b {
        return Ok((a.to_vec(), None));
    }
    let nd = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut p = vec![1; nd - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(nd);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return Err(shape_err(op, a, b));
        }
        out.push(x.max(y));
    }
    let strides = |s: &[usize]| {
        let mut st = vec![0; nd];
        let mut acc = 1;
        for d in (0..nd).rev() {
            st[d] = if s[d] == 1 { 0 } else { acc };
            acc *= s[d];
        }
        st
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    Ok((out.clone(), Some(Broadcast { out, sa, sb })))
}

/// Numerically stable softmax of a slice (max subtraction).
pub(crate) fn softmax_slice<S: Scalar>(x: &[S]) -> Result<Vec<S>> {
    if x.is_empty() {
        return Err(TensorError::EmptyAxis);
    }
    let mx = x.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = x.iter().map(|&v| (v - mx).exp()).collect();
    let z: S = e.iter().copied().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<S: Scalar> Unary<S> {
    fn name(&self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Gelu => "gelu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::LogSigmoid => "log_sigmoid",
        }
    }

    fn apply(&self, x: S) -> S {
        match *self {
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(S::zero()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Gelu => {
                let c = S::lit(GELU_C);
                let inner = c * (x + S::lit(0.044715) * x * x * x);
                S::lit(0.5) * x * (S::one() + inner.tanh())
            }
            Unary::LeakyRelu(a) => {
                if x > S::zero() {
                    x
                } else {
                    a * x
                }
            }
            Unary::LogSigmoid => x.min(S::zero()) - (S::one() + (-x.abs()).exp()).ln(),
        }
    }

    fn derivative(&self, x: S, y: S) -> S {
        match *self {
            Unary::Tanh => S::one() - y * y,
            Unary::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Unary::Sigmoid => y * (S::one() - y),
            Unary::Exp => y,
            Unary::Log => S::one() / x,
            Unary::Gelu => {
                let c = S::lit(GELU_C);
                let k = S::lit(0.044715);
                let t = (c * (x + k * x * x * x)).tanh();
                let dt = (S::one() - t * t) * c * (S::one() + S::lit(3.0) * k * x * x);
                S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * dt
            }
            Unary::LeakyRelu(a) => {
                if x > S::zero() {
                    S::one()
                } else {
                    a
                }
            }
            Unary::LogSigmoid => sigmoid(-x),
        }
    }
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new(store: &'p ParamStore<S>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables NaN/Inf detection after every op.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn store(&self) -> &'p ParamStore<S> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        match &self.nodes[v.0].value {
            Value::Owned(x) => x,
            Value::Param(id) => self.store.get(*id).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a node out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<S> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.value(v)[0]
    }

    fn push(&mut self, op: Op<S>, shape: Vec<usize>, value: Vec<S>, name: &'static str) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.check_finite && value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite(name));
        }
        let needs_grad = self.inputs_need_grad(&op);
        self.nodes.push(Node {
            value: Value::Owned(value),
            shape,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn inputs_need_grad(&self, op: &Op<S>) -> bool {
        match op {
            Op::Input => false,
            Op::Variable => true,
            Op::Param(id) => self.store.get(*id).requires_grad(),
            Op::MatMul { a, b, .. } => self.ng(*a) || self.ng(*b),
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) | Op::Div(a, b, _) => {
                self.ng(*a) || self.ng(*b)
            }
            Op::Transpose { x, .. }
            | Op::Scale(x, _)
            | Op::Unary(x, _)
            | Op::Softmax(x, _)
            | Op::Dropout(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumLast(x, _)
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Reshape(x) => self.ng(*x),
            Op::ConcatRows(parts) | Op::ConcatCols { parts, .. } => parts.iter().any(|p| self.ng(*p)),
            Op::Gather { table, .. } => self.ng(*table),
            Op::LayerNorm { x, gamma, beta, .. } => self.ng(*x) || self.ng(*gamma) || self.ng(*beta),
        }
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: &Tensor<S>) -> Var {
        self.push(Op::Input, t.shape().to_vec(), t.data().to_vec(), "input")
            .expect("input tensor")
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        self.push(Op::Input, t.shape, t.data, "constant")
    }

    /// Leaf whose gradient is reported by [`TapeGradients::wrt`].
    pub fn variable(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        self.push(Op::Variable, t.shape, t.data, "variable")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.store.get(id);
        self.nodes.push(Node {
            value: Value::Param(id),
            shape: t.shape().to_vec(),
            op: Op::Param(id),
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == S::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        self.push(Op::MatMul { a, b, m, k, n }, vec![m, n], out, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected a matrix, got {s:?}"),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![S::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = v[i * cols + j];
            }
        }
        self.push(Op::Transpose { x, rows, cols }, vec![cols, rows], out, "transpose")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S) -> Result<(Vec<usize>, Vec<S>, Option<Broadcast>)> {
        let (shape, bc) = broadcast(self.shape(a), self.shape(b), name)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = match &bc {
            None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => {
                let mut out = Vec::with_capacity(numel(&m.out));
                m.for_each(|_, i, j| out.push(f(av[i], bv[j])));
                out
            }
        };
        Ok((shape, out, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, bc) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b, bc), shape, out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, bc) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b, bc), shape, out, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, bc) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b, bc), shape, out, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, bc) = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(Op::Div(a, b, bc), shape, out, "div")
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale(x, c), shape, out, "scale")
    }

    fn unary(&mut self, x: Var, f: Unary<S>) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| f.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Unary(x, f), shape, out, f.name())
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    /// `ln σ(x)` evaluated without overflow.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::LogSigmoid)
    }

    /// Softmax over the last axis.
    ///
    /// `mask` (one flag per element, or one per position of the last axis)
    /// excludes entries from the support; they receive exactly zero. A row whose
    /// support is empty yields all zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().expect("non-empty shape");
        let v = self.value(x);
        if let Some(m) = mask {
            if m.len() != cols && m.len() != v.len() {
                return Err(shape_err("softmax mask", &shape, &[m.len()]));
            }
        }
        let mut out = vec![S::zero(); v.len()];
        let mut buf = Vec::with_capacity(cols);
        for (r, row) in v.chunks(cols).enumerate() {
            let keep = |j: usize| match mask {
                None => true,
                Some(m) if m.len() == cols => m[j],
                Some(m) => m[r * cols + j],
            };
            buf.clear();
            buf.extend((0..cols).filter(|&j| keep(j)).map(|j| row[j]));
            if buf.is_empty() {
                continue;
            }
            let sm = softmax_slice(&buf)?;
            let mut it = sm.into_iter();
            for j in 0..cols {
                if keep(j) {
                    out[r * cols + j] = it.next().expect("support size");
                }
            }
        }
        self.push(Op::Softmax(x, cols), shape, out, "softmax")
    }

    /// Inverted dropout. With `training == false` or `p == 0` this returns `x`
    /// itself, so evaluation is bitwise identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate {p} outside [0, 1)"),
            });
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = S::lit(1.0 / (1.0 - p));
        let factors: Vec<S> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&factors)
            .map(|(&v, &f)| v * f)
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Dropout(x, factors), shape, out, "dropout")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push(Op::Sum(x), vec![1], vec![s], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().copied().sum::<S>() / S::from_usize(v.len()).expect("len");
        self.push(Op::Mean(x), vec![1], vec![s], "mean")
    }

    /// Sums over the last axis, keeping it with extent 1.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let cols = *shape.last().expect("shape");
        let out = self.value(x).chunks(cols).map(|c| c.iter().copied().sum()).collect();
        *shape.last_mut().expect("shape") = 1;
        self.push(Op::SumLast(x, cols), shape, out, "sum_last")
    }

    /// Rows `start..start + len` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        if len == 0 || start + len > shape[0] {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {shape:?}", start + len),
            });
        }
        let row: usize = shape[1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[0] = len;
        let out = self.value(x)[start * row..(start + len) * row].to_vec();
        self.push(Op::SliceRows { x, offset: start * row }, out_shape, out, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || len == 0 || start + len > shape[1] {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of {shape:?}", start + len),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        self.push(
            Op::SliceCols {
                x,
                rows,
                cols,
                start,
                len,
            },
            vec![rows, len],
            out,
            "slice_cols",
        )
    }

    /// Concatenates along the first axis (for 1-D inputs: vector concatenation).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_rows",
            msg: "no parts".into(),
        })?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(Op::ConcatRows(parts.to_vec()), shape, out, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_cols",
            msg: "no parts".into(),
        })?;
        let rows = self.shape(*first)[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err("concat_cols", self.shape(*first), s));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
                rows,
            },
            vec![rows, total],
            out,
            "concat_cols",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        self.push(Op::Reshape(x), shape.to_vec(), out, "reshape")
    }

    /// Row lookup into a 2-D table: output row `i` is `table[idx[i]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 || idx.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("table {s:?}, {} indices", idx.len()),
            });
        }
        let (rows, width) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of {rows} rows"),
            });
        }
        let v = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&v[i * width..(i + 1) * width]);
        }
        self.push(
            Op::Gather {
                table,
                idx: idx.to_vec(),
                width,
            },
            vec![idx.len(), width],
            out,
            "gather",
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().expect("shape");
        if self.value(gamma).len() != width || self.value(beta).len() != width {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        let n = S::from_usize(width).expect("width");
        let eps = S::lit(eps);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(shape.iter().product());
        let mut inv_std = Vec::new();
        let mut out = Vec::with_capacity(xhat.capacity());
        for row in self.value(x).chunks(width) {
            let mu = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                width,
                xhat,
                inv_std,
            },
            shape,
            out,
            "layer_norm",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<TapeGradients<S>> {
        let s = self.shape(loss);
        if numel(s) != 1 {
            return Err(TensorError::NonScalarLoss(s.to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![S::one()]);
        let mut params: BTreeMap<ParamId, Vec<S>> = BTreeMap::new();
        let mut vars: BTreeMap<usize, Vec<S>> = BTreeMap::new();

        fn add_into<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize) -> &mut Vec<S> {
            slot.get_or_insert_with(|| vec![S::zero(); len])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            macro_rules! acc {
                ($v:expr) => {{
                    let v: Var = $v;
                    let len = self.value(v).len();
                    add_into(&mut grads[v.0], len)
                }};
            }
            match &node.op {
                Op::Input => {}
                Op::Variable => {
                    let e = vars.entry(i).or_insert_with(|| vec![S::zero(); g.len()]);
                    e.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                }
                Op::Param(id) => {
                    let e = params.entry(*id).or_insert_with(|| vec![S::zero(); g.len()]);
                    e.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                }
                &Op::MatMul { a, b, m, k, n } => {
                    if self.ng(a) {
                        let bv = self.value(b);
                        let ga = acc!(a);
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let mut s = S::zero();
                                for (x, y) in grow.iter().zip(brow) {
                                    s += *x * *y;
                                }
                                ga[r * k + p] += s;
                            }
                        }
                    }
                    if self.ng(b) {
                        let av = self.value(a);
                        let gb = acc!(b);
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let x = av[r * k + p];
                                if x == S::zero() {
                                    continue;
                                }
                                let brow = &mut gb[p * n..(p + 1) * n];
                                for (o, &y) in brow.iter_mut().zip(grow) {
                                    *o += x * y;
                                }
                            }
                        }
                    }
                }
                &Op::Transpose { x, rows, cols } => {
                    let gx = acc!(x);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
                Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -S::one()
                    } else {
                        S::one()
                    };
                    if self.ng(*a) {
                        let ga = acc!(*a);
                        match bc {
                            None => ga.iter_mut().zip(&g).for_each(|(o, &d)| *o += d),
                            Some(m) => m.for_each(|t, i, _| ga[i] += g[t]),
                        }
                    }
                    if self.ng(*b) {
                        let gb = acc!(*b);
                        match bc {
                            None => gb.iter_mut().zip(&g).for_each(|(o, &d)| *o += sign * d),
                            Some(m) => m.for_each(|t, _, j| gb[j] += sign * g[t]),
                        }
                    }
                }
                Op::Mul(a, b, bc) | Op::Div(a, b, bc) => {
                    let is_div = matches!(node.op, Op::Div(..));
                    let av = self.value(*a).to_vec();
                    let bv = self.value(*b).to_vec();
                    let da = |t: usize, j: usize| if is_div { g[t] / bv[j] } else { g[t] * bv[j] };
                    let db = |t: usize, i: usize, j: usize| {
                        if is_div {
                            -g[t] * av[i] / (bv[j] * bv[j])
                        } else {
                            g[t] * av[i]
                        }
                    };
                    if self.ng(*a) {
                        let ga = acc!(*a);
                        match bc {
                            None => (0..g.len()).for_each(|t| ga[t] += da(t, t)),
                            Some(m) => m.for_each(|t, i, j| ga[i] += da(t, j)),
                        }
                    }
                    if self.ng(*b) {
                        let gb = acc!(*b);
                        match bc {
                            None => (0..g.len()).for_each(|t| gb[t] += db(t, t, t)),
                            Some(m) => m.for_each(|t, i, j| gb[j] += db(t, i, j)),
                        }
                    }
                }
                &Op::Scale(x, c) => {
                    let gx = acc!(x);
                    gx.iter_mut().zip(&g).for_each(|(o, &d)| *o += c * d);
                }
                &Op::Unary(x, f) => {
                    let xv = self.value(x).to_vec();
                    let yv = self.value(Var(i)).to_vec();
                    let gx = acc!(x);
                    for t in 0..g.len() {
                        gx[t] += g[t] * f.derivative(xv[t], yv[t]);
                    }
                }
                &Op::Softmax(x, cols) => {
                    let y = self.value(Var(i)).to_vec();
                    let gx = acc!(x);
                    for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::Dropout(x, factors) => {
                    let gx = acc!(*x);
                    for t in 0..g.len() {
                        gx[t] += g[t] * factors[t];
                    }
                }
                &Op::Sum(x) => {
                    let gx = acc!(x);
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
                &Op::Mean(x) => {
                    let gx = acc!(x);
                    let d = g[0] / S::from_usize(gx.len()).expect("len");
                    gx.iter_mut().for_each(|o| *o += d);
                }
                &Op::SumLast(x, cols) => {
                    let gx = acc!(x);
                    for (t, o) in gx.iter_mut().enumerate() {
                        *o += g[t / cols];
                    }
                }
                &Op::SliceRows { x, offset } => {
                    let gx = acc!(x);
                    gx[offset..offset + g.len()]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(o, &d)| *o += d);
                }
                &Op::SliceCols {
                    x,
                    rows,
                    cols,
                    start,
                    len,
                } => {
                    let gx = acc!(x);
                    for r in 0..rows {
                        for c in 0..len {
                            gx[r * cols + start + c] += g[r * len + c];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.ng(p) {
                            let gp = acc!(p);
                            gp.iter_mut().zip(&g[off..off + len]).for_each(|(o, &d)| *o += d);
                        }
                        off += len;
                    }
                }
                Op::ConcatCols { parts, rows } => {
                    let total = g.len() / rows;
                    let mut c0 = 0;
                    for &p in parts {
                        let c = self.shape(p)[1];
                        if self.ng(p) {
                            let gp = acc!(p);
                            for r in 0..*rows {
                                for j in 0..c {
                                    gp[r * c + j] += g[r * total + c0 + j];
                                }
                            }
                        }
                        c0 += c;
                    }
                }
                &Op::Reshape(x) => {
                    let gx = acc!(x);
                    gx.iter_mut().zip(&g).for_each(|(o, &d)| *o += d);
                }
                Op::Gather { table, idx, width } => {
                    let gt = acc!(*table);
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..*width {
                            gt[i * width + j] += g[r * width + j];
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    width,
                    xhat,
                    inv_std,
                } => {
                    let w = *width;
                    let gv = self.value(*gamma).to_vec();
                    if self.ng(*gamma) {
                        let gg = acc!(*gamma);
                        for t in 0..g.len() {
                            gg[t % w] += g[t] * xhat[t];
                        }
                    }
                    if self.ng(*beta) {
                        let gb = acc!(*beta);
                        for t in 0..g.len() {
                            gb[t % w] += g[t];
                        }
                    }
                    if self.ng(*x) {
                        let n = S::from_usize(w).expect("width");
                        let gx = acc!(*x);
                        for (r, &is) in inv_std.iter().enumerate() {
                            let base = r * w;
                            let dxhat: Vec<S> = (0..w).map(|j| g[base + j] * gv[j]).collect();
                            let m1 = dxhat.iter().copied().sum::<S>() / n;
                            let m2 = (0..w).map(|j| dxhat[j] * xhat[base + j]).sum::<S>() / n;
                            for j in 0..w {
                                gx[base + j] += is * (dxhat[j] - m1 - xhat[base + j] * m2);
                            }
                        }
                    }
                }
            }
        }
        Ok(TapeGradients {
            params: Gradients {
                blocks: params.into_iter().collect(),
            },
            vars,
        })
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct TapeGradients<S> {
    pub params: Gradients<S>,
    vars: BTreeMap<usize, Vec<S>>,
}

impl<S: Scalar> TapeGradients<S> {
    /// Gradient with respect to a leaf created by [`Tape::variable`].
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.vars.get(&v.0).map(Vec::as_slice)
    }
}
