//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each recorded node keeps its
//! value; [`Tape::backward`] walks the nodes in reverse insertion order, which
//! is a valid topological order because a node can only reference nodes that
//! already exist.
//!
//! Fused kernels that do not decompose nicely into primitives (grid sampling,
//! volume compositing, cross entropy) plug in through [`Function`].

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor with an optional accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as trainable.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient. Accumulation is additive; callers
    /// clear it with [`Tensor::zero_grad`].
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable kernel recorded on the tape as a single node.
pub trait Function {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product. Returns one entry per input; `None` for inputs
    /// whose `needs_grad` flag is false.
    fn backward(
        &self,
        inputs: &[&[f64]],
        output: &[f64],
        grad_output: &[f64],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Reshape(Var),
    BroadcastRows(Var),
    MatMul { a: Var, b: Var, n: usize, k: usize, m: usize },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Softmax { input: Var, outer: usize, len: usize, inner: usize },
    Concat { inputs: Vec<Var>, widths: Vec<usize> },
    SliceCols { input: Var, width: usize, start: usize },
    GatherRows { input: Var, row: usize, indices: Vec<usize> },
    ScatterRows { input: Var, row: usize, indices: Vec<usize> },
    ClampMax(Var, f64),
    Custom { inputs: Vec<Var>, func: Box<dyn Function> },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Reshape(..) => "reshape",
            Op::BroadcastRows(..) => "broadcast",
            Op::MatMul { .. } => "matmul",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice",
            Op::GatherRows { .. } => "gather",
            Op::ScatterRows { .. } => "scatter",
            Op::ClampMax(..) => "clamp_max",
            Op::Custom { func, .. } => func.name(),
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Dynamic computation record for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.nodes.iter().map(|n| (n.op.kind(), &n.shape)))
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Treats a tensor as `rows x rest`; 1-D tensors are a column.
fn as_rows(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-major `c[n x m] = a[n x k] * b[k x m]` where each operand is given
/// as `(data, row stride, column stride)`, so transposes are free.
fn gemm(a: (&[f64], isize, isize), b: (&[f64], isize, isize), n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    if n == 0 || m == 0 || k == 0 {
        return out;
    }
    let span = |(d, rs, cs): (&[f64], isize, isize), rows: usize, cols: usize| {
        (rows - 1) * rs as usize + (cols - 1) * (cs as usize) < d.len()
    };
    assert!(span(a, n, k) && span(b, k, m), "gemm operand too short");
    // SAFETY: the assertion above keeps every strided read inside its slice,
    // and `out` holds exactly n * m elements written with strides (m, 1).
    unsafe {
        matrixmultiply::dgemm(n, k, m, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, 0.0, out.as_mut_ptr(), m as isize, 1);
    }
    out
}

/// `a[n x k] * b[k x m]`. Every output row depends only on its own input
/// row, which keeps chunked rendering bit-identical.
fn matmul_kernel(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    gemm((a, k as isize, 1), (b, m as isize, 1), n, k, m)
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as a leaf; it participates in backward iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>, bool)> {
        self.same_shape(op, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok((self.shape(a).to_vec(), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(shape, value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(shape, value, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(shape, value, rg, Op::Mul(a, b)))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).iter().map(|&v| scale * v + shift).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.requires_grad(x));
        self.push(shape, value, rg, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape, value, rg, Op::Reshape(x)))
    }

    /// Repeats a 1-D tensor of length `m` into an `rows x m` matrix.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let shape = self.shape(v).to_vec();
        if shape.len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast",
                lhs: shape,
                rhs: vec![rows],
            });
        }
        let src = self.value(v);
        let mut value = Vec::with_capacity(rows * src.len());
        for _ in 0..rows {
            value.extend_from_slice(src);
        }
        let rg = self.requires_grad(v);
        Ok(self.push(vec![rows, shape[0]], value, rg, Op::BroadcastRows(v)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let value = matmul_kernel(self.value(a), self.value(b), n, k, m);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![n, m], value, rg, Op::MatMul { a, b, n, k, m }))
    }

    /// `x * w + b` for `x: [n, k]`, `w: [k, m]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let rows = self.shape(xw)[0];
        let bb = self.broadcast_rows(b, rows)?;
        self.add(xw, bb)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.requires_grad(x));
        self.push(shape, value, rg, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// Clamps from above. The gradient is zero wherever the clamp is active.
    pub fn clamp_max(&mut self, x: Var, max: f64) -> Var {
        self.unary(x, |v| if v > max { max } else { v }, Op::ClampMax(x, max))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s = self.value(x).iter().sum::<f64>() / n as f64;
        let rg = self.requires_grad(x);
        Ok(self.push(vec![], vec![s], rg, Op::Mean(x)))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let value = softmax_kernel(self.value(x), outer, len, inner);
        let rg = self.requires_grad(x);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Softmax {
                input: x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Column-wise concatenation of 2-D tensors with equal row counts.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                value.extend_from_slice(&self.value(v)[r * w..(r + 1) * w]);
            }
        }
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(
            vec![rows, total],
            value,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
        ))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                msg: format!("columns {start}..{end} of shape {s:?}"),
            });
        }
        let (rows, width) = (s[0], s[1]);
        let mut value = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            value.extend_from_slice(&self.value(x)[r * width + start..r * width + end]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            vec![rows, end - start],
            value,
            rg,
            Op::SliceCols {
                input: x,
                width,
                start,
            },
        ))
    }

    /// Selects rows (first-axis entries) by index.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (rows, row) = as_rows(&s);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather",
                msg: format!("row {bad} out of range for shape {s:?}"),
            });
        }
        let src = self.value(x);
        let mut value = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            value.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut shape = s.clone();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = indices.len();
        let rg = self.requires_grad(x);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::GatherRows {
                input: x,
                row,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Places row `j` of `x` at row `indices[j]` of a zero tensor with `rows`
    /// rows. Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (n, row) = as_rows(&s);
        if n != indices.len() || indices.iter().any(|&i| i >= rows) {
            return Err(AutodiffError::InvalidArgument {
                op: "scatter",
                msg: format!("{} indices into {rows} rows for shape {s:?}", indices.len()),
            });
        }
        let mut value = vec![0.0; rows * row];
        let src = self.value(x);
        for (j, &i) in indices.iter().enumerate() {
            value[i * row..(i + 1) * row].copy_from_slice(&src[j * row..(j + 1) * row]);
        }
        let mut shape = s.clone();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = rows;
        let rg = self.requires_grad(x);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::ScatterRows {
                input: x,
                row,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Records a fused kernel whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        func: Box<dyn Function>,
    ) -> Result<Var> {
        let expected = numel(&shape);
        if expected != value.len() {
            return Err(AutodiffError::DataLength {
                shape,
                expected,
                actual: value.len(),
            });
        }
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                func,
            },
        ))
    }

    /// Populates gradients of `root` with respect to every node that requires
    /// them. Previous gradients on this tape are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.vjp(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn vjp(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let map = |x: Var, f: &dyn Fn(usize) -> f64| -> Vec<(Var, Vec<f64>)> {
            vec![(x, (0..g.len()).map(f).collect())]
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut out = Vec::new();
                if rg(*a) {
                    out.push((*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()));
                }
                if rg(*b) {
                    out.push((*b, g.iter().zip(va).map(|(g, x)| g * x).collect()));
                }
                out
            }
            Op::Affine(x, s) => map(*x, &|i| g[i] * s),
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::BroadcastRows(x) => {
                let m = self.nodes[x.0].value.len();
                let mut acc = vec![0.0; m];
                for row in g.chunks_exact(m) {
                    acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![(*x, acc)]
            }
            Op::MatMul { a, b, n, k, m } => {
                let (n, k, m) = (*n, *k, *m);
                let mut out = Vec::new();
                if rg(*a) {
                    out.push((*a, gemm((g, m as isize, 1), (val(*b), 1, m as isize), n, m, k)));
                }
                if rg(*b) {
                    out.push((*b, gemm((val(*a), 1, k as isize), (g, m as isize, 1), k, n, m)));
                }
                out
            }
            Op::Relu(x) => {
                let vx = val(*x);
                map(*x, &|i| if vx[i] > 0.0 { g[i] } else { 0.0 })
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                map(*x, &|i| g[i] * y[i] * (1.0 - y[i]))
            }
            Op::Softplus(x) => {
                let vx = val(*x);
                map(*x, &|i| g[i] * sigmoid(vx[i]))
            }
            Op::Exp(x) => {
                let y = &node.value;
                map(*x, &|i| g[i] * y[i])
            }
            Op::Log(x) => {
                let vx = val(*x);
                map(*x, &|i| g[i] / vx[i])
            }
            Op::ClampMax(x, max) => {
                let vx = val(*x);
                map(*x, &|i| if vx[i] > *max { 0.0 } else { g[i] })
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Softmax {
                input,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                let mut gi = vec![0.0; y.len()];
                for o in 0..*outer {
                    for j in 0..*inner {
                        let base = o * len * inner + j;
                        let dot: f64 = (0..*len).map(|c| y[base + c * inner] * g[base + c * inner]).sum();
                        for c in 0..*len {
                            let idx = base + c * inner;
                            gi[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![(*input, gi)]
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut out: Vec<(Var, Vec<f64>)> =
                    inputs.iter().zip(widths).map(|(&v, &w)| (v, Vec::with_capacity(rows * w))).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for ((_, buf), &w) in out.iter_mut().zip(widths) {
                        buf.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                out
            }
            Op::SliceCols { input, width, start } => {
                let w = node.shape[1];
                let rows = node.shape[0];
                let mut gi = vec![0.0; rows * width];
                for r in 0..rows {
                    gi[r * width + start..r * width + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                vec![(*input, gi)]
            }
            Op::GatherRows { input, row, indices } => {
                let mut gi = vec![0.0; val(*input).len()];
                for (j, &i) in indices.iter().enumerate() {
                    for c in 0..*row {
                        gi[i * row + c] += g[j * row + c];
                    }
                }
                vec![(*input, gi)]
            }
            Op::ScatterRows { input, row, indices } => {
                let mut gi = Vec::with_capacity(indices.len() * row);
                for &i in indices {
                    gi.extend_from_slice(&g[i * row..(i + 1) * row]);
                }
                vec![(*input, gi)]
            }
            Op::Custom { inputs, func } => {
                let ins: Vec<&[f64]> = inputs.iter().map(|&v| val(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| rg(v)).collect();
                let gs = func.backward(&ins, &node.value, g, &needs);
                inputs
                    .iter()
                    .zip(gs)
                    .filter_map(|(&v, gi)| gi.map(|gi| (v, gi)))
                    .collect()
            }
        }
    }
}

pub(crate) fn softmax_kernel(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let base = o * len * inner + j;
            let mx = (0..len).map(|c| x[base + c * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..len {
                let e = (x[base + c * inner] - mx).exp();
                y[base + c * inner] = e;
                z += e;
            }
            for c in 0..len {
                y[base + c * inner] /= z;
            }
        }
    }
    y
}
