use std::sync::Arc;

use crate::kernels::{self, fake_quant_value};
use crate::{Element, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Provenance tag used by the quantization audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeTag {
    Plain,
    /// Output of a layer normalization.
    Normalized,
    /// Output of a softmax (probabilities, not log-probabilities).
    Softmax,
    /// Embedding table or a lookup from one.
    Embedding,
    /// Output of a fake-quantization node.
    Quantized,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Sum(Var),
    Pick { a: Var, idx: Vec<usize> },
    BandGather { a: Var, mem: usize },
    FakeQuant { a: Var, inv_scale: T, qmax: T },
    Dropout { a: Var, mask: Arc<Vec<T>> },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | AddCol(a, b) | MulScalar(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Relu(a) | Gelu(a) | Exp(a) | Log(a) | Sigmoid(a)
            | Transpose(a) | Softmax(a) | LogSoftmax(a) | Sum(a) => vec![*a],
            Gather { table, .. } => vec![*table],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
            SliceCols { a, .. } | SliceRows { a, .. } | Pick { a, .. } | BandGather { a, .. } => {
                vec![*a]
            }
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            FakeQuant { a, .. } | Dropout { a, .. } => vec![*a],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            MatMul(..) => "matmul",
            MatMulNt(..) => "matmul_nt",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            AddRow(..) => "add_row",
            AddCol(..) => "add_col",
            MulScalar(..) => "mul_scalar",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            Relu(..) => "relu",
            Gelu(..) => "gelu",
            Exp(..) => "exp",
            Log(..) => "log",
            Sigmoid(..) => "sigmoid",
            Gather { .. } => "gather_rows",
            ConcatCols(..) => "concat_cols",
            ConcatRows(..) => "concat_rows",
            SliceCols { .. } => "slice_cols",
            SliceRows { .. } => "slice_rows",
            Transpose(..) => "transpose",
            Softmax(..) => "softmax_rows",
            LogSoftmax(..) => "log_softmax_rows",
            LayerNorm { .. } => "layer_norm",
            Sum(..) => "sum",
            Pick { .. } => "pick",
            BandGather { .. } => "band_gather",
            FakeQuant { .. } => "fake_quantize",
            Dropout { .. } => "dropout",
        }
    }

    /// Ops that only move values around; tags flow through them.
    fn is_view(&self) -> bool {
        matches!(
            self,
            Op::SliceCols { .. } | Op::SliceRows { .. } | Op::Transpose(..) | Op::ConcatCols(..) | Op::ConcatRows(..)
        )
    }
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
    tag: NodeTag,
}

/// A fake-quantization node whose input is exempt from quantization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditViolation {
    pub node: usize,
    pub input_tag: NodeTag,
}

/// Linear record of operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every parent precedes its
/// children and a single reverse sweep visits each node once.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        n => (shape[..n - 1].iter().product(), shape[n - 1]),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tag(&self, v: Var) -> NodeTag {
        self.nodes[v.0].tag
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Number of recorded nodes produced by the op called `name`.
    pub fn count_op(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Gradient after [`Tape::backward`]; `None` for nodes the loss does not reach.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies a node's value into an `f32` tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.iter().map(|x| x.to_f32()).collect())
            .expect("tape node shape is consistent")
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, tag: NodeTag) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op: Op::Leaf,
            requires_grad,
            tag,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf initialised from a parameter tensor.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.param_tagged(t, NodeTag::Plain)
    }

    pub fn param_tagged(&mut self, t: &Tensor, tag: NodeTag) -> Var {
        let value = t.data().iter().map(|&x| T::from_f32(x)).collect();
        self.leaf(t.shape().to_vec(), value, true, tag)
    }

    /// Trainable leaf from raw values.
    pub fn variable(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        check_len("variable", &shape, value.len())?;
        Ok(self.leaf(shape, value, true, NodeTag::Plain))
    }

    pub fn variable_tagged(&mut self, shape: Vec<usize>, value: Vec<T>, tag: NodeTag) -> Result<Var> {
        check_len("variable", &shape, value.len())?;
        Ok(self.leaf(shape, value, true, tag))
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        check_len("constant", &shape, value.len())?;
        Ok(self.leaf(shape, value, false, NodeTag::Plain))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&x| T::from_f32(x)).collect();
        self.leaf(t.shape().to_vec(), value, false, NodeTag::Plain)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, tag: NodeTag) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
            tag,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].shape)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, op, NodeTag::Plain)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::ZERO; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), NodeTag::Plain))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::ZERO; m * n];
        kernels::matmul_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), NodeTag::Plain))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let out = kernels::transpose(self.value(a), m, n);
        let tag = self.tag(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), tag))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), NodeTag::Plain))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b), NodeTag::Plain))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), NodeTag::Plain))
    }

    /// Adds a length-`n` vector to every row of `a[m×n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, row), NodeTag::Plain))
    }

    /// Adds `col[i]` to every entry of row `i` of `a[m×n]`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(col).len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "add_col",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(col).to_vec(),
            });
        }
        let c = self.value(col);
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            for o in &mut out[i * n..(i + 1) * n] {
                *o += c[i];
            }
        }
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddCol(a, col), NodeTag::Plain))
    }

    /// Multiplies every entry by a one-element variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(TensorError::Invalid {
                op: "mul_scalar",
                msg: format!("scalar operand has shape {:?}", self.shape(s)),
            });
        }
        let sv = self.value(s)[0];
        Ok(self.map(a, Op::MulScalar(a, s), move |x| x * sv))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        self.map(a, Op::Scale(a, factor), move |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, Op::AddScalar(a), move |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > T::ZERO { x } else { T::ZERO })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), kernels::gelu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), |x| x.ln())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Multiplies by a fixed keep-mask scaled by `1/(1-p)`.
    pub fn dropout(&mut self, a: Var, keep: &[bool], p: f64) -> Result<Var> {
        if keep.len() != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                lhs: self.shape(a).to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let s = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = keep.iter().map(|&k| if k { s } else { T::ZERO }).collect();
        let value = zip_map(self.value(a), &mask, |x, m| x * m);
        let mask = Arc::new(mask);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Dropout { a, mask }, NodeTag::Plain))
    }

    // ---- indexing -------------------------------------------------------

    /// Row lookup `table[ids[r]]`; backward scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {id} out of range for {rows} rows"),
                });
            }
            out.extend_from_slice(&self.value(table)[id * d..(id + 1) * d]);
        }
        let tag = if self.tag(table) == NodeTag::Embedding {
            NodeTag::Embedding
        } else {
            NodeTag::Plain
        };
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(vec![ids.len(), d], out, op, tag))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        };
        let (m, _) = self.dims(first);
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let (_, pn) = self.dims(p);
                out.extend_from_slice(&self.value(p)[i * pn..(i + 1) * pn]);
            }
        }
        let tag = self.common_tag(parts);
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), tag))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                msg: "no inputs".into(),
            });
        };
        let (_, n) = self.dims(first);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += pm;
            out.extend_from_slice(self.value(p));
        }
        let tag = self.common_tag(parts);
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), tag))
    }

    fn common_tag(&self, parts: &[Var]) -> NodeTag {
        let t = self.tag(parts[0]);
        if parts.iter().all(|&p| self.tag(p) == t) {
            t
        } else {
            NodeTag::Plain
        }
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > n {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of {n}", start + len),
            });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let tag = self.tag(a);
        Ok(self.push(vec![m, len], out, Op::SliceCols { a, start }, tag))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > m {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {m}", start + len),
            });
        }
        let out = self.value(a)[start * n..(start + len) * n].to_vec();
        let tag = self.tag(a);
        Ok(self.push(vec![len, n], out, Op::SliceRows { a, start }, tag))
    }

    /// Gathers flat `(row, col)` entries of a 2-D node into a vector.
    pub fn pick(&mut self, a: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.dims(a);
        let mut idx = Vec::with_capacity(entries.len());
        for &(r, c) in entries {
            if r >= m || c >= n {
                return Err(TensorError::Invalid {
                    op: "pick",
                    msg: format!("entry ({r},{c}) outside {m}x{n}"),
                });
            }
            idx.push(r * n + c);
        }
        let src = self.value(a);
        let out = idx.iter().map(|&i| src[i]).collect();
        Ok(self.push(vec![entries.len()], out, Op::Pick { a, idx }, NodeTag::Plain))
    }

    /// Expands per-distance scores `a[n×w]` into a key-indexed matrix
    /// `[n × (mem+n)]` with `out[i, j] = a[i, mem + i - j]` when that
    /// distance lies in `0..w`, and zero elsewhere.
    pub fn band_gather(&mut self, a: Var, mem: usize) -> Result<Var> {
        let (n, w) = self.dims(a);
        let keys = mem + n;
        let src = self.value(a);
        let mut out = vec![T::ZERO; n * keys];
        for i in 0..n {
            for j in 0..keys {
                let q = mem + i;
                if j <= q && q - j < w {
                    out[i * keys + j] = src[i * w + (q - j)];
                }
            }
        }
        Ok(self.push(vec![n, keys], out, Op::BandGather { a, mem }, NodeTag::Plain))
    }

    // ---- reductions and normalisation ----------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::ZERO;
        for &x in self.value(a) {
            s += x;
        }
        self.push(vec![1], vec![s], Op::Sum(a), NodeTag::Plain)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::ONE / T::from_f64(n as f64))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a);
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            kernels::softmax_row(&src[i * n..(i + 1) * n], None, &mut out[i * n..(i + 1) * n]);
        }
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a), NodeTag::Softmax)
    }

    /// Row softmax over entries where `allowed` is true; fully masked rows are zero.
    pub fn masked_softmax_rows(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if allowed.len() != m * n {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax_rows",
                lhs: self.shape(a).to_vec(),
                rhs: vec![allowed.len()],
            });
        }
        let src = self.value(a);
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            kernels::softmax_row(
                &src[i * n..(i + 1) * n],
                Some(&allowed[i * n..(i + 1) * n]),
                &mut out[i * n..(i + 1) * n],
            );
        }
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a), NodeTag::Softmax))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a);
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            kernels::log_softmax_row(&src[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        self.push(self.shape(a).to_vec(), out, Op::LogSoftmax(a), NodeTag::Plain)
    }

    /// Normalises over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let eps = T::from_f64(eps);
        let inv_d = T::ONE / T::from_f64(d as f64);
        let (src, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![T::ZERO; m * d];
        let mut rstd = vec![T::ZERO; m];
        let mut out = vec![T::ZERO; m * d];
        for i in 0..m {
            let row = &src[i * d..(i + 1) * d];
            let mut mu = T::ZERO;
            for &v in row {
                mu += v;
            }
            mu = mu * inv_d;
            let mut var = T::ZERO;
            for &v in row {
                let c = v - mu;
                var += c * c;
            }
            var = var * inv_d;
            let r = T::ONE / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let xh = (row[j] - mu) * r;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, NodeTag::Normalized))
    }

    /// Symmetric fake-quantization with a straight-through gradient inside
    /// the clamp range `[-qmax, qmax]` (in units of the step).
    pub fn fake_quantize(&mut self, a: Var, inv_scale: T, bits: u32) -> Result<Var> {
        if !(2..=16).contains(&bits) {
            return Err(TensorError::Invalid {
                op: "fake_quantize",
                msg: format!("bit width {bits} outside [2, 16]"),
            });
        }
        let qmax = T::from_f64(((1u32 << (bits - 1)) - 1) as f64);
        let value = self
            .value(a)
            .iter()
            .map(|&x| fake_quant_value(x, inv_scale, qmax).0)
            .collect();
        let op = Op::FakeQuant { a, inv_scale, qmax };
        Ok(self.push(self.shape(a).to_vec(), value, op, NodeTag::Quantized))
    }

    /// `-mean_r logprobs[r, targets[r]]`
    pub fn cross_entropy_from_logprobs(&mut self, logprobs: Var, targets: &[usize]) -> Result<Var> {
        let (m, _) = self.dims(logprobs);
        if targets.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_from_logprobs",
                lhs: self.shape(logprobs).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let entries: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
        let picked = self.pick(logprobs, &entries)?;
        let mean = self.mean(picked);
        Ok(self.scale(mean, -T::ONE))
    }

    // ---- audit ----------------------------------------------------------

    /// Fake-quantization nodes whose (view-resolved) input is a layer-norm
    /// output, a softmax output, or an embedding table/lookup.
    pub fn quantization_violations(&self) -> Vec<AuditViolation> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::FakeQuant { a, .. } = node.op {
                let tag = self.resolved_tag(a);
                if matches!(tag, NodeTag::Normalized | NodeTag::Softmax | NodeTag::Embedding) {
                    out.push(AuditViolation {
                        node: i,
                        input_tag: tag,
                    });
                }
            }
        }
        out
    }

    fn resolved_tag(&self, v: Var) -> NodeTag {
        let node = &self.nodes[v.0];
        if node.tag != NodeTag::Plain || !node.op.is_view() {
            return node.tag;
        }
        // a view over mixed inputs: any exempt input counts
        node.op
            .parents()
            .into_iter()
            .map(|p| self.resolved_tag(p))
            .find(|t| matches!(t, NodeTag::Normalized | NodeTag::Softmax | NodeTag::Embedding))
            .unwrap_or(NodeTag::Plain)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients are readable through
    /// [`Tape::grad`]; nodes the loss does not depend on keep `None`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.as_slice();
        // Buffer for a parent's gradient, or None when it needs none.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; nodes[v.0].value.len()]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(&nodes[a.0].shape);
                let (_, n) = dims(&nodes[b.0].shape);
                if let Some(da) = slot!(*a) {
                    kernels::matmul_nt_acc(g, val(*b), da, m, n, k);
                }
                if let Some(db) = slot!(*b) {
                    kernels::matmul_tn_acc(val(*a), g, db, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims(&nodes[a.0].shape);
                let (n, _) = dims(&nodes[b.0].shape);
                if let Some(da) = slot!(*a) {
                    kernels::matmul_acc(g, val(*b), da, m, n, k);
                }
                if let Some(db) = slot!(*b) {
                    kernels::matmul_tn_acc(g, val(*a), db, m, n, k);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = slot!(*b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = slot!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = slot!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = slot!(*a) {
                    let bv = val(*b);
                    for k in 0..g.len() {
                        da[k] += g[k] * bv[k];
                    }
                }
                if let Some(db) = slot!(*b) {
                    let av = val(*a);
                    for k in 0..g.len() {
                        db[k] += g[k] * av[k];
                    }
                }
            }
            Op::AddRow(a, row) => {
                let (m, n) = dims(&node.shape);
                if let Some(da) = slot!(*a) {
                    add_into(da, g);
                }
                if let Some(dr) = slot!(*row) {
                    for r in 0..m {
                        for c in 0..n {
                            dr[c] += g[r * n + c];
                        }
                    }
                }
            }
            Op::AddCol(a, col) => {
                let (m, n) = dims(&node.shape);
                if let Some(da) = slot!(*a) {
                    add_into(da, g);
                }
                if let Some(dc) = slot!(*col) {
                    for r in 0..m {
                        let mut s = T::ZERO;
                        for &x in &g[r * n..(r + 1) * n] {
                            s += x;
                        }
                        dc[r] += s;
                    }
                }
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s)[0];
                if let Some(da) = slot!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * sv);
                }
                if let Some(ds) = slot!(*s) {
                    let av = val(*a);
                    let mut acc = T::ZERO;
                    for k in 0..g.len() {
                        acc += g[k] * av[k];
                    }
                    ds[0] += acc;
                }
            }
            Op::Scale(a, f) => {
                if let Some(da) = slot!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *f);
                }
            }
            Op::AddScalar(a) => {
                if let Some(da) = slot!(*a) {
                    add_into(da, g);
                }
            }
            Op::Relu(a) => {
                if let Some(da) = slot!(*a) {
                    let av = val(*a);
                    for k in 0..g.len() {
                        if av[k] > T::ZERO {
                            da[k] += g[k];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(da) = slot!(*a) {
                    let av = val(*a);
                    for k in 0..g.len() {
                        da[k] += g[k] * gelu_grad(av[k]);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(da) = slot!(*a) {
                    for k in 0..g.len() {
                        da[k] += g[k] * node.value[k];
                    }
                }
            }
            Op::Log(a) => {
                if let Some(da) = slot!(*a) {
                    let av = val(*a);
                    for k in 0..g.len() {
                        da[k] += g[k] / av[k];
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(da) = slot!(*a) {
                    for k in 0..g.len() {
                        let y = node.value[k];
                        da[k] += g[k] * y * (T::ONE - y);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(dt) = slot!(*table) {
                    let d = dims(&node.shape).1;
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let pn = dims(&nodes[p.0].shape).1;
                    if let Some(dp) = slot!(p) {
                        for r in 0..m {
                            add_into(
                                &mut dp[r * pn..(r + 1) * pn],
                                &g[r * total + offset..r * total + offset + pn],
                            );
                        }
                    }
                    offset += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(dp) = slot!(p) {
                        add_into(dp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { a, start } => {
                if let Some(da) = slot!(*a) {
                    let (m, len) = dims(&node.shape);
                    let n = dims(&nodes[a.0].shape).1;
                    for r in 0..m {
                        add_into(
                            &mut da[r * n + start..r * n + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if let Some(da) = slot!(*a) {
                    let n = dims(&node.shape).1;
                    add_into(&mut da[start * n..start * n + g.len()], g);
                }
            }
            Op::Transpose(a) => {
                if let Some(da) = slot!(*a) {
                    let (m, n) = dims(&node.shape);
                    let gt = kernels::transpose(g, m, n);
                    add_into(da, &gt);
                }
            }
            Op::Softmax(a) => {
                if let Some(da) = slot!(*a) {
                    let (m, n) = dims(&node.shape);
                    let y = &node.value;
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let s = kernels::dot(yr, gr);
                        for c in 0..n {
                            da[r * n + c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(da) = slot!(*a) {
                    let (m, n) = dims(&node.shape);
                    let y = &node.value;
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let mut s = T::ZERO;
                        for &x in gr {
                            s += x;
                        }
                        for c in 0..n {
                            da[r * n + c] += gr[c] - y[r * n + c].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, d) = dims(&node.shape);
                let gv = val(*gain);
                if let Some(dx) = slot!(*x) {
                    let inv_d = T::ONE / T::from_f64(d as f64);
                    let mut dxh = vec![T::ZERO; d];
                    for r in 0..m {
                        let mut s1 = T::ZERO;
                        let mut s2 = T::ZERO;
                        for c in 0..d {
                            let v = g[r * d + c] * gv[c];
                            dxh[c] = v;
                            s1 += v;
                            s2 += v * xhat[r * d + c];
                        }
                        let (m1, m2) = (s1 * inv_d, s2 * inv_d);
                        for c in 0..d {
                            dx[r * d + c] += rstd[r] * (dxh[c] - m1 - xhat[r * d + c] * m2);
                        }
                    }
                }
                if let Some(dg) = slot!(*gain) {
                    for r in 0..m {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(db) = slot!(*bias) {
                    for r in 0..m {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = slot!(*a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Pick { a, idx } => {
                if let Some(da) = slot!(*a) {
                    for (k, &i) in idx.iter().enumerate() {
                        da[i] += g[k];
                    }
                }
            }
            Op::BandGather { a, mem } => {
                if let Some(da) = slot!(*a) {
                    let (n, keys) = dims(&node.shape);
                    let w = dims(&nodes[a.0].shape).1;
                    for r in 0..n {
                        let q = mem + r;
                        for j in 0..keys {
                            if j <= q && q - j < w {
                                da[r * w + (q - j)] += g[r * keys + j];
                            }
                        }
                    }
                }
            }
            Op::FakeQuant { a, inv_scale, qmax } => {
                if let Some(da) = slot!(*a) {
                    let av = val(*a);
                    for k in 0..g.len() {
                        if fake_quant_value(av[k], *inv_scale, *qmax).1 {
                            da[k] += g[k];
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(da) = slot!(*a) {
                    for k in 0..g.len() {
                        da[k] += g[k] * mask[k];
                    }
                }
            }
        }
    }
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().product::<usize>() != len {
        return Err(TensorError::Invalid {
            op,
            msg: format!("shape {shape:?} does not hold {len} values"),
        });
    }
    Ok(())
}

fn zip_map<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)


fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + T::from_f64(3.0) * k * x * x)
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}
