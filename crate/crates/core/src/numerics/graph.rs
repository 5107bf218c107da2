use std::collections::{BTreeMap, HashMap};

use super::{DiffArray, NumericsError};

/// Identity of a node within one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Variance floor used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Recorded primitive. Inputs always precede the node that consumes them.
#[derive(Clone, Debug)]
pub enum Op {
    Input { name: String },
    Constant,
    /// `a · b`, or `a · bᵀ` when `trans_b` is set.
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm { a: NodeId, eps: f64 },
    Sum(NodeId),
    Mean(NodeId),
    /// Sum along `axis`, keeping it with extent 1.
    SumAxis { a: NodeId, axis: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    /// Selects rows (first axis) by index; indices may repeat.
    Gather { a: NodeId, rows: Vec<usize> },
    Broadcast { a: NodeId, shape: Vec<usize> },
    Transpose(NodeId),
    Reshape { a: NodeId, shape: Vec<usize> },
    SliceCols { a: NodeId, start: usize, end: usize },
    /// Overwrites the listed rows with a constant row vector.
    ReplaceRows { a: NodeId, rows: Vec<usize>, row: Vec<f64> },
    Detach(NodeId),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Minimum(..) => "minimum",
            Op::Maximum(..) => "maximum",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Abs(_) => "abs",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::Broadcast { .. } => "broadcast",
            Op::Transpose(_) => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::Detach(_) => "detach",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Constant => Vec::new(),
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Minimum(a, b)
            | Op::Maximum(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Transpose(a)
            | Op::Detach(a) => vec![*a],
            Op::LayerNorm { a, .. }
            | Op::SumAxis { a, .. }
            | Op::Gather { a, .. }
            | Op::Broadcast { a, .. }
            | Op::Reshape { a, .. }
            | Op::SliceCols { a, .. }
            | Op::ReplaceRows { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: DiffArray,
    requires_grad: bool,
}

/// Reverse-mode computation graph.
///
/// Nodes are evaluated eagerly as they are recorded, so every builder method
/// returns a node whose value can be read immediately. The recorded tape can
/// be replayed with new input bindings through [`Graph::evaluate`].
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

fn mismatch(node: usize, op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { node, op, detail }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c (+)= op(a) · op(b)` for row-major matrices, `op` optionally transposing.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // op(a) is m×k; stored as m×k (row stride k) or k×m transposed.
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slices are sized for the strides computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// For every flat index of `target`, the flat index into `source` it reads.
fn broadcast_index_map(source: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if source.len() > target.len() {
        return None;
    }
    let offset = target.len() - source.len();
    let mut src_strides = vec![0usize; target.len()];
    let mut stride = 1;
    for i in (0..source.len()).rev() {
        let t = target[i + offset];
        let s = source[i];
        if s != t && s != 1 {
            return None;
        }
        src_strides[i + offset] = if s == 1 { 0 } else { stride };
        stride *= s;
    }
    let total: usize = target.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; target.len()];
    for _ in 0..total {
        let mut src = 0;
        for (d, &i) in idx.iter().enumerate() {
            src += i * src_strides[d];
        }
        map.push(src);
        for d in (0..target.len()).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(map)
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

    pub fn value(&self, id: NodeId) -> &DiffArray {
        &self.nodes[id.0].value
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.values()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient populated by the last [`Graph::backward`] call.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn input_grad(&self, name: &str) -> Option<&[f64]> {
        self.input_id(name).and_then(|id| self.grad(id))
    }

    /// Binds a named leaf; binding the same name twice returns the first node.
    pub fn input(&mut self, name: &str, value: DiffArray, requires_grad: bool) -> NodeId {
        if let Some(id) = self.inputs.get(name) {
            return *id;
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Input {
                name: name.to_string(),
            },
            value,
            requires_grad,
        });
        self.inputs.insert(name.to_string(), id);
        id
    }

    /// Like [`Graph::input`] but clones from a borrowed array.
    pub fn param(&mut self, name: &str, value: &DiffArray, requires_grad: bool) -> NodeId {
        if let Some(id) = self.inputs.get(name) {
            return *id;
        }
        let mut v = value.clone();
        v.clear_grad();
        self.input(name, v, requires_grad)
    }

    pub fn constant(&mut self, value: DiffArray) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        id
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(DiffArray::scalar(v))
    }

    /// Names a node so [`Graph::evaluate`] reports it.
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    fn push(&mut self, op: Op) -> Result<NodeId, NumericsError> {
        let index = self.nodes.len();
        let value = self.compute(&op, index)?;
        let requires_grad = match &op {
            Op::Detach(_) | Op::Constant => false,
            _ => op.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(index))
    }

    fn check_ids(&self, op: &Op, index: usize) -> Result<(), NumericsError> {
        for i in op.inputs() {
            if i.0 >= index {
                return Err(NumericsError::UnknownNode(i.0));
            }
        }
        Ok(())
    }

    fn compute(&self, op: &Op, index: usize) -> Result<DiffArray, NumericsError> {
        self.check_ids(op, index)?;
        let val = |id: &NodeId| &self.nodes[id.0].value;
        let kind = op.kind();
        let unary = |a: &NodeId, f: &dyn Fn(f64) -> f64| {
            let x = val(a);
            DiffArray::new(x.shape().to_vec(), x.values().iter().map(|&v| f(v)).collect())
        };
        let binary = |a: &NodeId, b: &NodeId, f: &dyn Fn(f64, f64) -> f64| {
            let (x, y) = (val(a), val(b));
            if x.shape() != y.shape() {
                return Err(mismatch(
                    index,
                    kind,
                    format!("{:?} vs {:?}", x.shape(), y.shape()),
                ));
            }
            DiffArray::new(
                x.shape().to_vec(),
                x.values()
                    .iter()
                    .zip(y.values())
                    .map(|(&p, &q)| f(p, q))
                    .collect(),
            )
        };
        match op {
            Op::Input { .. } | Op::Constant => unreachable!("leaves are not recomputed"),
            Op::MatMul { a, b, trans_b } => {
                let (x, y) = (val(a), val(b));
                if x.shape().len() != 2 || y.shape().len() != 2 {
                    return Err(mismatch(
                        index,
                        kind,
                        format!("rank-2 operands required, got {:?} and {:?}", x.shape(), y.shape()),
                    ));
                }
                let (m, k) = (x.shape()[0], x.shape()[1]);
                let (kb, n) = if *trans_b {
                    (y.shape()[1], y.shape()[0])
                } else {
                    (y.shape()[0], y.shape()[1])
                };
                if k != kb {
                    return Err(mismatch(
                        index,
                        kind,
                        format!("inner extents differ: {:?} · {:?} (trans_b={trans_b})", x.shape(), y.shape()),
                    ));
                }
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, x.values(), false, y.values(), *trans_b, &mut out, false);
                DiffArray::new(vec![m, n], out)
            }
            Op::Add(a, b) => binary(a, b, &|p, q| p + q),
            Op::Sub(a, b) => binary(a, b, &|p, q| p - q),
            Op::Mul(a, b) => binary(a, b, &|p, q| p * q),
            Op::Div(a, b) => binary(a, b, &|p, q| p / q),
            Op::Minimum(a, b) => binary(a, b, &|p, q| if p <= q { p } else { q }),
            Op::Maximum(a, b) => binary(a, b, &|p, q| if p >= q { p } else { q }),
            Op::Neg(a) => unary(a, &|v| -v),
            Op::Scale(a, s) => unary(a, &|v| v * s),
            Op::Offset(a, s) => unary(a, &|v| v + s),
            Op::Exp(a) => unary(a, &f64::exp),
            Op::Log(a) => unary(a, &f64::ln),
            Op::Sqrt(a) => unary(a, &f64::sqrt),
            Op::Abs(a) => unary(a, &f64::abs),
            Op::Relu(a) => unary(a, &|v| v.max(0.0)),
            Op::Sigmoid(a) => unary(a, &sigmoid),
            Op::Gelu(a) => unary(a, &gelu),
            Op::Softmax(a) | Op::LogSoftmax(a) => {
                let x = val(a);
                let c = x.cols();
                if c == 0 {
                    return Err(NumericsError::EmptySoftmax { node: index });
                }
                let log = matches!(op, Op::LogSoftmax(_));
                let mut out = Vec::with_capacity(x.len());
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                    if log {
                        let lz = z.ln();
                        out.extend(row.iter().map(|&v| v - m - lz));
                    } else {
                        out.extend(row.iter().map(|&v| (v - m).exp() / z));
                    }
                }
                DiffArray::new(x.shape().to_vec(), out)
            }
            Op::LayerNorm { a, eps } => {
                let x = val(a);
                let c = x.cols();
                if c == 0 {
                    return Err(mismatch(index, kind, "empty normalization axis".into()));
                }
                let mut out = Vec::with_capacity(x.len());
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    out.extend(row.iter().map(|v| (v - mean) * inv));
                }
                DiffArray::new(x.shape().to_vec(), out)
            }
            Op::Sum(a) => Ok(DiffArray::scalar(val(a).values().iter().sum())),
            Op::Mean(a) => {
                let x = val(a);
                if x.is_empty() {
                    return Err(mismatch(index, kind, "mean of an empty array".into()));
                }
                Ok(DiffArray::scalar(x.values().iter().sum::<f64>() / x.len() as f64))
            }
            Op::SumAxis { a, axis } => {
                let x = val(a);
                if *axis >= x.shape().len() {
                    return Err(mismatch(index, kind, format!("axis {axis} for shape {:?}", x.shape())));
                }
                let outer: usize = x.shape()[..*axis].iter().product();
                let mid = x.shape()[*axis];
                let inner: usize = x.shape()[axis + 1..].iter().product();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += x.values()[base + i];
                        }
                    }
                }
                let mut shape = x.shape().to_vec();
                shape[*axis] = 1;
                DiffArray::new(shape, out)
            }
            Op::Concat { parts, axis } => {
                let first = parts
                    .first()
                    .ok_or_else(|| mismatch(index, kind, "no operands".into()))?;
                let s0 = val(first).shape().to_vec();
                if *axis >= s0.len() {
                    return Err(mismatch(index, kind, format!("axis {axis} for shape {s0:?}")));
                }
                let mut total = 0;
                for p in parts {
                    let s = val(p).shape();
                    if s.len() != s0.len()
                        || s.iter()
                            .zip(&s0)
                            .enumerate()
                            .any(|(d, (x, y))| d != *axis && x != y)
                    {
                        return Err(mismatch(index, kind, format!("{s:?} vs {s0:?} along axis {axis}")));
                    }
                    total += s[*axis];
                }
                let outer: usize = s0[..*axis].iter().product();
                let inner: usize = s0[axis + 1..].iter().product();
                let mut out = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for p in parts {
                        let x = val(p);
                        let chunk = x.shape()[*axis] * inner;
                        out.extend_from_slice(&x.values()[o * chunk..(o + 1) * chunk]);
                    }
                }
                let mut shape = s0;
                shape[*axis] = total;
                DiffArray::new(shape, out)
            }
            Op::Gather { a, rows } => {
                let x = val(a);
                if x.shape().is_empty() {
                    return Err(mismatch(index, kind, "cannot gather from a scalar".into()));
                }
                let n = x.shape()[0];
                let inner: usize = x.shape()[1..].iter().product();
                let mut out = Vec::with_capacity(rows.len() * inner);
                for &r in rows {
                    if r >= n {
                        return Err(mismatch(index, kind, format!("row {r} out of {n}")));
                    }
                    out.extend_from_slice(&x.values()[r * inner..(r + 1) * inner]);
                }
                let mut shape = x.shape().to_vec();
                shape[0] = rows.len();
                DiffArray::new(shape, out)
            }
            Op::Broadcast { a, shape } => {
                let x = val(a);
                let map = broadcast_index_map(x.shape(), shape).ok_or_else(|| {
                    mismatch(index, kind, format!("{:?} does not broadcast to {shape:?}", x.shape()))
                })?;
                DiffArray::new(shape.clone(), map.iter().map(|&i| x.values()[i]).collect())
            }
            Op::Transpose(a) => {
                let x = val(a);
                if x.shape().len() != 2 {
                    return Err(mismatch(index, kind, format!("rank-2 required, got {:?}", x.shape())));
                }
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = x.values()[i * c + j];
                    }
                }
                DiffArray::new(vec![c, r], out)
            }
            Op::Reshape { a, shape } => {
                let x = val(a);
                x.clone().reshaped(shape.clone()).map_err(|_| {
                    mismatch(index, kind, format!("{:?} cannot become {shape:?}", x.shape()))
                })
            }
            Op::SliceCols { a, start, end } => {
                let x = val(a);
                let c = x.cols();
                if x.shape().len() != 2 || start > end || *end > c {
                    return Err(mismatch(index, kind, format!("cols {start}..{end} of {:?}", x.shape())));
                }
                let w = end - start;
                let mut out = Vec::with_capacity(x.rows() * w);
                for r in 0..x.rows() {
                    out.extend_from_slice(&x.row(r)[*start..*end]);
                }
                DiffArray::new(vec![x.rows(), w], out)
            }
            Op::ReplaceRows { a, rows, row } => {
                let x = val(a);
                if x.shape().len() != 2 || row.len() != x.cols() {
                    return Err(mismatch(
                        index,
                        kind,
                        format!("row of length {} into {:?}", row.len(), x.shape()),
                    ));
                }
                let mut out = x.values().to_vec();
                let c = x.cols();
                for &r in rows {
                    if r >= x.rows() {
                        return Err(mismatch(index, kind, format!("row {r} out of {}", x.rows())));
                    }
                    out[r * c..(r + 1) * c].copy_from_slice(row);
                }
                DiffArray::new(x.shape().to_vec(), out)
            }
            Op::Detach(a) => {
                let mut v = val(a).clone();
                v.clear_grad();
                Ok(v)
            }
        }
    }

    // ---- builders ---------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::MatMul { a, b, trans_b: false })
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::MatMul { a, b, trans_b: true })
    }

    /// Brings `a` and `b` to a common shape, inserting broadcast nodes.
    fn align(&mut self, a: NodeId, b: NodeId, kind: &'static str) -> Result<(NodeId, NodeId), NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return Ok((a, b));
        }
        let target = broadcast_shape(&sa, &sb)
            .ok_or_else(|| mismatch(self.nodes.len(), kind, format!("{sa:?} vs {sb:?}")))?;
        let a = if sa == target { a } else { self.broadcast(a, target.clone())? };
        let b = if sb == target { b } else { self.broadcast(b, target)? };
        Ok((a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (a, b) = self.align(a, b, "add")?;
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (a, b) = self.align(a, b, "sub")?;
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (a, b) = self.align(a, b, "mul")?;
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (a, b) = self.align(a, b, "div")?;
        self.push(Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (a, b) = self.align(a, b, "minimum")?;
        self.push(Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (a, b) = self.align(a, b, "maximum")?;
        self.push(Op::Maximum(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, NumericsError> {
        self.push(Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: NodeId, s: f64) -> Result<NodeId, NumericsError> {
        self.push(Op::Offset(a, s))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Log(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Abs(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Sigmoid(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Gelu(a))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::LogSoftmax(a))
    }

    /// Normalization along the last axis without affine parameters.
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::LayerNorm {
            a,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Mean(a))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        self.push(Op::SumAxis { a, axis })
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, NumericsError> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.push(Op::Concat {
            parts: parts.to_vec(),
            axis,
        })
    }

    pub fn gather(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId, NumericsError> {
        self.push(Op::Gather {
            a,
            rows: rows.to_vec(),
        })
    }

    pub fn broadcast(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, NumericsError> {
        self.push(Op::Broadcast { a, shape })
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, NumericsError> {
        self.push(Op::Reshape { a, shape })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, NumericsError> {
        self.push(Op::SliceCols { a, start, end })
    }

    pub fn replace_rows(&mut self, a: NodeId, rows: &[usize], row: &[f64]) -> Result<NodeId, NumericsError> {
        self.push(Op::ReplaceRows {
            a,
            rows: rows.to_vec(),
            row: row.to_vec(),
        })
    }

    /// Same value, no gradient path.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Detach(a))
    }

    // ---- composite helpers ------------------------------------------------

    /// Euclidean norm over all entries, `sqrt(Σx² + floor)`.
    pub fn l2_norm(&mut self, a: NodeId, floor: f64) -> Result<NodeId, NumericsError> {
        let sq = self.mul(a, a)?;
        let s = self.sum(sq)?;
        let s = self.offset(s, floor)?;
        self.sqrt(s)
    }

    /// Row-wise unit normalization of a matrix.
    pub fn normalize_rows(&mut self, a: NodeId, floor: f64) -> Result<NodeId, NumericsError> {
        let sq = self.mul(a, a)?;
        let s = self.sum_axis(sq, 1)?;
        let s = self.offset(s, floor)?;
        let n = self.sqrt(s)?;
        self.div(a, n)
    }

    // ---- replay -----------------------------------------------------------

    /// Recomputes every node with new values for the named inputs and
    /// returns the marked outputs. Unnamed inputs keep their current values.
    pub fn evaluate(
        &mut self,
        bindings: &[(&str, DiffArray)],
    ) -> Result<BTreeMap<String, DiffArray>, NumericsError> {
        for (name, value) in bindings {
            let id = self
                .input_id(name)
                .ok_or_else(|| NumericsError::UnknownInput(name.to_string()))?;
            self.nodes[id.0].value = value.clone();
        }
        for index in 0..self.nodes.len() {
            let op = self.nodes[index].op.clone();
            if matches!(op, Op::Input { .. } | Op::Constant) {
                continue;
            }
            let value = self.compute(&op, index)?;
            self.nodes[index].value = value;
        }
        Ok(self
            .outputs
            .iter()
            .map(|(k, id)| (k.clone(), self.nodes[id.0].value.clone()))
            .collect())
    }

    // ---- reverse pass -----------------------------------------------------

    /// Populates gradient buffers of every node that requires gradients,
    /// seeding the scalar `output` with 1. Nodes that do not require
    /// gradients keep no buffer.
    pub fn backward(&mut self, output: NodeId) -> Result<(), NumericsError> {
        let shape = self.shape(output).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(NumericsError::NonScalarOutput { shape });
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for index in (0..=output.0).rev() {
            let Some(dy) = grads[index].take() else {
                continue;
            };
            if !self.nodes[index].requires_grad {
                continue;
            }
            self.backprop_node(index, &dy, &mut grads);
            self.nodes[index].value.set_grad(dy)?;
        }
        Ok(())
    }

    fn backprop_node(&self, index: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[index];
        let y = node.value.values();
        let val = |id: &NodeId| &self.nodes[id.0].value;
        let needs = |id: &NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: &NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Input { .. } | Op::Constant | Op::Detach(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (x, w) = (val(a), val(b));
                let (m, k) = (x.shape()[0], x.shape()[1]);
                let n = node.value.shape()[1];
                acc(a, &mut |g| {
                    // dA = dY · op(B)ᵀ
                    gemm(m, n, k, dy, false, w.values(), !*trans_b, g, true);
                });
                acc(b, &mut |g| {
                    if *trans_b {
                        // B is n×k: dB = dYᵀ · A
                        gemm(n, m, k, dy, true, x.values(), false, g, true);
                    } else {
                        // B is k×n: dB = Aᵀ · dY
                        gemm(k, m, n, x.values(), true, dy, false, g, true);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(a).values(), val(b).values());
                acc(a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * xb[i];
                    }
                });
                acc(b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * xa[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(a).values(), val(b).values());
                acc(a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / xb[i];
                    }
                });
                acc(b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] -= dy[i] * xa[i] / (xb[i] * xb[i]);
                    }
                });
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (xa, xb) = (val(a).values(), val(b).values());
                let pick_a = |i: usize| if is_min { xa[i] <= xb[i] } else { xa[i] >= xb[i] };
                acc(a, &mut |g| {
                    for i in 0..g.len() {
                        if pick_a(i) {
                            g[i] += dy[i];
                        }
                    }
                });
                acc(b, &mut |g| {
                    for i in 0..g.len() {
                        if !pick_a(i) {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::Neg(a) => acc(a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d)),
            Op::Scale(a, s) => acc(a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * s)),
            Op::Offset(a, _) => acc(a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d)),
            Op::Exp(a) => acc(a, &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let x = val(a).values();
                acc(a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / x[i];
                    }
                })
            }
            Op::Sqrt(a) => acc(a, &mut |g| {
                for i in 0..g.len() {
                    if y[i] > 0.0 {
                        g[i] += dy[i] * 0.5 / y[i];
                    }
                }
            }),
            Op::Abs(a) => {
                let x = val(a).values();
                acc(a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * if x[i] > 0.0 { 1.0 } else if x[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                })
            }
            Op::Relu(a) => {
                let x = val(a).values();
                acc(a, &mut |g| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += dy[i];
                        }
                    }
                })
            }
            Op::Sigmoid(a) => acc(a, &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Gelu(a) => {
                let x = val(a).values();
                acc(a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * gelu_grad(x[i]);
                    }
                })
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                acc(a, &mut |g| {
                    for r in 0..y.len() / c {
                        let ys = &y[r * c..(r + 1) * c];
                        let ds = &dy[r * c..(r + 1) * c];
                        let dot: f64 = ys.iter().zip(ds).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            g[r * c + j] += ys[j] * (ds[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                acc(a, &mut |g| {
                    for r in 0..y.len() / c {
                        let ys = &y[r * c..(r + 1) * c];
                        let ds = &dy[r * c..(r + 1) * c];
                        let total: f64 = ds.iter().sum();
                        for j in 0..c {
                            g[r * c + j] += ds[j] - ys[j].exp() * total;
                        }
                    }
                })
            }
            Op::LayerNorm { a, eps } => {
                let x = val(a);
                let c = x.cols();
                let xv = x.values();
                acc(a, &mut |g| {
                    for r in 0..xv.len() / c {
                        let row = &xv[r * c..(r + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let ys = &y[r * c..(r + 1) * c];
                        let ds = &dy[r * c..(r + 1) * c];
                        let mean_d = ds.iter().sum::<f64>() / c as f64;
                        let mean_dy: f64 = ds.iter().zip(ys).map(|(d, v)| d * v).sum::<f64>() / c as f64;
                        for j in 0..c {
                            g[r * c + j] += inv * (ds[j] - mean_d - ys[j] * mean_dy);
                        }
                    }
                })
            }
            Op::Sum(a) => acc(a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::Mean(a) => {
                let n = val(a).len() as f64;
                acc(a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0] / n))
            }
            Op::SumAxis { a, axis } => {
                let s = val(a).shape();
                let outer: usize = s[..*axis].iter().product();
                let mid = s[*axis];
                let inner: usize = s[axis + 1..].iter().product();
                acc(a, &mut |g| {
                    for o in 0..outer {
                        for m in 0..mid {
                            for i in 0..inner {
                                g[(o * mid + m) * inner + i] += dy[o * inner + i];
                            }
                        }
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let s0 = val(&parts[0]).shape();
                let outer: usize = s0[..*axis].iter().product();
                let inner: usize = s0[axis + 1..].iter().product();
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for p in parts {
                    let width = val(p).shape()[*axis];
                    let chunk = width * inner;
                    if needs(p) {
                        acc(p, &mut |g| {
                            for o in 0..outer {
                                let src = o * total * inner + offset * inner;
                                for i in 0..chunk {
                                    g[o * chunk + i] += dy[src + i];
                                }
                            }
                        });
                    }
                    offset += width;
                }
            }
            Op::Gather { a, rows } => {
                let inner: usize = val(a).shape()[1..].iter().product();
                acc(a, &mut |g| {
                    for (k, &r) in rows.iter().enumerate() {
                        for i in 0..inner {
                            g[r * inner + i] += dy[k * inner + i];
                        }
                    }
                })
            }
            Op::Broadcast { a, shape } => {
                let map = broadcast_index_map(val(a).shape(), shape).expect("validated in forward");
                acc(a, &mut |g| {
                    for (k, &src) in map.iter().enumerate() {
                        g[src] += dy[k];
                    }
                })
            }
            Op::Transpose(a) => {
                let s = val(a).shape();
                let (r, c) = (s[0], s[1]);
                acc(a, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[j * r + i];
                        }
                    }
                })
            }
            Op::Reshape { a, .. } => acc(a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d)),
            Op::SliceCols { a, start, end } => {
                let c = val(a).cols();
                let w = end - start;
                acc(a, &mut |g| {
                    for r in 0..dy.len() / w.max(1) {
                        for j in 0..w {
                            g[r * c + start + j] += dy[r * w + j];
                        }
                    }
                })
            }
            Op::ReplaceRows { a, rows, .. } => {
                let c = val(a).cols();
                acc(a, &mut |g| {
                    let mut keep = vec![true; dy.len() / c.max(1)];
                    rows.iter().for_each(|&r| keep[r] = false);
                    for (r, k) in keep.iter().enumerate() {
                        if *k {
                            for j in 0..c {
                                g[r * c + j] += dy[r * c + j];
                            }
                        }
                    }
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, v: &[f64]) -> DiffArray {
        DiffArray::matrix(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x", DiffArray::vector(vec![0.0; 4]), false);
        let s = g.softmax(x).unwrap();
        assert_eq!(g.values(s), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.input("x", DiffArray::vector(vec![5.0; 3]), false);
        let y = g.layer_norm(x).unwrap();
        assert_eq!(g.values(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_hand_multiplication() {
        let mut g = Graph::new();
        let a = g.input("a", mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let b = g.input("b", mat(3, 1, &[7.0, 8.0, 9.0]), false);
        let c = g.matmul(a, b).unwrap();
        // 1·7+2·8+3·9 = 50, 4·7+5·8+6·9 = 122
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.values(c), &[50.0, 122.0]);
    }

    #[test]
    fn square_has_derivative_two_x() {
        let mut g = Graph::new();
        let x = g.input("x", DiffArray::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", DiffArray::vector(vec![0.3, -1.2, 2.0, 0.7]), true);
        let s = g.softmax(x).unwrap();
        let t = g.sum(s).unwrap();
        g.backward(t).unwrap();
        for v in g.grad(x).unwrap() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.input("a", mat(2, 3, &[0.0; 6]), false);
        let b = g.input("b", mat(2, 3, &[0.0; 6]), false);
        match g.matmul(a, b) {
            Err(NumericsError::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_over_empty_axis_is_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", DiffArray::zeros(vec![2, 0]), false);
        assert!(matches!(g.softmax(x), Err(NumericsError::EmptySoftmax { .. })));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input("x", DiffArray::vector(vec![1.0, 2.0]), true);
        let y = g.exp(x).unwrap();
        assert!(matches!(g.backward(y), Err(NumericsError::NonScalarOutput { .. })));
    }

    #[test]
    fn inputs_without_grad_are_untouched() {
        let mut g = Graph::new();
        let x = g.input("x", DiffArray::scalar(2.0), true);
        let c = g.input("c", DiffArray::scalar(5.0), false);
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", DiffArray::scalar(2.0), true);
        let d = g.detach(x).unwrap();
        let y = g.mul(x, d).unwrap();
        g.backward(y).unwrap();
        // d(x·stop(x))/dx = stop(x) = 2
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn broadcast_add_row_vector() {
        let mut g = Graph::new();
        let a = g.input("a", mat(2, 2, &[1.0, 2.0, 3.0, 4.0]), true);
        let b = g.input("b", DiffArray::vector(vec![10.0, 20.0]), true);
        let c = g.add(a, b).unwrap();
        assert_eq!(g.values(c), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn replay_with_new_inputs() {
        let mut g = Graph::new();
        let x = g.input("x", DiffArray::vector(vec![1.0, 2.0]), true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.mark_output("s", s);
        let out = g.evaluate(&[("x", DiffArray::vector(vec![3.0, 4.0]))]).unwrap();
        assert_eq!(out["s"].item(), 25.0);
        let again = g.evaluate(&[("x", DiffArray::vector(vec![3.0, 4.0]))]).unwrap();
        assert_eq!(out["s"].item().to_bits(), again["s"].item().to_bits());
        assert!(matches!(
            g.evaluate(&[("nope", DiffArray::scalar(0.0))]),
            Err(NumericsError::UnknownInput(_))
        ));
    }

    #[test]
    fn replay_reports_shape_errors() {
        let mut g = Graph::new();
        let a = g.input("a", mat(2, 2, &[0.0; 4]), false);
        let b = g.input("b", mat(2, 1, &[0.0; 2]), false);
        let _ = g.matmul(a, b).unwrap();
        let r = g.evaluate(&[("b", mat(3, 1, &[0.0; 3]))]);
        assert!(matches!(r, Err(NumericsError::ShapeMismatch { node: 2, .. })));
    }

    #[test]
    fn replace_rows_blocks_gradient_on_replaced_rows() {
        let mut g = Graph::new();
        let a = g.input("a", mat(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let r = g.replace_rows(a, &[1], &[9.0, 9.0]).unwrap();
        assert_eq!(g.values(r), &[1.0, 2.0, 9.0, 9.0, 5.0, 6.0]);
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
