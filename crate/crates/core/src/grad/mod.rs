//! A minimal differentiable-computation core: a fixed set of tensor ops
//! assembled into an acyclic graph, with deterministic forward evaluation and
//! exact reverse-mode gradients.
//!
//! The op set is deliberately small and enumerable — matmul, broadcast add,
//! scaling by constants, exp/log, row softmax, (masked) log-sum-exp,
//! reductions, a few elementwise nonlinearities, row gather, and the Gaussian
//! reparameterization — which is everything the encoder, decoder and the
//! partial-likelihood loss need. Softmax and log-sum-exp subtract the row
//! maximum, so logits with magnitude up to a few hundred stay finite.
//!
//! Graphs are immutable once built; `forward`/`backward` take the parameter
//! bindings by reference and share no state, so concurrent evaluation with
//! distinct bindings is safe.

mod check;
mod tensor;

pub use check::{grad_check, max_relative_error, GradCheckReport};
pub use tensor::Tensor;

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensor { len: usize, shape: Vec<usize> },
    #[error("shape mismatch building {op} node: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("variable `{0}` is not bound")]
    UnboundVariable(String),
    #[error("binding for `{name}` has shape {got:?}, declared {want:?}")]
    BindingShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("gather index {index} out of bounds for {rows} rows")]
    GatherOutOfBounds { index: usize, rows: usize },
    #[error("logsumexp mask row {0} selects nothing")]
    EmptyMaskRow(usize),
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
pub enum Nonlinearity {
    Softplus,
    Square,
    Abs,
    Clamp { lo: f64, hi: f64 },
}

/// Constant multiplier for [`Graph::scale`]: a scalar, one value per element,
/// or one value per position along the last axis (column broadcast).
#[derive(Debug, Clone)]
pub enum ScaleFactor {
    Uniform(f64),
    PerElement(Tensor),
    PerLastDim(Tensor),
}

#[derive(Debug, Clone)]
enum Op {
    Var { name: String },
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale { input: NodeId, factor: ScaleFactor },
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    LogSumExp { input: NodeId, mask: Option<Tensor> },
    Sum(NodeId),
    Mean(NodeId),
    Nonlin { input: NodeId, kind: Nonlinearity },
    GatherRows { input: NodeId, indices: Vec<usize> },
    Reparameterize { mean: NodeId, logvar: NodeId, eps: Tensor },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Var { .. } => "var",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Scale { .. } => "scale",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Nonlin { .. } => "nonlin",
            Op::GatherRows { .. } => "gather-rows",
            Op::Reparameterize { .. } => "reparameterize",
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Computation graph over [`Tensor`] values. Nodes are appended in
/// topological order; the last node added is the output unless
/// [`Graph::set_output`] overrides it.
pub struct Graph {
    nodes: Vec<Node>,
    output: Option<NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            output: None,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Declares a named leaf bound at evaluation time (a parameter).
    pub fn var(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(
            Op::Var {
                name: name.to_string(),
            },
            shape.to_vec(),
        )
    }

    /// Embeds a tensor that does not require gradients.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Const(t), shape)
    }

    /// `[n,m] x [m,p] -> [n,p]`, or `[n,m] x [m] -> [n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        let shape = match (sa.as_slice(), sb.as_slice()) {
            ([n, m], [m2, p]) if m == m2 => vec![*n, *p],
            ([n, m], [m2]) if m == m2 => vec![*n],
            _ => {
                return Err(GradError::ShapeMismatch {
                    op: "matmul",
                    detail: format!("{sa:?} x {sb:?}"),
                })
            }
        };
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    /// Elementwise add; `b` may also be a last-axis vector (row broadcast) or
    /// a scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        let ok = sb == sa
            || sb.is_empty()
            || (sb.len() == 1 && sb[0] == sa.last().copied().unwrap_or(0));
        if !ok {
            return Err(GradError::ShapeMismatch {
                op: "add",
                detail: format!("{sa:?} + {sb:?}"),
            });
        }
        Ok(self.push(Op::Add(a, b), sa))
    }

    pub fn scale(&mut self, input: NodeId, factor: ScaleFactor) -> Result<NodeId, GradError> {
        let s = self.shape_of(input).to_vec();
        let ok = match &factor {
            ScaleFactor::Uniform(_) => true,
            ScaleFactor::PerElement(t) => t.shape() == s.as_slice(),
            ScaleFactor::PerLastDim(t) => {
                t.shape().len() == 1 && t.shape()[0] == s.last().copied().unwrap_or(0)
            }
        };
        if !ok {
            return Err(GradError::ShapeMismatch {
                op: "scale",
                detail: format!("input {s:?}, factor {factor:?}"),
            });
        }
        Ok(self.push(Op::Scale { input, factor }, s))
    }

    pub fn exp(&mut self, input: NodeId) -> NodeId {
        let s = self.shape_of(input).to_vec();
        self.push(Op::Exp(input), s)
    }

    pub fn log(&mut self, input: NodeId) -> NodeId {
        let s = self.shape_of(input).to_vec();
        self.push(Op::Log(input), s)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId, GradError> {
        let s = self.shape_of(input).to_vec();
        if s.is_empty() {
            return Err(GradError::ShapeMismatch {
                op: "softmax",
                detail: "scalar input".to_string(),
            });
        }
        Ok(self.push(Op::Softmax(input), s))
    }

    /// Row-wise log-sum-exp of a matrix: `[n,d] -> [n]`.
    pub fn logsumexp(&mut self, input: NodeId) -> Result<NodeId, GradError> {
        let s = self.shape_of(input).to_vec();
        if s.len() != 2 {
            return Err(GradError::ShapeMismatch {
                op: "logsumexp",
                detail: format!("expected matrix, got {s:?}"),
            });
        }
        Ok(self.push(
            Op::LogSumExp { input, mask: None },
            vec![s[0]],
        ))
    }

    /// Masked log-sum-exp of a vector `x` of length n against an `[n,n]` 0/1
    /// mask: `out_i = log sum_{j: mask[i,j]=1} exp(x_j)`. Every mask row must
    /// select at least one entry.
    pub fn logsumexp_masked(&mut self, input: NodeId, mask: Tensor) -> Result<NodeId, GradError> {
        let s = self.shape_of(input).to_vec();
        let n = match s.as_slice() {
            [n] => *n,
            [n, 1] => *n,
            _ => {
                return Err(GradError::ShapeMismatch {
                    op: "logsumexp-masked",
                    detail: format!("expected vector, got {s:?}"),
                })
            }
        };
        if mask.shape() != [n, n] {
            return Err(GradError::ShapeMismatch {
                op: "logsumexp-masked",
                detail: format!("mask {:?} for input of length {n}", mask.shape()),
            });
        }
        for i in 0..n {
            if (0..n).all(|j| mask.at(i, j) == 0.0) {
                return Err(GradError::EmptyMaskRow(i));
            }
        }
        Ok(self.push(
            Op::LogSumExp {
                input,
                mask: Some(mask),
            },
            vec![n],
        ))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Sum(input), vec![])
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Mean(input), vec![])
    }

    pub fn nonlin(&mut self, input: NodeId, kind: Nonlinearity) -> NodeId {
        let s = self.shape_of(input).to_vec();
        self.push(Op::Nonlin { input, kind }, s)
    }

    pub fn softplus(&mut self, input: NodeId) -> NodeId {
        self.nonlin(input, Nonlinearity::Softplus)
    }

    /// Selects rows of a matrix (or entries of a vector) by constant indices.
    /// The index list may be empty; reductions over the result are then zero.
    pub fn gather_rows(&mut self, input: NodeId, indices: Vec<usize>) -> Result<NodeId, GradError> {
        let s = self.shape_of(input).to_vec();
        let (rows, shape) = match s.as_slice() {
            [n, d] => (*n, vec![indices.len(), *d]),
            [n] => (*n, vec![indices.len()]),
            _ => {
                return Err(GradError::ShapeMismatch {
                    op: "gather-rows",
                    detail: format!("{s:?}"),
                })
            }
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(GradError::GatherOutOfBounds { index: bad, rows });
        }
        Ok(self.push(Op::GatherRows { input, indices }, shape))
    }

    /// `mean + exp(logvar / 2) * eps` with `eps` held constant, so gradients
    /// flow only through `mean` and `logvar`.
    pub fn reparameterize(
        &mut self,
        mean: NodeId,
        logvar: NodeId,
        eps: Tensor,
    ) -> Result<NodeId, GradError> {
        let s = self.shape_of(mean).to_vec();
        if self.shape_of(logvar) != s.as_slice() || eps.shape() != s.as_slice() {
            return Err(GradError::ShapeMismatch {
                op: "reparameterize",
                detail: format!(
                    "mean {s:?}, logvar {:?}, eps {:?}",
                    self.shape_of(logvar),
                    eps.shape()
                ),
            });
        }
        Ok(self.push(Op::Reparameterize { mean, logvar, eps }, s))
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> NodeId {
        self.output.unwrap_or(NodeId(self.nodes.len() - 1))
    }

    /// Names and declared shapes of all variable nodes.
    pub fn variables(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        for node in &self.nodes {
            if let Op::Var { name } = &node.op {
                out.insert(name.clone(), node.shape.clone());
            }
        }
        out
    }

    /// Evaluates the output node under the given bindings.
    pub fn forward(&self, bindings: &BTreeMap<String, Tensor>) -> Result<Tensor, GradError> {
        let values = self.eval_all(bindings)?;
        Ok(values[self.output().0].clone())
    }

    fn eval_all(&self, bindings: &BTreeMap<String, Tensor>) -> Result<Vec<Tensor>, GradError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Var { name } => {
                    let t = bindings
                        .get(name)
                        .ok_or_else(|| GradError::UnboundVariable(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(GradError::BindingShape {
                            name: name.clone(),
                            got: t.shape().to_vec(),
                            want: node.shape.clone(),
                        });
                    }
                    t.clone()
                }
                Op::Const(t) => t.clone(),
                Op::MatMul(a, b) => eval_matmul(&values[a.0], &values[b.0]),
                Op::Add(a, b) => eval_add(&values[a.0], &values[b.0]),
                Op::Scale { input, factor } => eval_scale(&values[input.0], factor),
                Op::Exp(a) => map(&values[a.0], f64::exp),
                Op::Log(a) => map(&values[a.0], f64::ln),
                Op::Softmax(a) => eval_softmax(&values[a.0]),
                Op::LogSumExp { input, mask } => eval_logsumexp(&values[input.0], mask.as_ref())?,
                Op::Sum(a) => Tensor::scalar(values[a.0].data().iter().sum()),
                Op::Mean(a) => {
                    let v = &values[a.0];
                    let len = v.len().max(1) as f64;
                    Tensor::scalar(v.data().iter().sum::<f64>() / len)
                }
                Op::Nonlin { input, kind } => eval_nonlin(&values[input.0], *kind),
                Op::GatherRows { input, indices } => eval_gather(&values[input.0], indices),
                Op::Reparameterize { mean, logvar, eps } => {
                    eval_reparam(&values[mean.0], &values[logvar.0], eps)
                }
            };
            if !value.all_finite() {
                return Err(GradError::NonFinite {
                    node: idx,
                    op: node.op.kind(),
                });
            }
            values.push(value);
        }
        Ok(values)
    }

    /// Reverse-mode gradients of the scalar output with respect to every
    /// variable. Variables unreachable from the output get zero gradients.
    pub fn backward(
        &self,
        bindings: &BTreeMap<String, Tensor>,
    ) -> Result<BTreeMap<String, Tensor>, GradError> {
        Ok(self.backward_with_probes(bindings, &[])?.0)
    }

    /// [`backward`](Self::backward) that additionally reports the forward
    /// values of the probe nodes from the same evaluation pass (cheap way to
    /// log loss components during training).
    pub fn backward_with_probes(
        &self,
        bindings: &BTreeMap<String, Tensor>,
        probes: &[NodeId],
    ) -> Result<(BTreeMap<String, Tensor>, Vec<Tensor>), GradError> {
        let out = self.output();
        if !self.nodes[out.0].shape.is_empty() {
            return Err(GradError::NonScalarOutput(self.nodes[out.0].shape.clone()));
        }
        let values = self.eval_all(bindings)?;
        let probed: Vec<Tensor> = probes.iter().map(|p| values[p.0].clone()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Var { .. } | Op::Const(_) => {
                    grads[idx] = Some(g); // keep for collection below
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (da, db) = back_matmul(&values[a.0], &values[b.0], &g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    let db = reduce_to_shape(&g, self.shape_of(*b));
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale { input, factor } => {
                    accumulate(&mut grads, *input, eval_scale(&g, factor));
                }
                Op::Exp(a) => {
                    let mut d = g;
                    for (dv, ev) in d.data_mut().iter_mut().zip(values[idx].data()) {
                        *dv *= ev;
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Log(a) => {
                    let mut d = g;
                    for (dv, xv) in d.data_mut().iter_mut().zip(values[a.0].data()) {
                        *dv /= xv;
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    accumulate(&mut grads, *a, back_softmax(&values[idx], &g));
                }
                Op::LogSumExp { input, mask } => {
                    let d = back_logsumexp(&values[input.0], &values[idx], &g, mask.as_ref());
                    accumulate(&mut grads, *input, d);
                }
                Op::Sum(a) => {
                    let gv = g.scalar_value();
                    let shape = self.shape_of(*a).to_vec();
                    let len: usize = shape.iter().product();
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::new(shape, vec![gv; len]).expect("shape/data agree"),
                    );
                }
                Op::Mean(a) => {
                    let shape = self.shape_of(*a).to_vec();
                    let len: usize = shape.iter().product();
                    let gv = g.scalar_value() / (len.max(1) as f64);
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::new(shape, vec![gv; len]).expect("shape/data agree"),
                    );
                }
                Op::Nonlin { input, kind } => {
                    accumulate(&mut grads, *input, back_nonlin(&values[input.0], &g, *kind));
                }
                Op::GatherRows { input, indices } => {
                    let d = back_gather(self.shape_of(*input), indices, &g);
                    accumulate(&mut grads, *input, d);
                }
                Op::Reparameterize { mean, logvar, eps } => {
                    let mut dlv = g.clone();
                    for ((dv, lv), e) in dlv
                        .data_mut()
                        .iter_mut()
                        .zip(values[logvar.0].data())
                        .zip(eps.data())
                    {
                        *dv *= 0.5 * (0.5 * lv).exp() * e;
                    }
                    accumulate(&mut grads, *mean, g);
                    accumulate(&mut grads, *logvar, dlv);
                }
            }
        }

        let mut out_map = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Var { name } = &node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(&node.shape));
                // A variable may appear in several nodes under one name;
                // merge by summing.
                match out_map.get_mut(name) {
                    None => {
                        out_map.insert(name.clone(), g);
                    }
                    Some(existing) => {
                        let prev: &mut Tensor = existing;
                        for (pv, gv) in prev.data_mut().iter_mut().zip(g.data()) {
                            *pv += gv;
                        }
                    }
                }
            }
        }
        Ok((out_map, probed))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        None => grads[id.0] = Some(delta),
        Some(existing) => {
            for (ev, dv) in existing.data_mut().iter_mut().zip(delta.data()) {
                *ev += dv;
            }
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("shape preserved")
}

fn eval_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let m = a.shape()[1];
    if b.shape().len() == 1 {
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &a.data()[i * m..(i + 1) * m];
            out[i] = row.iter().zip(b.data()).map(|(x, y)| x * y).sum();
        }
        return Tensor::vector(out);
    }
    let p = b.shape()[1];
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for l in 0..m {
            let av = a.data()[i * m + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[l * p..(l + 1) * p];
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(n, p, out).expect("shape/data agree")
}

fn back_matmul(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let n = a.shape()[0];
    let m = a.shape()[1];
    if b.shape().len() == 1 {
        // out[i] = sum_l a[i,l] b[l]; g is [n]
        let mut da = vec![0.0; n * m];
        let mut db = vec![0.0; m];
        for i in 0..n {
            let gi = g.data()[i];
            for l in 0..m {
                da[i * m + l] = gi * b.data()[l];
                db[l] += gi * a.data()[i * m + l];
            }
        }
        return (
            Tensor::matrix(n, m, da).expect("shape/data agree"),
            Tensor::vector(db),
        );
    }
    let p = b.shape()[1];
    // da = g . b^T, db = a^T . g
    let mut da = vec![0.0; n * m];
    let mut db = vec![0.0; m * p];
    for i in 0..n {
        for l in 0..m {
            let mut acc = 0.0;
            let grow = &g.data()[i * p..(i + 1) * p];
            let brow = &b.data()[l * p..(l + 1) * p];
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            da[i * m + l] = acc;
        }
    }
    for l in 0..m {
        for i in 0..n {
            let av = a.data()[i * m + l];
            if av == 0.0 {
                continue;
            }
            let grow = &g.data()[i * p..(i + 1) * p];
            let drow = &mut db[l * p..(l + 1) * p];
            for (dv, gv) in drow.iter_mut().zip(grow) {
                *dv += av * gv;
            }
        }
    }
    (
        Tensor::matrix(n, m, da).expect("shape/data agree"),
        Tensor::matrix(m, p, db).expect("shape/data agree"),
    )
}

fn eval_add(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    if b.shape() == a.shape() {
        for (ov, bv) in out.data_mut().iter_mut().zip(b.data()) {
            *ov += bv;
        }
    } else if b.is_scalar() {
        let bv = b.scalar_value();
        for ov in out.data_mut() {
            *ov += bv;
        }
    } else {
        let d = b.len();
        for (i, ov) in out.data_mut().iter_mut().enumerate() {
            *ov += b.data()[i % d];
        }
    }
    out
}

/// Sums `g` down to `shape` (for the broadcast side of an add).
fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    if shape.is_empty() {
        return Tensor::scalar(g.data().iter().sum());
    }
    let d = shape[0];
    let mut out = vec![0.0; d];
    for (i, gv) in g.data().iter().enumerate() {
        out[i % d] += gv;
    }
    Tensor::vector(out)
}

fn eval_scale(t: &Tensor, factor: &ScaleFactor) -> Tensor {
    let mut out = t.clone();
    match factor {
        ScaleFactor::Uniform(c) => {
            for v in out.data_mut() {
                *v *= c;
            }
        }
        ScaleFactor::PerElement(f) => {
            for (v, fv) in out.data_mut().iter_mut().zip(f.data()) {
                *v *= fv;
            }
        }
        ScaleFactor::PerLastDim(f) => {
            let d = f.len();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v *= f.data()[i % d];
            }
        }
    }
    out
}

fn eval_softmax(t: &Tensor) -> Tensor {
    let d = t.last_dim();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        softmax_in_place(row);
    }
    out
}

/// Max-subtracted softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn back_softmax(s: &Tensor, g: &Tensor) -> Tensor {
    let d = s.last_dim();
    let mut out = Tensor::zeros(s.shape());
    let rows = s.len() / d;
    for r in 0..rows {
        let srow = &s.data()[r * d..(r + 1) * d];
        let grow = &g.data()[r * d..(r + 1) * d];
        let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
        for u in 0..d {
            out.data_mut()[r * d + u] = srow[u] * (grow[u] - dot);
        }
    }
    out
}

fn eval_logsumexp(t: &Tensor, mask: Option<&Tensor>) -> Result<Tensor, GradError> {
    match mask {
        None => {
            let d = t.last_dim();
            let out: Vec<f64> = t.data().chunks(d).map(logsumexp_slice).collect();
            Ok(Tensor::vector(out))
        }
        Some(m) => {
            let n = t.len();
            let mut out = vec![0.0; n];
            for i in 0..n {
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    if m.at(i, j) != 0.0 && t.data()[j] > max {
                        max = t.data()[j];
                    }
                }
                let mut total = 0.0;
                for j in 0..n {
                    if m.at(i, j) != 0.0 {
                        total += (t.data()[j] - max).exp();
                    }
                }
                out[i] = max + total.ln();
            }
            Ok(Tensor::vector(out))
        }
    }
}

pub(crate) fn logsumexp_slice(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let total: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

fn back_logsumexp(x: &Tensor, out: &Tensor, g: &Tensor, mask: Option<&Tensor>) -> Tensor {
    match mask {
        None => {
            let d = x.last_dim();
            let mut dx = Tensor::zeros(x.shape());
            let rows = x.len() / d;
            for r in 0..rows {
                let lse = out.data()[r];
                let gr = g.data()[r];
                for u in 0..d {
                    dx.data_mut()[r * d + u] = gr * (x.data()[r * d + u] - lse).exp();
                }
            }
            dx
        }
        Some(m) => {
            let n = x.len();
            let mut dx = Tensor::zeros(x.shape());
            for i in 0..n {
                let gi = g.data()[i];
                if gi == 0.0 {
                    continue;
                }
                let lse = out.data()[i];
                for j in 0..n {
                    if m.at(i, j) != 0.0 {
                        dx.data_mut()[j] += gi * (x.data()[j] - lse).exp();
                    }
                }
            }
            dx
        }
    }
}

fn eval_nonlin(t: &Tensor, kind: Nonlinearity) -> Tensor {
    match kind {
        Nonlinearity::Softplus => map(t, softplus),
        Nonlinearity::Square => map(t, |v| v * v),
        Nonlinearity::Abs => map(t, f64::abs),
        Nonlinearity::Clamp { lo, hi } => map(t, |v| v.clamp(lo, hi)),
    }
}

fn back_nonlin(x: &Tensor, g: &Tensor, kind: Nonlinearity) -> Tensor {
    let mut out = g.clone();
    match kind {
        Nonlinearity::Softplus => {
            for (gv, xv) in out.data_mut().iter_mut().zip(x.data()) {
                *gv *= sigmoid(*xv);
            }
        }
        Nonlinearity::Square => {
            for (gv, xv) in out.data_mut().iter_mut().zip(x.data()) {
                *gv *= 2.0 * xv;
            }
        }
        Nonlinearity::Abs => {
            for (gv, xv) in out.data_mut().iter_mut().zip(x.data()) {
                *gv *= if *xv > 0.0 {
                    1.0
                } else if *xv < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
        Nonlinearity::Clamp { lo, hi } => {
            for (gv, xv) in out.data_mut().iter_mut().zip(x.data()) {
                *gv *= if *xv >= lo && *xv <= hi { 1.0 } else { 0.0 };
            }
        }
    }
    out
}

/// `ln(1 + e^x)` without overflow for large |x|.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn eval_gather(t: &Tensor, indices: &[usize]) -> Tensor {
    if t.shape().len() == 1 {
        return Tensor::vector(indices.iter().map(|&i| t.data()[i]).collect());
    }
    let d = t.shape()[1];
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
    }
    Tensor::matrix(indices.len(), d, out).expect("shape/data agree")
}

fn back_gather(input_shape: &[usize], indices: &[usize], g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(input_shape);
    if input_shape.len() == 1 {
        for (pos, &i) in indices.iter().enumerate() {
            out.data_mut()[i] += g.data()[pos];
        }
        return out;
    }
    let d = input_shape[1];
    for (pos, &i) in indices.iter().enumerate() {
        let grow = &g.data()[pos * d..(pos + 1) * d];
        let orow = &mut out.data_mut()[i * d..(i + 1) * d];
        for (ov, gv) in orow.iter_mut().zip(grow) {
            *ov += gv;
        }
    }
    out
}

fn eval_reparam(mean: &Tensor, logvar: &Tensor, eps: &Tensor) -> Tensor {
    let mut out = mean.clone();
    for ((ov, lv), ev) in out
        .data_mut()
        .iter_mut()
        .zip(logvar.data())
        .zip(eps.data())
    {
        *ov += (0.5 * lv).exp() * ev;
    }
    out
}
