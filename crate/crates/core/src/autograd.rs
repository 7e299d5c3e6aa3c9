//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! A [`Graph`] is an append-only tape: every primitive evaluation pushes one
//! node whose inputs all have smaller ids, so the node order is already a
//! topological order. [`Graph::backward`] walks the tape in reverse from a
//! scalar root; [`Graph::gradients_at`] does the same but only propagates
//! through nodes that lie downstream of the requested probes, which is what
//! the caption selector needs for gradients at the attended image features.
//!
//! All arithmetic is `f64`. Broadcasting is limited to a one-element tensor
//! combined with a tensor of any shape.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smallvec::{smallvec, SmallVec};

use crate::error::{Error, Result};

/// Probabilities fed to a clamped log are kept inside `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

type Shape = SmallVec<[usize; 2]>;

/// Dense row-major tensor of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::BadTensor {
                len: data.len(),
                shape,
            });
        }
        Ok(Self {
            shape: Shape::from_vec(shape),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: Shape::from_slice(shape),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Shape::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: smallvec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn is_single(&self) -> bool {
        self.data.len() == 1
    }
}

/// Index of a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// The differentiable primitives every model equation is built from.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Input, constant or parameter; has no inputs.
    Leaf,
    Add,
    Mul,
    /// `W[m,n] · x[n]`
    MatVec,
    /// `W[m,n]ᵀ · x[m]`
    MatTVec,
    /// Row `index` of a matrix (one-hot times matrix).
    Row(usize),
    /// n equal-length vectors stacked into an `[n, d]` matrix.
    Stack,
    Slice { start: usize, len: usize },
    Concat,
    Sigmoid,
    Tanh,
    LeakyRelu { slope: f64 },
    Softmax { axis: usize },
    /// `None` sums every element into a scalar.
    Sum { axis: Option<usize> },
    /// n-ary elementwise maximum; ties route the gradient to the lowest input index.
    Max,
    Scale(f64),
    /// Natural log. With `clamp`, the input is first clamped into `[PROB_EPS, 1 - PROB_EPS]`.
    Log { clamp: bool },
    /// Gated recurrent step. Inputs `[x, h, Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh]`:
    /// `z = σ(Wz x + Uz h + bz)`, `r = σ(Wr x + Ur h + br)`,
    /// `h̃ = tanh(Wh x + Uh (r∘h) + bh)`, output `h + z∘(h̃ − h)`.
    GruStep,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::MatVec => "matvec",
            Primitive::MatTVec => "matvec_t",
            Primitive::Row(_) => "row",
            Primitive::Stack => "stack",
            Primitive::Slice { .. } => "slice",
            Primitive::Concat => "concat",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::LeakyRelu { .. } => "leaky_relu",
            Primitive::Softmax { .. } => "softmax",
            Primitive::Sum { .. } => "sum",
            Primitive::Max => "max",
            Primitive::Scale(_) => "scale",
            Primitive::Log { .. } => "log",
            Primitive::GruStep => "gru_step",
        }
    }
}

/// Deliberate derivative corruption used as a negative control for the gradient checker.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Scales the sigmoid derivative by 1.1.
    SigmoidDerivative,
}

struct Node {
    op: Primitive,
    inputs: SmallVec<[NodeId; 2]>,
    value: Arc<Tensor>,
    /// Forward intermediates kept for the backward pass of fused primitives.
    saved: Vec<f64>,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(usize, NodeId)>,
    param_lookup: HashMap<usize, NodeId>,
    fault: Fault,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Primitive::Leaf,
            inputs: SmallVec::new(),
            value,
            saved: Vec::new(),
            requires_grad,
        });
        id
    }

    /// A differentiable input leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Arc::new(value), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Arc::new(value), false)
    }

    /// Leaf for parameter `key`. Repeated calls with the same key return the same node.
    pub fn param(&mut self, key: usize, value: &Arc<Tensor>) -> NodeId {
        if let Some(&id) = self.param_lookup.get(&key) {
            return id;
        }
        let id = self.push_leaf(Arc::clone(value), true);
        self.params.push((key, id));
        self.param_lookup.insert(key, id);
        id
    }

    /// Parameter keys and their leaf nodes, in insertion order.
    pub fn param_nodes(&self) -> &[(usize, NodeId)] {
        &self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shared_value(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes[id.0].value)
    }

    pub fn primitive(&self, id: NodeId) -> &Primitive {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.0))
        }
    }

    /// Evaluates one primitive and appends its node.
    pub fn eval(&mut self, op: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        for &i in inputs {
            self.check(i)?;
        }
        let (out, saved) = {
            let values: SmallVec<[&Tensor; 4]> = inputs.iter().map(|i| &*self.nodes[i.0].value).collect();
            if op == Primitive::GruStep {
                if values.len() != 11 {
                    return Err(Error::shape(op.name(), &values.iter().map(|t| t.shape()).collect::<Vec<_>>()));
                }
                check_gru(op.name(), &values)?;
                let parts = gru_forward(&values);
                (Tensor::vector(parts.out), [parts.z, parts.r, parts.cand].concat())
            } else {
                (forward(&op, &values)?, Vec::new())
            }
        };
        if out.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                primitive: op.name(),
            });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs: SmallVec::from_slice(inputs),
            value: Arc::new(out),
            saved,
            requires_grad,
        });
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.eval(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.eval(Primitive::Mul, &[a, b])
    }

    /// `a - b`
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        self.eval(Primitive::MatVec, &[w, x])
    }

    pub fn matvec_t(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        self.eval(Primitive::MatTVec, &[w, x])
    }

    pub fn row(&mut self, m: NodeId, index: usize) -> Result<NodeId> {
        self.eval(Primitive::Row(index), &[m])
    }

    pub fn stack(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        self.eval(Primitive::Stack, rows)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.eval(Primitive::Slice { start, len }, &[x])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.eval(Primitive::Concat, parts)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.eval(Primitive::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.eval(Primitive::Tanh, &[x])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        self.eval(Primitive::LeakyRelu { slope }, &[x])
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.eval(Primitive::Softmax { axis }, &[x])
    }

    pub fn sum(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.eval(Primitive::Sum { axis }, &[x])
    }

    pub fn max(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.eval(Primitive::Max, xs)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.eval(Primitive::Scale(c), &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.eval(Primitive::Log { clamp: false }, &[x])
    }

    /// Fused recurrent step; `weights` is `[Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh]`.
    pub fn gru_step(&mut self, x: NodeId, h: NodeId, weights: [NodeId; 9]) -> Result<NodeId> {
        let mut inputs = [x; 11];
        inputs[1] = h;
        inputs[2..].copy_from_slice(&weights);
        self.eval(Primitive::GruStep, &inputs)
    }

    pub fn log_prob(&mut self, x: NodeId) -> Result<NodeId> {
        self.eval(Primitive::Log { clamp: true }, &[x])
    }

    /// Sum of scalar nodes; a single node is returned unchanged.
    pub fn add_all(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        match xs {
            [] => Err(Error::InvalidArgument("add_all of nothing".into())),
            [x] => Ok(*x),
            _ => {
                let cat = self.concat(xs)?;
                self.sum(cat, None)
            }
        }
    }

    /// Full reverse pass from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<GradientMap> {
        self.check_root(root)?;
        Ok(self.propagate(root, None))
    }

    /// Gradients of `root` at `probes` only. Nodes not downstream of any probe are
    /// skipped, so parameter gradients are not computed.
    pub fn gradients_at(&self, root: NodeId, probes: &[NodeId]) -> Result<GradientMap> {
        self.check_root(root)?;
        for &p in probes {
            self.check(p)?;
        }
        let mut live = vec![false; root.0 + 1];
        for &p in probes {
            if p.0 <= root.0 {
                live[p.0] = true;
            }
        }
        for i in 0..=root.0 {
            if !live[i] && self.nodes[i].inputs.iter().any(|x| live[x.0]) {
                live[i] = true;
            }
        }
        let full = self.propagate(root, Some(&live));
        let mut entries: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut full_entries = full.entries;
        for &p in probes {
            let g = if p.0 <= root.0 {
                full_entries[p.0].take()
            } else {
                None
            };
            entries[p.0] = Some(g.unwrap_or_else(|| Tensor::zeros(self.value(p).shape())));
        }
        Ok(GradientMap { entries })
    }

    fn check_root(&self, root: NodeId) -> Result<()> {
        self.check(root)?;
        let v = self.value(root);
        if !v.is_single() {
            return Err(Error::NonScalarRoot(v.shape.to_vec()));
        }
        Ok(())
    }

    fn propagate(&self, root: NodeId, live: Option<&[bool]>) -> GradientMap {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.inputs.is_empty() {
                let ins: SmallVec<[&Tensor; 4]> = node.inputs.iter().map(|i| &*self.nodes[i.0].value).collect();
                let wanted = |input: &NodeId| self.nodes[input.0].requires_grad && live.is_none_or(|l| l[input.0]);
                let fused = matches!(node.op, Primitive::GruStep).then(|| {
                    let mut need = [false; 11];
                    for (n, input) in need.iter_mut().zip(&node.inputs) {
                        *n = wanted(input);
                    }
                    gru_backward(&ins, &node.saved, &g, self.fault, need)
                });
                for (k, &input) in node.inputs.iter().enumerate() {
                    let target = &self.nodes[input.0];
                    if !target.requires_grad {
                        continue;
                    }
                    if let Some(live) = live {
                        if !live[input.0] {
                            continue;
                        }
                    }
                    let acc = grads[input.0].get_or_insert_with(|| vec![0.0; target.value.len()]);
                    match &fused {
                        Some(parts) => {
                            for (a, d) in acc.iter_mut().zip(parts[k].iter().flatten()) {
                                *a += d;
                            }
                        }
                        None => accumulate(&node.op, k, &ins, &node.value, &g, acc, self.fault),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        let entries = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor {
                    shape: self.nodes[i].value.shape.clone(),
                    data,
                })
            })
            .collect();
        GradientMap { entries }
    }
}

/// Node id → gradient of the root with respect to that node's output.
#[derive(Clone, Debug)]
pub struct GradientMap {
    entries: Vec<Option<Tensor>>,
}

impl GradientMap {
    /// The gradient at `id`, or `None` when the node was not reached.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.entries.get(id.0).and_then(|g| g.as_ref())
    }

    /// The gradient at `id`, with unreached nodes mapped to zeros of the node's shape.
    pub fn get_or_zeros(&self, graph: &Graph, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.entries.get_mut(id.0).and_then(|g| g.take())
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Shape> {
    if a.shape == b.shape || b.is_single() {
        Ok(a.shape.clone())
    } else if a.is_single() {
        Ok(b.shape.clone())
    } else {
        Err(Error::shape(op, &[&a.shape, &b.shape]))
    }
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = broadcast_shape(op, a, b)?;
    let n: usize = shape.iter().product();
    let at = |t: &Tensor, i: usize| if t.data.len() == n { t.data[i] } else { t.data[0] };
    let data = (0..n).map(|i| f(at(a, i), at(b, i))).collect();
    Ok(Tensor { shape, data })
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

fn as_vector_len(t: &Tensor) -> Option<usize> {
    match t.rank() {
        0 => Some(1),
        1 => Some(t.shape[0]),
        _ => None,
    }
}

/// Lanes of a rank-1 or rank-2 tensor along `axis`: (lane count, lane length, stride, lane start fn).
fn lanes(op: &'static str, t: &Tensor, axis: usize) -> Result<(usize, usize, usize, usize)> {
    match (t.rank(), axis) {
        (1, 0) => Ok((1, t.shape[0], 1, 0)),
        (2, 1) => Ok((t.shape[0], t.shape[1], 1, t.shape[1])),
        (2, 0) => Ok((t.shape[1], t.shape[0], t.shape[1], 1)),
        _ => Err(Error::shape(op, &[&t.shape, &[axis]])),
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

fn forward(op: &Primitive, ins: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    let arity = |n: usize| -> Result<()> {
        if ins.len() == n {
            Ok(())
        } else {
            Err(Error::shape(name, &ins.iter().map(|t| t.shape()).collect::<Vec<_>>()))
        }
    };
    match op {
        Primitive::Leaf => Err(Error::InvalidArgument("leaf nodes are not evaluated".into())),
        Primitive::Add => {
            arity(2)?;
            binary(name, ins[0], ins[1], |a, b| a + b)
        }
        Primitive::Mul => {
            arity(2)?;
            binary(name, ins[0], ins[1], |a, b| a * b)
        }
        Primitive::MatVec => {
            arity(2)?;
            let (w, x) = (ins[0], ins[1]);
            if w.rank() != 2 || as_vector_len(x) != Some(w.shape[1]) || x.rank() != 1 {
                return Err(Error::shape(name, &[&w.shape, &x.shape]));
            }
            let (m, n) = (w.shape[0], w.shape[1]);
            let mut out = vec![0.0; m];
            for (i, o) in out.iter_mut().enumerate() {
                let row = &w.data[i * n..(i + 1) * n];
                *o = row.iter().zip(&x.data).map(|(a, b)| a * b).sum();
            }
            Ok(Tensor::vector(out))
        }
        Primitive::MatTVec => {
            arity(2)?;
            let (w, x) = (ins[0], ins[1]);
            if w.rank() != 2 || x.rank() != 1 || x.shape[0] != w.shape[0] {
                return Err(Error::shape(name, &[&w.shape, &x.shape]));
            }
            let n = w.shape[1];
            let mut out = vec![0.0; n];
            for (i, &xi) in x.data.iter().enumerate() {
                let row = &w.data[i * n..(i + 1) * n];
                for (o, &wij) in out.iter_mut().zip(row) {
                    *o += wij * xi;
                }
            }
            Ok(Tensor::vector(out))
        }
        Primitive::Row(r) => {
            arity(1)?;
            let m = ins[0];
            if m.rank() != 2 || *r >= m.shape[0] {
                return Err(Error::shape(name, &[&m.shape, &[*r]]));
            }
            let n = m.shape[1];
            Ok(Tensor::vector(m.data[r * n..(r + 1) * n].to_vec()))
        }
        Primitive::Stack => {
            if ins.is_empty() || ins.iter().any(|t| t.rank() != 1 || t.shape != ins[0].shape) {
                return Err(Error::shape(name, &ins.iter().map(|t| t.shape()).collect::<Vec<_>>()));
            }
            let d = ins[0].shape[0];
            let mut data = Vec::with_capacity(ins.len() * d);
            for t in ins {
                data.extend_from_slice(&t.data);
            }
            Ok(Tensor {
                shape: smallvec![ins.len(), d],
                data,
            })
        }
        Primitive::Slice { start, len } => {
            arity(1)?;
            let x = ins[0];
            if x.rank() != 1 || start + len > x.shape[0] {
                return Err(Error::shape(name, &[&x.shape, &[*start, *len]]));
            }
            Ok(Tensor::vector(x.data[*start..start + len].to_vec()))
        }
        Primitive::Concat => {
            if ins.is_empty() || ins.iter().any(|t| as_vector_len(t).is_none()) {
                return Err(Error::shape(name, &ins.iter().map(|t| t.shape()).collect::<Vec<_>>()));
            }
            let data: Vec<f64> = ins.iter().flat_map(|t| t.data.iter().copied()).collect();
            Ok(Tensor::vector(data))
        }
        Primitive::Sigmoid => {
            arity(1)?;
            Ok(unary(ins[0], sigmoid))
        }
        Primitive::Tanh => {
            arity(1)?;
            Ok(unary(ins[0], f64::tanh))
        }
        Primitive::LeakyRelu { slope } => {
            arity(1)?;
            let s = *slope;
            Ok(unary(ins[0], |v| if v > 0.0 { v } else { s * v }))
        }
        Primitive::Softmax { axis } => {
            arity(1)?;
            let x = ins[0];
            let (count, len, stride, step) = lanes(name, x, *axis)?;
            let mut out = vec![0.0; x.len()];
            for lane in 0..count {
                let base = lane * step;
                let idx = |k: usize| base + k * stride;
                let mx = (0..len).map(|k| x.data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (x.data[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
            Ok(Tensor {
                shape: x.shape.clone(),
                data: out,
            })
        }
        Primitive::Sum { axis } => {
            arity(1)?;
            let x = ins[0];
            match axis {
                None => Ok(Tensor::scalar(x.data.iter().sum())),
                Some(a) => {
                    let (count, len, stride, step) = lanes(name, x, *a)?;
                    let out: Vec<f64> = (0..count)
                        .map(|lane| (0..len).map(|k| x.data[lane * step + k * stride]).sum())
                        .collect();
                    if x.rank() == 1 {
                        Ok(Tensor::scalar(out[0]))
                    } else {
                        Ok(Tensor::vector(out))
                    }
                }
            }
        }
        Primitive::Max => {
            if ins.is_empty() || ins.iter().any(|t| t.shape != ins[0].shape) {
                return Err(Error::shape(name, &ins.iter().map(|t| t.shape()).collect::<Vec<_>>()));
            }
            let mut data = ins[0].data.clone();
            for t in &ins[1..] {
                for (o, &v) in data.iter_mut().zip(&t.data) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
            Ok(Tensor {
                shape: ins[0].shape.clone(),
                data,
            })
        }
        Primitive::Scale(c) => {
            arity(1)?;
            let c = *c;
            Ok(unary(ins[0], |v| c * v))
        }
        Primitive::GruStep => {
            arity(11)?;
            check_gru(name, ins)?;
            Ok(Tensor::vector(gru_forward(ins).out))
        }
        Primitive::Log { clamp } => {
            arity(1)?;
            if *clamp {
                Ok(unary(ins[0], |v| v.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()))
            } else {
                Ok(unary(ins[0], f64::ln))
            }
        }
    }
}

fn check_gru(name: &'static str, ins: &[&Tensor]) -> Result<()> {
    let (x, h) = (ins[0], ins[1]);
    let (d, n) = (x.len(), h.len());
    let expected: [&[usize]; 11] = [&[d], &[n], &[n, d], &[n, n], &[n], &[n, d], &[n, n], &[n], &[n, d], &[n, n], &[n]];
    if ins.iter().zip(expected).any(|(t, e)| t.shape() != e) {
        return Err(Error::shape(name, &ins.iter().map(|t| t.shape()).collect::<Vec<_>>()));
    }
    Ok(())
}

fn mat_vec_into(w: &Tensor, x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o += w.data[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn mat_t_vec_into(w: &Tensor, g: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (i, &gi) in g.iter().enumerate() {
        if gi != 0.0 {
            for (o, &wij) in out.iter_mut().zip(&w.data[i * n..(i + 1) * n]) {
                *o += wij * gi;
            }
        }
    }
}

fn outer(g: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.len() * x.len());
    for &gi in g {
        out.extend(x.iter().map(|&xj| gi * xj));
    }
    out
}

struct GruParts {
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
    out: Vec<f64>,
}

fn gru_forward(ins: &[&Tensor]) -> GruParts {
    let (x, h) = (&ins[0].data, &ins[1].data);
    let pre = |w: &Tensor, u: &Tensor, b: &Tensor, hin: &[f64]| {
        let mut a = b.data.clone();
        mat_vec_into(w, x, &mut a);
        mat_vec_into(u, hin, &mut a);
        a
    };
    let z: Vec<f64> = pre(ins[2], ins[3], ins[4], h).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = pre(ins[5], ins[6], ins[7], h).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let cand: Vec<f64> = pre(ins[8], ins[9], ins[10], &rh).into_iter().map(f64::tanh).collect();
    let out = (0..h.len()).map(|i| h[i] + z[i] * (cand[i] - h[i])).collect();
    GruParts { z, r, cand, out }
}

/// Gradients of the inputs of a recurrent step flagged in `need`, in input order.
/// `saved` holds `[z; r; h̃]` from the forward pass, or is empty to recompute them.
fn gru_backward(ins: &[&Tensor], saved: &[f64], g: &[f64], fault: Fault, need: [bool; 11]) -> [Option<Vec<f64>>; 11] {
    let factor = if fault == Fault::SigmoidDerivative { 1.1 } else { 1.0 };
    let (x, h) = (&ins[0].data, &ins[1].data);
    let n = h.len();
    let recomputed;
    let saved = if saved.len() == 3 * n {
        saved
    } else {
        let p = gru_forward(ins);
        recomputed = [p.z, p.r, p.cand].concat();
        &recomputed
    };
    let (z, rest) = saved.split_at(n);
    let (r, cand) = rest.split_at(n);
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let daz: Vec<f64> = (0..n).map(|i| factor * g[i] * (cand[i] - h[i]) * z[i] * (1.0 - z[i])).collect();
    let dac: Vec<f64> = (0..n).map(|i| g[i] * z[i] * (1.0 - cand[i] * cand[i])).collect();
    let mut drh = vec![0.0; n];
    mat_t_vec_into(ins[9], &dac, &mut drh);
    let dar: Vec<f64> = (0..n).map(|i| factor * drh[i] * h[i] * r[i] * (1.0 - r[i])).collect();

    let mut out: [Option<Vec<f64>>; 11] = Default::default();
    if need[0] {
        let mut dx = vec![0.0; x.len()];
        mat_t_vec_into(ins[2], &daz, &mut dx);
        mat_t_vec_into(ins[5], &dar, &mut dx);
        mat_t_vec_into(ins[8], &dac, &mut dx);
        out[0] = Some(dx);
    }
    if need[1] {
        let mut dh: Vec<f64> = (0..n).map(|i| g[i] * (1.0 - z[i]) + drh[i] * r[i]).collect();
        mat_t_vec_into(ins[3], &daz, &mut dh);
        mat_t_vec_into(ins[6], &dar, &mut dh);
        out[1] = Some(dh);
    }
    for (k, (d, src)) in [(&daz, x), (&daz, h), (&dar, x), (&dar, h), (&dac, x), (&dac, &rh)].into_iter().enumerate() {
        let slot = [2, 3, 5, 6, 8, 9][k];
        if need[slot] {
            out[slot] = Some(outer(d, src));
        }
    }
    for (slot, d) in [(4, daz), (7, dar), (10, dac)] {
        if need[slot] {
            out[slot] = Some(d);
        }
    }
    out
}

/// Adds the contribution of `g` (gradient at the node's output) to input `k`'s accumulator.
fn accumulate(op: &Primitive, k: usize, ins: &[&Tensor], out: &Tensor, g: &[f64], acc: &mut [f64], fault: Fault) {
    match op {
        Primitive::Leaf => {}
        Primitive::Add => {
            if acc.len() == g.len() {
                for (a, &gi) in acc.iter_mut().zip(g) {
                    *a += gi;
                }
            } else {
                acc[0] += g.iter().sum::<f64>();
            }
        }
        Primitive::Mul => {
            let other = ins[1 - k];
            let n = g.len();
            let o = |i: usize| if other.data.len() == n { other.data[i] } else { other.data[0] };
            if acc.len() == n {
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += g[i] * o(i);
                }
            } else {
                acc[0] += (0..n).map(|i| g[i] * o(i)).sum::<f64>();
            }
        }
        Primitive::MatVec => {
            let (w, x) = (ins[0], ins[1]);
            let n = w.shape[1];
            if k == 0 {
                for (i, &gi) in g.iter().enumerate() {
                    if gi == 0.0 {
                        continue;
                    }
                    let row = &mut acc[i * n..(i + 1) * n];
                    for (a, &xj) in row.iter_mut().zip(&x.data) {
                        *a += gi * xj;
                    }
                }
            } else {
                for (i, &gi) in g.iter().enumerate() {
                    let row = &w.data[i * n..(i + 1) * n];
                    for (a, &wij) in acc.iter_mut().zip(row) {
                        *a += wij * gi;
                    }
                }
            }
        }
        Primitive::MatTVec => {
            let (w, x) = (ins[0], ins[1]);
            let n = w.shape[1];
            if k == 0 {
                for (i, &xi) in x.data.iter().enumerate() {
                    let row = &mut acc[i * n..(i + 1) * n];
                    for (a, &gj) in row.iter_mut().zip(g) {
                        *a += xi * gj;
                    }
                }
            } else {
                for (i, a) in acc.iter_mut().enumerate() {
                    let row = &w.data[i * n..(i + 1) * n];
                    *a += row.iter().zip(g).map(|(w, g)| w * g).sum::<f64>();
                }
            }
        }
        Primitive::Row(r) => {
            let n = g.len();
            for (a, &gi) in acc[r * n..(r + 1) * n].iter_mut().zip(g) {
                *a += gi;
            }
        }
        Primitive::Stack => {
            let d = acc.len();
            for (a, &gi) in acc.iter_mut().zip(&g[k * d..(k + 1) * d]) {
                *a += gi;
            }
        }
        Primitive::Slice { start, .. } => {
            for (a, &gi) in acc[*start..].iter_mut().zip(g) {
                *a += gi;
            }
        }
        Primitive::Concat => {
            let offset: usize = ins[..k].iter().map(|t| t.len()).sum();
            for (a, &gi) in acc.iter_mut().zip(&g[offset..]) {
                *a += gi;
            }
        }
        Primitive::Sigmoid => {
            let factor = if fault == Fault::SigmoidDerivative { 1.1 } else { 1.0 };
            for ((a, &gi), &y) in acc.iter_mut().zip(g).zip(&out.data) {
                *a += factor * gi * y * (1.0 - y);
            }
        }
        Primitive::Tanh => {
            for ((a, &gi), &y) in acc.iter_mut().zip(g).zip(&out.data) {
                *a += gi * (1.0 - y * y);
            }
        }
        Primitive::LeakyRelu { slope } => {
            for ((a, &gi), &x) in acc.iter_mut().zip(g).zip(&ins[0].data) {
                *a += if x > 0.0 { gi } else { slope * gi };
            }
        }
        Primitive::Softmax { axis } => {
            // shape was validated on the forward pass
            let (count, len, stride, step) = lanes("softmax", out, *axis).expect("validated");
            for lane in 0..count {
                let base = lane * step;
                let dot: f64 = (0..len).map(|j| g[base + j * stride] * out.data[base + j * stride]).sum();
                for j in 0..len {
                    let i = base + j * stride;
                    acc[i] += out.data[i] * (g[i] - dot);
                }
            }
        }
        Primitive::Sum { axis } => match axis {
            None => {
                for a in acc.iter_mut() {
                    *a += g[0];
                }
            }
            Some(ax) => {
                let (count, len, stride, step) = lanes("sum", ins[0], *ax).expect("validated");
                for lane in 0..count {
                    for j in 0..len {
                        acc[lane * step + j * stride] += g[lane];
                    }
                }
            }
        },
        Primitive::Max => {
            for (e, a) in acc.iter_mut().enumerate() {
                let mut winner = 0;
                for (i, t) in ins.iter().enumerate().skip(1) {
                    if t.data[e] > ins[winner].data[e] {
                        winner = i;
                    }
                }
                if winner == k {
                    *a += g[e];
                }
            }
        }
        Primitive::Scale(c) => {
            for (a, &gi) in acc.iter_mut().zip(g) {
                *a += c * gi;
            }
        }
        Primitive::GruStep => {
            let mut need = [false; 11];
            need[k] = true;
            for (a, d) in acc.iter_mut().zip(gru_backward(ins, &[], g, fault, need)[k].iter().flatten()) {
                *a += d;
            }
        }
        Primitive::Log { clamp } => {
            for ((a, &gi), &x) in acc.iter_mut().zip(g).zip(&ins[0].data) {
                if *clamp && !(PROB_EPS..=1.0 - PROB_EPS).contains(&x) {
                    continue;
                }
                *a += gi / x;
            }
        }
    }
}

/// One coordinate compared by [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.pass)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    pub fault: Fault,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords_per_input: None,
            seed: 0,
            fault: Fault::None,
        }
    }
}

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is zero compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of a scalar-valued graph builder against
/// central finite differences at `point`.
pub fn grad_check<F>(build: F, point: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    grad_check_with(
        build,
        point,
        GradCheckOptions {
            tolerance,
            ..GradCheckOptions::default()
        },
    )
}

pub fn grad_check_with<F>(build: F, point: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::with_fault(opts.fault);
        let ids: Vec<NodeId> = values.iter().map(|v| g.input(v.clone())).collect();
        let root = build(&mut g, &ids)?;
        Ok(g.value(root).item())
    };

    let mut graph = Graph::with_fault(opts.fault);
    let ids: Vec<NodeId> = point.iter().map(|v| graph.input(v.clone())).collect();
    let root = build(&mut graph, &ids)?;
    let grads = graph.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    let mut probe: Vec<Tensor> = point.to_vec();
    for (input, id) in ids.iter().enumerate() {
        let analytic = grads.get_or_zeros(&graph, *id);
        let n = point[input].len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for coord in coords {
            let orig = point[input].data[coord];
            probe[input].data[coord] = orig + opts.step;
            let plus = eval(&probe)?;
            probe[input].data[coord] = orig - opts.step;
            let minus = eval(&probe)?;
            probe[input].data[coord] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data[coord];
            let rel_error = relative_error(a, numeric);
            max_rel_error = max_rel_error.max(rel_error);
            entries.push(GradCheckEntry {
                input,
                coord,
                analytic: a,
                numeric,
                rel_error,
                pass: rel_error < opts.tolerance,
            });
        }
    }
    Ok(GradCheckReport {
        entries,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}
