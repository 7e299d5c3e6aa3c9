//! Parameterized layers and the AdaMax optimizer.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{
    relative_error, GradCheckEntry, GradCheckOptions, GradCheckReport, GradientMap, Graph, NodeId, Tensor,
};
use crate::error::{Error, Result};

/// Leaky-relu negative slope used by every fc block.
pub const DEFAULT_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors. Values are shared with graphs through `Arc`, so
/// building a graph never copies parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Leaf node for `id` on `graph` (memoized per graph).
    pub fn node(&self, graph: &mut Graph, id: ParamId) -> NodeId {
        graph.param(id.0, &self.values[id.0])
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            grads: self.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }
}

/// Dense gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn from_tensors(grads: Vec<Tensor>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds the gradients that `map` holds for the parameter leaves of `graph`.
    pub fn accumulate(&mut self, graph: &Graph, map: &GradientMap) {
        for &(key, node) in graph.param_nodes() {
            if let Some(g) = map.get(node) {
                for (a, b) in self.grads[key].data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }
}

/// Registers parameters in a fixed order with Glorot-uniform matrices and zero biases.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in ±√(6/(rows+cols)).
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let bound = glorot_bound(cols, rows);
        let data = (0..rows * cols).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.store.insert(name, Tensor::new(vec![rows, cols], data).expect("consistent shape"))
    }

    pub fn zero_matrix(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.insert(name, Tensor::zeros(&[rows, cols]))
    }

    pub fn bias(&mut self, name: &str, len: usize) -> ParamId {
        self.store.insert(name, Tensor::zeros(&[len]))
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// A layer entry for [`init_params`].
#[derive(Clone, Debug)]
pub enum LayerSpec {
    Matrix { name: String, rows: usize, cols: usize },
    Bias { name: String, len: usize },
}

/// Builds a parameter set from layer sizes; a pure function of `(layers, seed)`.
pub fn init_params(layers: &[LayerSpec], seed: u64) -> Result<ParamStore> {
    let mut b = ParamBuilder::new(seed);
    for layer in layers {
        match layer {
            LayerSpec::Matrix { name, rows, cols } => {
                if *rows == 0 || *cols == 0 {
                    return Err(Error::InvalidArgument(format!("layer {name} has a zero dimension")));
                }
                b.matrix(name, *rows, *cols);
            }
            LayerSpec::Bias { name, len } => {
                if *len == 0 {
                    return Err(Error::InvalidArgument(format!("bias {name} has zero length")));
                }
                b.bias(name, *len);
            }
        }
    }
    Ok(b.finish())
}

/// `f(x) = LReLU(Wx + b)`
#[derive(Clone, Debug)]
pub struct FcBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
    pub slope: f64,
}

impl FcBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, output: usize) -> Self {
        Self {
            w: pb.matrix(&format!("{name}.w"), output, input),
            b: pb.bias(&format!("{name}.b"), output),
            input,
            output,
            slope: DEFAULT_SLOPE,
        }
    }

    pub fn apply(&self, graph: &mut Graph, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        let pre = self.affine(graph, params, x)?;
        graph.leaky_relu(pre, self.slope)
    }

    /// `Wx + b` without the activation.
    pub fn affine(&self, graph: &mut Graph, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        if graph.value(x).shape() != [self.input] {
            return Err(Error::shape("fc", &[graph.value(x).shape(), &[self.output, self.input]]));
        }
        let w = params.node(graph, self.w);
        let b = params.node(graph, self.b);
        let wx = graph.matvec(w, x)?;
        graph.add(wx, b)
    }
}

/// Update-gate GRU:
/// `z = σ(Wz x + Uz h + bz)`, `r = σ(Wr x + Ur h + br)`,
/// `h̃ = tanh(Wh x + Uh (r∘h) + bh)`, `h' = (1−z)∘h + z∘h̃`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wh: ParamId,
    pub uh: ParamId,
    pub bh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            wz: pb.matrix(&format!("{name}.wz"), hidden, input),
            uz: pb.matrix(&format!("{name}.uz"), hidden, hidden),
            bz: pb.bias(&format!("{name}.bz"), hidden),
            wr: pb.matrix(&format!("{name}.wr"), hidden, input),
            ur: pb.matrix(&format!("{name}.ur"), hidden, hidden),
            br: pb.bias(&format!("{name}.br"), hidden),
            wh: pb.matrix(&format!("{name}.wh"), hidden, input),
            uh: pb.matrix(&format!("{name}.uh"), hidden, hidden),
            bh: pb.bias(&format!("{name}.bh"), hidden),
            input,
            hidden,
        }
    }

    pub fn step(&self, graph: &mut Graph, params: &ParamStore, x: NodeId, h: NodeId) -> Result<NodeId> {
        let (xs, hs) = (graph.value(x).shape(), graph.value(h).shape());
        if xs != [self.input] || hs != [self.hidden] {
            return Err(Error::shape("gru", &[xs, hs, &[self.input, self.hidden]]));
        }
        let weights = [self.wz, self.uz, self.bz, self.wr, self.ur, self.br, self.wh, self.uh, self.bh].map(|p| params.node(graph, p));
        graph.gru_step(x, h, weights)
    }

    /// Zero initial state, as a constant.
    pub fn zero_state(&self, graph: &mut Graph) -> NodeId {
        graph.constant(Tensor::zeros(&[self.hidden]))
    }
}

/// Word embedding matrix `W_e` (vocab × dim); tokens select rows.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(pb: &mut ParamBuilder, name: &str, vocab: usize, dim: usize) -> Self {
        Self {
            table: pb.matrix(name, vocab, dim),
            vocab,
            dim,
        }
    }

    pub fn check(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().position(|&t| t >= self.vocab) {
            Some(position) => Err(Error::TokenOutOfRange {
                token: tokens[position],
                position,
                vocab: self.vocab,
            }),
            None => Ok(()),
        }
    }

    pub fn embed(&self, graph: &mut Graph, params: &ParamStore, tokens: &[usize]) -> Result<Vec<NodeId>> {
        self.check(tokens)?;
        let table = params.node(graph, self.table);
        tokens.iter().map(|&t| graph.row(table, t)).collect()
    }
}

/// AdaMax: `m ← β1 m + (1−β1) g`, `u ← max(β2 u, |g|)`,
/// `θ ← θ − lr · m / ((1−β1^t)(u+ε))`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaMaxState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub u: Vec<Tensor>,
}

impl AdaMaxState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, v)| Tensor::zeros(v.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            u: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::MisalignedParams(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for id in params.ids() {
            let shape = params.get(id).shape();
            if grads.get(id).shape() != shape || self.m[id.0].shape() != shape {
                return Err(Error::MisalignedParams(format!(
                    "{}: parameter {:?}, gradient {:?}",
                    params.name(id),
                    shape,
                    grads.get(id).shape()
                )));
            }
        }
        self.t += 1;
        let correction = 1.0 - self.beta1.powi(self.t as i32);
        let step = self.lr / correction;
        for id in params.ids() {
            let g = grads.get(id).data();
            let m = self.m[id.0].data_mut();
            let u = self.u[id.0].data_mut();
            let theta = params.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                u[i] = (self.beta2 * u[i]).max(g[i].abs());
                theta[i] -= step * m[i] / (u[i] + self.eps);
            }
        }
        Ok(())
    }
}

/// Gradient check of a model-level builder against central differences, over
/// both the explicit `inputs` and every parameter in `params`. Report entries
/// index inputs first, then parameters by [`ParamId`].
pub fn grad_check_model<F>(
    params: &ParamStore,
    inputs: &[Tensor],
    build: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore, &[NodeId]) -> Result<NodeId>,
{
    let eval = |p: &ParamStore, xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::with_fault(opts.fault);
        let ids: Vec<NodeId> = xs.iter().map(|x| g.input(x.clone())).collect();
        let root = build(&mut g, p, &ids)?;
        Ok(g.value(root).item())
    };

    let mut graph = Graph::with_fault(opts.fault);
    let ids: Vec<NodeId> = inputs.iter().map(|x| graph.input(x.clone())).collect();
    let root = build(&mut graph, params, &ids)?;
    let grads = graph.backward(root)?;
    let mut pgrads = params.zero_grads();
    pgrads.accumulate(&graph, &grads);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pick = |n: usize| -> Vec<usize> {
        match opts.max_coords_per_input {
            Some(m) if m < n => {
                let mut c = rand::seq::index::sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        }
    };

    let mut entries = Vec::new();
    let mut record = |input: usize, coord: usize, analytic: f64, numeric: f64| {
        let rel_error = relative_error(analytic, numeric);
        entries.push(GradCheckEntry {
            input,
            coord,
            analytic,
            numeric,
            rel_error,
            pass: rel_error < opts.tolerance,
        });
    };

    let mut xs = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get_or_zeros(&graph, *id);
        for coord in pick(xs[k].len()) {
            let orig = xs[k].data()[coord];
            xs[k].data_mut()[coord] = orig + opts.step;
            let plus = eval(params, &xs)?;
            xs[k].data_mut()[coord] = orig - opts.step;
            let minus = eval(params, &xs)?;
            xs[k].data_mut()[coord] = orig;
            record(k, coord, analytic.data()[coord], (plus - minus) / (2.0 * opts.step));
        }
    }

    let mut p = params.clone();
    for pid in params.ids() {
        for coord in pick(params.get(pid).len()) {
            let orig = params.get(pid).data()[coord];
            p.get_mut(pid).data_mut()[coord] = orig + opts.step;
            let plus = eval(&p, inputs)?;
            p.get_mut(pid).data_mut()[coord] = orig - opts.step;
            let minus = eval(&p, inputs)?;
            p.get_mut(pid).data_mut()[coord] = orig;
            record(
                inputs.len() + pid.0,
                coord,
                pgrads.get(pid).data()[coord],
                (plus - minus) / (2.0 * opts.step),
            );
        }
    }

    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}
