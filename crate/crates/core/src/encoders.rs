//! Question encoding and question-visual attention.

use crate::autograd::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nn::{EmbeddingTable, FcBlock, GruCell, ParamBuilder, ParamId, ParamStore};

/// Questions longer than this are trimmed.
pub const MAX_QUESTION_LEN: usize = 14;

/// K region feature vectors standing in for detector outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureSet {
    regions: Vec<Vec<f64>>,
}

impl ImageFeatureSet {
    pub fn new(regions: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = regions.first() else {
            return Err(Error::InvalidArgument("image with no regions".into()));
        };
        let dim = first.len();
        if regions.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument("regions have unequal dimensions".into()));
        }
        if regions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite region feature".into()));
        }
        Ok(Self { regions })
    }

    pub fn zeros(count: usize, dim: usize) -> Self {
        Self {
            regions: vec![vec![0.0; dim]; count],
        }
    }

    pub fn regions(&self) -> &[Vec<f64>] {
        &self.regions
    }

    pub fn count(&self) -> usize {
        self.regions.len()
    }

    pub fn dim(&self) -> usize {
        self.regions[0].len()
    }

    /// One constant leaf per region.
    pub fn to_graph(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.regions
            .iter()
            .map(|r| graph.constant(Tensor::vector(r.clone())))
            .collect()
    }
}

/// Question-attended regions `v^q_i` with their gate values, read back from a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct AttendedImageSet {
    pub regions: Vec<Vec<f64>>,
    pub gates: Vec<f64>,
}

impl AttendedImageSet {
    pub fn from_graph(graph: &Graph, nodes: &AttendedNodes) -> Self {
        Self {
            regions: nodes.regions.iter().map(|&n| graph.value(n).data().to_vec()).collect(),
            gates: nodes.gates.iter().map(|&n| graph.value(n).item()).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.regions.len()
    }

    pub fn to_graph(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.regions
            .iter()
            .map(|r| graph.constant(Tensor::vector(r.clone())))
            .collect()
    }
}

/// Graph nodes for an attended image set.
#[derive(Clone, Debug)]
pub struct AttendedNodes {
    pub regions: Vec<NodeId>,
    pub gates: Vec<NodeId>,
}

/// Word embedding followed by a GRU; the final hidden state is the question feature.
#[derive(Clone, Debug)]
pub struct QuestionEncoder {
    pub embed: EmbeddingTable,
    pub gru: GruCell,
    pub max_len: usize,
}

impl QuestionEncoder {
    pub fn new(pb: &mut ParamBuilder, vocab: usize, embed_dim: usize, hidden: usize) -> Self {
        Self {
            embed: EmbeddingTable::new(pb, "question.embed", vocab, embed_dim),
            gru: GruCell::new(pb, "question.gru", embed_dim, hidden),
            max_len: MAX_QUESTION_LEN,
        }
    }

    pub fn hidden(&self) -> usize {
        self.gru.hidden
    }

    /// Final GRU state over the first `max_len` tokens; the empty question encodes to zeros.
    pub fn encode(&self, graph: &mut Graph, params: &ParamStore, tokens: &[usize]) -> Result<NodeId> {
        self.embed.check(tokens)?;
        let tokens = &tokens[..tokens.len().min(self.max_len)];
        let mut h = self.gru.zero_state(graph);
        for x in self.embed.embed(graph, params, tokens)? {
            h = self.gru.step(graph, params, x, h)?;
        }
        Ok(h)
    }
}

/// Per-region gated attention:
/// `g_i = σ(w · (f_q(q) ∘ f_k(v_i)))`, `v^q_i = g_i · f_v(v_i)`.
#[derive(Clone, Debug)]
pub struct QuestionVisualAttention {
    pub query: FcBlock,
    pub key: FcBlock,
    pub gate: ParamId,
    pub value: FcBlock,
}

impl QuestionVisualAttention {
    pub fn new(pb: &mut ParamBuilder, question_dim: usize, region_dim: usize, joint: usize, attended: usize) -> Self {
        Self {
            query: FcBlock::new(pb, "qv_att.query", question_dim, joint),
            key: FcBlock::new(pb, "qv_att.key", region_dim, joint),
            gate: pb.matrix("qv_att.gate", 1, joint),
            value: FcBlock::new(pb, "qv_att.value", region_dim, attended),
        }
    }

    pub fn attended_dim(&self) -> usize {
        self.value.output
    }

    pub fn attend(&self, graph: &mut Graph, params: &ParamStore, image: &[NodeId], q: NodeId) -> Result<AttendedNodes> {
        let fq = self.query.apply(graph, params, q)?;
        let w = params.node(graph, self.gate);
        let mut regions = Vec::with_capacity(image.len());
        let mut gates = Vec::with_capacity(image.len());
        for &v in image {
            let fk = self.key.apply(graph, params, v)?;
            let joint = graph.mul(fq, fk)?;
            let logit = graph.matvec(w, joint)?;
            let gate = graph.sigmoid(logit)?;
            let fv = self.value.apply(graph, params, v)?;
            regions.push(graph.mul(gate, fv)?);
            gates.push(gate);
        }
        Ok(AttendedNodes { regions, gates })
    }
}

/// `v̄^q = Σ_k v^q_k`
pub fn pool_regions(graph: &mut Graph, regions: &[NodeId]) -> Result<NodeId> {
    if regions.is_empty() {
        return Err(Error::InvalidArgument("pooling an empty region set".into()));
    }
    let stacked = graph.stack(regions)?;
    graph.sum(stacked, Some(0))
}
