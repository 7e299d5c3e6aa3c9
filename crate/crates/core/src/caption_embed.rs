//! Caption embedding: a Word GRU over raw embeddings produces per-word relevance
//! gates from the pooled question-attended image; a Caption GRU reads the gated
//! embeddings; an elementwise max fuses the captions into one feature.
//!
//! ```text
//! h1_t = GRU1(W_e[w_t], h1_{t-1})
//! α_t  = σ(h1_t ∘ f(Σ_k v^q_k))
//! h2_t = GRU2(α_t ∘ W_e[w_t], h2_{t-1})
//! c_i  = f(h2_T),   c = max_i c_i
//! ```
//!
//! The gate is a vector in the Word-GRU hidden space and multiplies the word
//! embedding elementwise, so the embedding width equals the Word-GRU width.
//! The same `W_e` feeds both GRUs.

use crate::autograd::{Graph, NodeId};
use crate::encoders::pool_regions;
use crate::error::{Error, Result};
use crate::nn::{EmbeddingTable, FcBlock, GruCell, ParamBuilder, ParamStore};

#[derive(Clone, Debug)]
pub struct CaptionEmbedder {
    pub embed: EmbeddingTable,
    pub word_gru: GruCell,
    pub context: FcBlock,
    pub caption_gru: GruCell,
    pub output: FcBlock,
}

/// Graph nodes produced by [`CaptionEmbedder::embed`].
#[derive(Clone, Debug)]
pub struct CaptionEmbedding {
    /// Fused caption feature `c`.
    pub fused: NodeId,
    /// Per-caption features `c_i`.
    pub per_caption: Vec<NodeId>,
    /// Word gates `α_{i,t}`.
    pub gates: Vec<Vec<NodeId>>,
}

impl CaptionEmbedder {
    pub fn new(
        pb: &mut ParamBuilder,
        vocab: usize,
        word_dim: usize,
        attended: usize,
        caption_hidden: usize,
        feature: usize,
    ) -> Self {
        Self {
            embed: EmbeddingTable::new(pb, "caption.embed", vocab, word_dim),
            word_gru: GruCell::new(pb, "caption.word_gru", word_dim, word_dim),
            context: FcBlock::new(pb, "caption.context", attended, word_dim),
            caption_gru: GruCell::new(pb, "caption.caption_gru", word_dim, caption_hidden),
            output: FcBlock::new(pb, "caption.output", caption_hidden, feature),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.output.output
    }

    /// `f(v̄^q)`, shared by every caption of one example.
    pub fn gate_context(&self, graph: &mut Graph, params: &ParamStore, vq: &[NodeId]) -> Result<NodeId> {
        let pooled = pool_regions(graph, vq)?;
        self.context.apply(graph, params, pooled)
    }

    /// Per-word gates for one caption.
    pub fn gate_words(&self, graph: &mut Graph, params: &ParamStore, caption: &[usize], vq: &[NodeId]) -> Result<Vec<NodeId>> {
        let ctx = self.gate_context(graph, params, vq)?;
        let words = self.embed.embed(graph, params, caption)?;
        self.gates_for(graph, params, &words, ctx)
    }

    fn gates_for(&self, graph: &mut Graph, params: &ParamStore, words: &[NodeId], ctx: NodeId) -> Result<Vec<NodeId>> {
        let mut h = self.word_gru.zero_state(graph);
        let mut gates = Vec::with_capacity(words.len());
        for &w in words {
            h = self.word_gru.step(graph, params, w, h)?;
            let a = graph.mul(h, ctx)?;
            gates.push(graph.sigmoid(a)?);
        }
        Ok(gates)
    }

    /// `c_i = f(h2_T)` for one caption given its gates.
    pub fn encode_caption(&self, graph: &mut Graph, params: &ParamStore, caption: &[usize], gates: &[NodeId]) -> Result<NodeId> {
        let words = self.embed.embed(graph, params, caption)?;
        self.encode_embedded(graph, params, &words, gates)
    }

    fn encode_embedded(&self, graph: &mut Graph, params: &ParamStore, words: &[NodeId], gates: &[NodeId]) -> Result<NodeId> {
        if words.len() != gates.len() {
            return Err(Error::InvalidArgument(format!(
                "caption has {} words but {} gates",
                words.len(),
                gates.len()
            )));
        }
        if words.is_empty() {
            return Err(Error::InvalidArgument("empty caption".into()));
        }
        let mut h = self.caption_gru.zero_state(graph);
        for (&w, &a) in words.iter().zip(gates) {
            let x = graph.mul(a, w)?;
            h = self.caption_gru.step(graph, params, x, h)?;
        }
        self.output.apply(graph, params, h)
    }

    /// Gates, encodes and fuses a batch of captions.
    pub fn embed(&self, graph: &mut Graph, params: &ParamStore, captions: &[Vec<usize>], vq: &[NodeId]) -> Result<CaptionEmbedding> {
        if captions.is_empty() {
            return Err(Error::InvalidArgument("caption batch is empty".into()));
        }
        let ctx = self.gate_context(graph, params, vq)?;
        let mut per_caption = Vec::with_capacity(captions.len());
        let mut all_gates = Vec::with_capacity(captions.len());
        for caption in captions {
            if caption.is_empty() {
                return Err(Error::InvalidArgument("empty caption".into()));
            }
            let words = self.embed.embed(graph, params, caption)?;
            let gates = self.gates_for(graph, params, &words, ctx)?;
            per_caption.push(self.encode_embedded(graph, params, &words, &gates)?);
            all_gates.push(gates);
        }
        let fused = fuse_captions(graph, &per_caption)?;
        Ok(CaptionEmbedding {
            fused,
            per_caption,
            gates: all_gates,
        })
    }
}

/// `c = max_i c_i`, elementwise; a single caption passes through unchanged.
pub fn fuse_captions(graph: &mut Graph, features: &[NodeId]) -> Result<NodeId> {
    match features {
        [] => Err(Error::InvalidArgument("no caption features to fuse".into())),
        [one] => Ok(*one),
        _ => graph.max(features),
    }
}
