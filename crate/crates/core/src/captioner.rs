//! Two-layer top-down attention caption decoder over question-attended regions.
//!
//! ```text
//! h_att'  = GRU_att([W[y_{t-1}]; Σ_k v^q_k; h_lang], h_att)
//! β       = softmax_k(v^q_k · (W_k h_att'))
//! h_lang' = GRU_lang([Σ_k β_k v^q_k; h_att'], h_lang)
//! p(y_t)  = softmax(W_o h_lang' + b_o)
//! ```

use std::cmp::Ordering;

use crate::autograd::{Graph, NodeId, Tensor};
use crate::encoders::pool_regions;
use crate::error::{Error, Result};
use crate::nn::{EmbeddingTable, GruCell, ParamBuilder, ParamId, ParamStore};

/// Longest generated caption, end marker included.
pub const MAX_CAPTION_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// Recurrent state of both decoder layers.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h_att: NodeId,
    pub h_lang: NodeId,
}

/// Per-image quantities shared by every decoding step.
#[derive(Clone, Debug)]
pub struct DecoderContext {
    pub regions: NodeId,
    pub pooled: NodeId,
}

/// A decoded caption: tokens after the begin marker (end marker included when reached)
/// and the summed log-probability of those tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCaption {
    pub tokens: Vec<usize>,
    pub logprob: f64,
}

impl GeneratedCaption {
    /// Tokens with the end marker stripped.
    pub fn words(&self, eos: usize) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == eos => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaptionDecoder {
    pub embed: EmbeddingTable,
    pub att_gru: GruCell,
    pub att_key: ParamId,
    pub lang_gru: GruCell,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub bos: usize,
    pub eos: usize,
    pub attended: usize,
}

impl CaptionDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        vocab: usize,
        word_dim: usize,
        attended: usize,
        att_hidden: usize,
        lang_hidden: usize,
        bos: usize,
        eos: usize,
    ) -> Self {
        Self {
            embed: EmbeddingTable::new(pb, "decoder.embed", vocab, word_dim),
            att_gru: GruCell::new(pb, "decoder.att_gru", word_dim + attended + lang_hidden, att_hidden),
            att_key: pb.matrix("decoder.att_key", attended, att_hidden),
            lang_gru: GruCell::new(pb, "decoder.lang_gru", attended + att_hidden, lang_hidden),
            out_w: pb.matrix("decoder.out.w", vocab, lang_hidden),
            out_b: pb.bias("decoder.out.b", vocab),
            bos,
            eos,
            attended,
        }
    }

    pub fn vocab(&self) -> usize {
        self.embed.vocab
    }

    /// Zeroes the output projection so every step predicts the uniform distribution.
    pub fn zero_output(&self, params: &mut ParamStore) {
        params.get_mut(self.out_w).data_mut().fill(0.0);
        params.get_mut(self.out_b).data_mut().fill(0.0);
    }

    /// `[bos, words..., eos]`
    pub fn frame(&self, words: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(words.len() + 2);
        out.push(self.bos);
        out.extend_from_slice(words);
        out.push(self.eos);
        out
    }

    pub fn context(&self, graph: &mut Graph, vq: &[NodeId]) -> Result<DecoderContext> {
        if vq.is_empty() {
            return Err(Error::InvalidArgument("no regions to attend".into()));
        }
        if let Some(&bad) = vq.iter().find(|&&v| graph.value(v).shape() != [self.attended]) {
            return Err(Error::shape("decoder", &[graph.value(bad).shape(), &[self.attended]]));
        }
        Ok(DecoderContext {
            regions: graph.stack(vq)?,
            pooled: pool_regions(graph, vq)?,
        })
    }

    pub fn initial_state(&self, graph: &mut Graph) -> DecoderState {
        DecoderState {
            h_att: self.att_gru.zero_state(graph),
            h_lang: self.lang_gru.zero_state(graph),
        }
    }

    /// One step of both layers; returns the new state and the distribution over the vocabulary.
    pub fn decode_step(
        &self,
        graph: &mut Graph,
        params: &ParamStore,
        ctx: &DecoderContext,
        state: DecoderState,
        prev: usize,
    ) -> Result<(DecoderState, NodeId)> {
        let word = self.embed.embed(graph, params, &[prev])?[0];
        let att_in = graph.concat(&[word, ctx.pooled, state.h_lang])?;
        let h_att = self.att_gru.step(graph, params, att_in, state.h_att)?;
        let wk = params.node(graph, self.att_key);
        let key = graph.matvec(wk, h_att)?;
        let scores = graph.matvec(ctx.regions, key)?;
        let beta = graph.softmax(scores, 0)?;
        let attended = graph.matvec_t(ctx.regions, beta)?;
        let lang_in = graph.concat(&[attended, h_att])?;
        let h_lang = self.lang_gru.step(graph, params, lang_in, state.h_lang)?;
        let w = params.node(graph, self.out_w);
        let b = params.node(graph, self.out_b);
        let wh = graph.matvec(w, h_lang)?;
        let logits = graph.add(wh, b)?;
        let probs = graph.softmax(logits, 0)?;
        Ok((DecoderState { h_att, h_lang }, probs))
    }

    /// Teacher-forced `−Σ_t ln p(y_t | y_{<t})` over a framed caption.
    pub fn caption_nll(&self, graph: &mut Graph, params: &ParamStore, ctx: &DecoderContext, caption: &[usize]) -> Result<NodeId> {
        if caption.len() < 2 {
            return Err(Error::InvalidArgument("caption has no tokens to predict".into()));
        }
        if caption[0] != self.bos || caption[caption.len() - 1] != self.eos {
            return Err(Error::InvalidArgument("caption is not framed by begin and end markers".into()));
        }
        self.embed.check(caption)?;
        let mut state = self.initial_state(graph);
        let mut terms = Vec::with_capacity(caption.len() - 1);
        for pair in caption.windows(2) {
            let (next, probs) = self.decode_step(graph, params, ctx, state, pair[0])?;
            state = next;
            let p = graph.slice(probs, pair[1], 1)?;
            terms.push(graph.log_prob(p)?);
        }
        let total = graph.add_all(&terms)?;
        let total = graph.sum(total, None)?;
        graph.scale(total, -1.0)
    }

    /// Greedy or beam decoding from regions given as plain vectors. Beam search
    /// also scores the greedy path and keeps it if the beam pruned it away, so a
    /// beam result never has lower log-probability than greedy.
    pub fn generate(&self, params: &ParamStore, regions: &[Vec<f64>], mode: DecodeMode) -> Result<GeneratedCaption> {
        let mut graph = Graph::new();
        let vq: Vec<NodeId> = regions.iter().map(|r| graph.constant(Tensor::vector(r.clone()))).collect();
        let ctx = self.context(&mut graph, &vq)?;
        match mode {
            DecodeMode::Greedy => self.greedy(&mut graph, params, &ctx),
            DecodeMode::Beam(0) => Err(Error::InvalidArgument("beam width must be at least 1".into())),
            DecodeMode::Beam(width) => {
                let beam = self.beam(&mut graph, params, &ctx, width)?;
                let greedy = self.greedy(&mut graph, params, &ctx)?;
                Ok(if greedy.logprob > beam.logprob { greedy } else { beam })
            }
        }
    }

    fn greedy(&self, graph: &mut Graph, params: &ParamStore, ctx: &DecoderContext) -> Result<GeneratedCaption> {
        let mut state = self.initial_state(graph);
        let mut prev = self.bos;
        let mut out = GeneratedCaption {
            tokens: Vec::new(),
            logprob: 0.0,
        };
        while out.tokens.len() < MAX_CAPTION_LEN {
            let (next, probs) = self.decode_step(graph, params, ctx, state, prev)?;
            state = next;
            let p = graph.value(probs).data();
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            out.logprob += p[best].ln();
            out.tokens.push(best);
            if best == self.eos {
                break;
            }
            prev = best;
        }
        Ok(out)
    }

    fn beam(&self, graph: &mut Graph, params: &ParamStore, ctx: &DecoderContext, width: usize) -> Result<GeneratedCaption> {
        struct Hyp {
            tokens: Vec<usize>,
            logprob: f64,
            state: DecoderState,
            done: bool,
        }
        let rank = |a: &Hyp, b: &Hyp| -> Ordering {
            b.logprob
                .partial_cmp(&a.logprob)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        };
        let mut beams = vec![Hyp {
            tokens: Vec::new(),
            logprob: 0.0,
            state: self.initial_state(graph),
            done: false,
        }];
        for _ in 0..MAX_CAPTION_LEN {
            if beams.iter().all(|h| h.done) {
                break;
            }
            let mut pool = Vec::new();
            for hyp in beams {
                if hyp.done {
                    pool.push(hyp);
                    continue;
                }
                let prev = hyp.tokens.last().copied().unwrap_or(self.bos);
                let (state, probs) = self.decode_step(graph, params, ctx, hyp.state, prev)?;
                for (tok, &p) in graph.value(probs).data().iter().enumerate() {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(tok);
                    pool.push(Hyp {
                        done: tok == self.eos || tokens.len() == MAX_CAPTION_LEN,
                        tokens,
                        logprob: hyp.logprob + p.ln(),
                        state,
                    });
                }
            }
            pool.sort_by(rank);
            pool.truncate(width);
            beams = pool;
        }
        let best = beams.into_iter().min_by(rank).expect("beam is never empty");
        Ok(GeneratedCaption {
            tokens: best.tokens,
            logprob: best.logprob,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::GradCheckOptions;
    use crate::nn::grad_check_model;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const VOCAB: usize = 7;

    fn fixture(seed: u64, scale: f64) -> (CaptionDecoder, ParamStore) {
        let mut pb = ParamBuilder::new(seed);
        let dec = CaptionDecoder::new(&mut pb, VOCAB, 3, 4, 5, 3, 0, 1);
        let mut store = pb.finish();
        oracle::randomize(&mut store, seed ^ 0x5eed, scale);
        (dec, store)
    }

    fn regions(rng: &mut ChaCha8Rng, k: usize) -> Vec<Vec<f64>> {
        (0..k).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn oracle_step(
        d: &CaptionDecoder,
        s: &ParamStore,
        vq: &[Vec<f64>],
        h_att: &[f64],
        h_lang: &[f64],
        prev: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let table = s.get(d.embed.table);
        let word = &table.data()[prev * d.embed.dim..(prev + 1) * d.embed.dim];
        let pooled: Vec<f64> = (0..4).map(|j| vq.iter().map(|v| v[j]).sum()).collect();
        let mut x = word.to_vec();
        x.extend(&pooled);
        x.extend(h_lang);
        let ha = oracle::gru(&d.att_gru, s, &x, h_att);
        let key = oracle::mv(s.get(d.att_key), &ha);
        let scores: Vec<f64> = vq.iter().map(|v| v.iter().zip(&key).map(|(a, b)| a * b).sum()).collect();
        let beta = oracle::softmax(&scores);
        let att: Vec<f64> = (0..4).map(|j| vq.iter().zip(&beta).map(|(v, b)| v[j] * b).sum()).collect();
        let mut y = att;
        y.extend(&ha);
        let hl = oracle::gru(&d.lang_gru, s, &y, h_lang);
        let p = oracle::softmax(&oracle::affine(s, d.out_w, d.out_b, &hl));
        (ha, hl, p)
    }

    #[test]
    fn step_matches_straight_line_oracle() {
        let (dec, store) = fixture(1, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vq = regions(&mut rng, 3);
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = vq.iter().map(|r| g.input(Tensor::vector(r.clone()))).collect();
        let ctx = dec.context(&mut g, &nodes).unwrap();
        let mut state = dec.initial_state(&mut g);
        let (mut ha, mut hl) = (vec![0.0; 5], vec![0.0; 3]);
        for prev in [0, 4, 2, 6] {
            let (next, probs) = dec.decode_step(&mut g, &store, &ctx, state, prev).unwrap();
            state = next;
            let (a, l, p) = oracle_step(&dec, &store, &vq, &ha, &hl, prev);
            for (x, y) in g.value(probs).data().iter().zip(&p) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in g.value(state.h_lang).data().iter().zip(&l) {
                assert!((x - y).abs() < 1e-12);
            }
            assert!((g.value(probs).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            ha = a;
            hl = l;
        }
    }

    #[test]
    fn zero_output_layer_is_uniform_and_nll_is_length_times_log_vocab() {
        let (dec, mut store) = fixture(3, 0.8);
        dec.zero_output(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vq = regions(&mut rng, 4);
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = vq.iter().map(|r| g.input(Tensor::vector(r.clone()))).collect();
        let ctx = dec.context(&mut g, &nodes).unwrap();
        let state = dec.initial_state(&mut g);
        let (_, probs) = dec.decode_step(&mut g, &store, &ctx, state, 0).unwrap();
        for &p in g.value(probs).data() {
            assert!((p - 1.0 / VOCAB as f64).abs() < 1e-15);
        }
        let caption = dec.frame(&[3, 5, 2, 2]);
        let nll = dec.caption_nll(&mut g, &store, &ctx, &caption).unwrap();
        let want = 5.0 * (VOCAB as f64).ln();
        assert!((g.value(nll).item() - want).abs() < 1e-9);
    }

    #[test]
    fn nll_is_sum_of_step_terms() {
        let (dec, store) = fixture(5, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vq = regions(&mut rng, 3);
        let caption = dec.frame(&[2, 6, 3]);
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = vq.iter().map(|r| g.input(Tensor::vector(r.clone()))).collect();
        let ctx = dec.context(&mut g, &nodes).unwrap();
        let nll = dec.caption_nll(&mut g, &store, &ctx, &caption).unwrap();
        let mut state = dec.initial_state(&mut g);
        let mut sum = 0.0;
        for w in caption.windows(2) {
            let (next, probs) = dec.decode_step(&mut g, &store, &ctx, state, w[0]).unwrap();
            state = next;
            sum -= g.value(probs).data()[w[1]].ln();
        }
        assert!(g.value(nll).item() >= 0.0);
        assert!((g.value(nll).item() - sum).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_bad_captions() {
        let (dec, store) = fixture(7, 0.3);
        let mut g = Graph::new();
        let v = g.input(Tensor::vector(vec![0.1; 4]));
        let ctx = dec.context(&mut g, &[v]).unwrap();
        assert!(dec.caption_nll(&mut g, &store, &ctx, &[0]).is_err());
        assert!(dec.caption_nll(&mut g, &store, &ctx, &[2, 3, 1]).is_err());
        assert!(dec.caption_nll(&mut g, &store, &ctx, &[0, 3, 2]).is_err());
        assert!(matches!(
            dec.caption_nll(&mut g, &store, &ctx, &[0, 9, 1]),
            Err(Error::TokenOutOfRange { token: 9, .. })
        ));
        let wrong = g.input(Tensor::vector(vec![0.1; 3]));
        assert!(dec.context(&mut g, &[wrong]).is_err());
        assert!(dec.context(&mut g, &[]).is_err());
        assert!(dec.generate(&store, &[vec![0.0; 4]], DecodeMode::Beam(0)).is_err());
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let (dec, store) = fixture(8, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs: Vec<Tensor> = regions(&mut rng, 3).into_iter().map(Tensor::vector).collect();
        let caption = dec.frame(&[4, 2]);
        let report = grad_check_model(
            &store,
            &inputs,
            |g, p, ins| {
                let ctx = dec.context(g, ins)?;
                dec.caption_nll(g, p, &ctx, &caption)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn beam_one_equals_greedy_and_wider_beams_score_no_worse() {
        let mut worse = 0;
        for seed in 0..100 {
            let (dec, store) = fixture(100 + seed, 1.5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vq = regions(&mut rng, 3);
            let greedy = dec.generate(&store, &vq, DecodeMode::Greedy).unwrap();
            let b1 = dec.generate(&store, &vq, DecodeMode::Beam(1)).unwrap();
            let b3 = dec.generate(&store, &vq, DecodeMode::Beam(3)).unwrap();
            assert_eq!(greedy.tokens, b1.tokens);
            assert!(greedy.tokens.len() <= MAX_CAPTION_LEN);
            assert!(b3.tokens.len() <= MAX_CAPTION_LEN);
            if b3.logprob < greedy.logprob - 1e-12 {
                worse += 1;
            }
        }
        assert_eq!(worse, 0);
    }

    #[test]
    fn generated_caption_has_finite_teacher_forced_loss() {
        let (dec, store) = fixture(11, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let vq = regions(&mut rng, 2);
        let gen = dec.generate(&store, &vq, DecodeMode::Greedy).unwrap();
        let words = gen.words(dec.eos).to_vec();
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = vq.iter().map(|r| g.constant(Tensor::vector(r.clone()))).collect();
        let ctx = dec.context(&mut g, &nodes).unwrap();
        let nll = dec.caption_nll(&mut g, &store, &ctx, &dec.frame(&words)).unwrap();
        assert!(g.value(nll).item().is_finite());
        if gen.tokens.last() == Some(&dec.eos) {
            assert!((g.value(nll).item() + gen.logprob).abs() < 1e-9);
        }
    }
}
