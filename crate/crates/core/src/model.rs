//! The assembled joint model and its per-example forward, selection and update.

use crate::autograd::{Graph, NodeId, Tensor};
use crate::caption_embed::CaptionEmbedder;
use crate::captioner::{CaptionDecoder, DecodeMode, GeneratedCaption};
use crate::encoders::{QuestionEncoder, QuestionVisualAttention};
use crate::error::{Error, Result};
use crate::microworld::{BOS, EOS};
use crate::nn::{ParamBuilder, ParamGrads, ParamStore};
use crate::selector::{feature_gradients, joint_loss, select_caption, SelectionConfig, SelectionOutcome};
use crate::vqa_head::{vqa_loss, AnswerScores, SoftLabels, VqaHead};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub answers: usize,
    pub region_dim: usize,
    pub word_dim: usize,
    pub question_hidden: usize,
    pub joint: usize,
    pub attended: usize,
    pub caption_hidden: usize,
    pub caption_feature: usize,
    pub decoder_hidden: usize,
}

impl ModelDims {
    /// Every width set to `hidden`.
    pub fn uniform(vocab: usize, answers: usize, region_dim: usize, hidden: usize) -> Self {
        Self {
            vocab,
            answers,
            region_dim,
            word_dim: hidden,
            question_hidden: hidden,
            joint: hidden,
            attended: hidden,
            caption_hidden: hidden,
            caption_feature: hidden,
            decoder_hidden: hidden,
        }
    }

    pub fn as_vec(&self) -> Vec<usize> {
        vec![
            self.vocab,
            self.answers,
            self.region_dim,
            self.word_dim,
            self.question_hidden,
            self.joint,
            self.attended,
            self.caption_hidden,
            self.caption_feature,
            self.decoder_hidden,
        ]
    }

    pub fn from_slice(v: &[usize]) -> Result<Self> {
        match *v {
            [vocab, answers, region_dim, word_dim, question_hidden, joint, attended, caption_hidden, caption_feature, decoder_hidden] => {
                Ok(Self {
                    vocab,
                    answers,
                    region_dim,
                    word_dim,
                    question_hidden,
                    joint,
                    attended,
                    caption_hidden,
                    caption_feature,
                    decoder_hidden,
                })
            }
            _ => Err(Error::Checkpoint(format!("expected 10 dimensions, found {}", v.len()))),
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "vocab={} answers={} region_dim={} word_dim={} question_hidden={} joint={} attended={} caption_hidden={} caption_feature={} decoder_hidden={}",
            self.vocab,
            self.answers,
            self.region_dim,
            self.word_dim,
            self.question_hidden,
            self.joint,
            self.attended,
            self.caption_hidden,
            self.caption_feature,
            self.decoder_hidden
        )
    }
}

/// Captions fed to the caption-embedding module.
#[derive(Clone, Copy, Debug)]
pub enum CaptionInput<'a> {
    Captions(&'a [Vec<usize>]),
    /// `c` forced to the zero vector.
    Zeroed,
}

/// One image-question pair.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub features: &'a [Vec<f64>],
    pub question: &'a [usize],
    pub captions: CaptionInput<'a>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    /// Route the caption module and the VQA attention through separate identity
    /// nodes so the VQA gradient can be probed on the attention path alone.
    pub detach_caption_path: bool,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub question: NodeId,
    pub vq: Vec<NodeId>,
    /// Nodes through which the VQA attention reads `V^q` (equal to `vq` unless detached).
    pub vqa_branch: Vec<NodeId>,
    pub caption: NodeId,
    pub scores: NodeId,
}

/// Result of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub vqa_loss: f64,
    /// Loss of the selected caption, 0 when infeasible.
    pub caption_loss: f64,
    pub outcome: SelectionOutcome,
    pub products: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct JointModel {
    pub dims: ModelDims,
    pub question: QuestionEncoder,
    pub attention: QuestionVisualAttention,
    pub caption: CaptionEmbedder,
    pub vqa: VqaHead,
    pub decoder: CaptionDecoder,
}

impl JointModel {
    /// Builds the module layout and a freshly initialized parameter store.
    pub fn new(dims: ModelDims, seed: u64) -> (Self, ParamStore) {
        let mut pb = ParamBuilder::new(seed);
        let d = &dims;
        let question = QuestionEncoder::new(&mut pb, d.vocab, d.word_dim, d.question_hidden);
        let attention = QuestionVisualAttention::new(&mut pb, d.question_hidden, d.region_dim, d.joint, d.attended);
        let caption = CaptionEmbedder::new(&mut pb, d.vocab, d.word_dim, d.attended, d.caption_hidden, d.caption_feature);
        let vqa = VqaHead::new(&mut pb, d.caption_feature, d.attended, d.joint, d.question_hidden, d.answers);
        let decoder = CaptionDecoder::new(&mut pb, d.vocab, d.word_dim, d.attended, d.decoder_hidden, d.decoder_hidden, BOS, EOS);
        let model = Self {
            dims,
            question,
            attention,
            caption,
            vqa,
            decoder,
        };
        (model, pb.finish())
    }

    fn check_image(&self, features: &[Vec<f64>]) -> Result<()> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("image has no regions".into()));
        }
        match features.iter().find(|f| f.len() != self.dims.region_dim) {
            Some(f) => Err(Error::shape("image", &[&[f.len()], &[self.dims.region_dim]])),
            None => Ok(()),
        }
    }

    /// Question encoding and question-attended regions, with image features as constants.
    pub fn encode(&self, graph: &mut Graph, params: &ParamStore, features: &[Vec<f64>], question: &[usize]) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_image(features)?;
        let image: Vec<NodeId> = features.iter().map(|f| graph.constant(Tensor::vector(f.clone()))).collect();
        let q = self.question.encode(graph, params, question)?;
        let att = self.attention.attend(graph, params, &image, q)?;
        Ok((q, att.regions))
    }

    /// Everything downstream of `V^q`: caption embedding, caption-visual attention, answer scores.
    pub fn head(
        &self,
        graph: &mut Graph,
        params: &ParamStore,
        q: NodeId,
        vq: &[NodeId],
        captions: CaptionInput<'_>,
        opts: ForwardOptions,
    ) -> Result<Forward> {
        let (cap_branch, vqa_branch) = if opts.detach_caption_path {
            let a = vq.iter().map(|&v| graph.scale(v, 1.0)).collect::<Result<Vec<_>>>()?;
            let b = vq.iter().map(|&v| graph.scale(v, 1.0)).collect::<Result<Vec<_>>>()?;
            (a, b)
        } else {
            (vq.to_vec(), vq.to_vec())
        };
        let c = match captions {
            CaptionInput::Captions(list) => self.caption.embed(graph, params, list, &cap_branch)?.fused,
            CaptionInput::Zeroed => graph.constant(Tensor::zeros(&[self.dims.caption_feature])),
        };
        let (_, vqc) = self.vqa.caption_visual_attention(graph, params, c, &vqa_branch)?;
        let scores = self.vqa.predict_answers(graph, params, q, vqc, c)?;
        Ok(Forward {
            question: q,
            vq: vq.to_vec(),
            vqa_branch,
            caption: c,
            scores,
        })
    }

    pub fn forward(&self, graph: &mut Graph, params: &ParamStore, ex: &Example<'_>, opts: ForwardOptions) -> Result<Forward> {
        let (q, vq) = self.encode(graph, params, ex.features, ex.question)?;
        self.head(graph, params, q, &vq, ex.captions, opts)
    }

    pub fn predict(&self, params: &ParamStore, ex: &Example<'_>) -> Result<AnswerScores> {
        let mut graph = Graph::new();
        let fwd = self.forward(&mut graph, params, ex, ForwardOptions::default())?;
        Ok(AnswerScores(graph.value(fwd.scores).data().to_vec()))
    }

    /// Question-attended region vectors for one pair.
    pub fn attended_regions(&self, params: &ParamStore, features: &[Vec<f64>], question: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut graph = Graph::new();
        let (_, vq) = self.encode(&mut graph, params, features, question)?;
        Ok(vq.iter().map(|&v| graph.value(v).data().to_vec()).collect())
    }

    pub fn generate_caption(&self, params: &ParamStore, features: &[Vec<f64>], question: &[usize], mode: DecodeMode) -> Result<GeneratedCaption> {
        let vq = self.attended_regions(params, features, question)?;
        self.decoder.generate(params, &vq, mode)
    }

    /// Teacher-forced NLL of an unframed caption given the pair's attended regions.
    pub fn caption_nll(&self, params: &ParamStore, features: &[Vec<f64>], question: &[usize], words: &[usize]) -> Result<f64> {
        let mut graph = Graph::new();
        let (_, vq) = self.encode(&mut graph, params, features, question)?;
        let ctx = self.decoder.context(&mut graph, &vq)?;
        let nll = self.decoder.caption_nll(&mut graph, params, &ctx, &self.decoder.frame(words))?;
        Ok(graph.value(nll).item())
    }

    /// `L_vqa` as a function of the attended regions alone (`V^q` supplied as values).
    pub fn vqa_loss_at(
        &self,
        params: &ParamStore,
        question: &[usize],
        vq: &[Vec<f64>],
        captions: CaptionInput<'_>,
        labels: &SoftLabels,
    ) -> Result<f64> {
        let mut graph = Graph::new();
        let q = self.question.encode(&mut graph, params, question)?;
        let nodes: Vec<NodeId> = vq.iter().map(|v| graph.input(Tensor::vector(v.clone()))).collect();
        let fwd = self.head(&mut graph, params, q, &nodes, captions, ForwardOptions::default())?;
        let loss = vqa_loss(&mut graph, fwd.scores, labels)?;
        Ok(graph.value(loss).item())
    }

    /// Forward, per-candidate selection and joint-loss backward for one example.
    /// Parameter gradients are added into `grads`.
    #[allow(clippy::too_many_arguments)]
    pub fn train_example(
        &self,
        params: &ParamStore,
        ex: &Example<'_>,
        labels: &SoftLabels,
        supervision: &[Vec<usize>],
        selection: SelectionConfig,
        opts: ForwardOptions,
        grads: &mut ParamGrads,
    ) -> Result<StepStats> {
        let mut graph = Graph::new();
        let fwd = self.forward(&mut graph, params, ex, opts)?;
        let l_vqa = vqa_loss(&mut graph, fwd.scores, labels)?;
        let ctx = self.decoder.context(&mut graph, &fwd.vq)?;
        let l_caps = supervision
            .iter()
            .map(|c| self.decoder.caption_nll(&mut graph, params, &ctx, &self.decoder.frame(c)))
            .collect::<Result<Vec<_>>>()?;

        let (outcome, products) = if l_caps.is_empty() {
            (SelectionOutcome::Infeasible, Vec::new())
        } else {
            let probes = if opts.detach_caption_path { &fwd.vqa_branch } else { &fwd.vq };
            let g_vqa = feature_gradients(&graph, l_vqa, probes)?;
            let g_caps = l_caps
                .iter()
                .map(|&l| feature_gradients(&graph, l, &fwd.vq))
                .collect::<Result<Vec<_>>>()?;
            let products = crate::selector::candidate_products(&g_vqa, &g_caps)?;
            (select_caption(&g_vqa, &g_caps, selection)?, products)
        };
        let total = joint_loss(&mut graph, l_vqa, &l_caps, outcome)?;
        let map = graph.backward(total)?;
        grads.accumulate(&graph, &map);
        Ok(StepStats {
            vqa_loss: graph.value(l_vqa).item(),
            caption_loss: outcome.index().map_or(0.0, |j| graph.value(l_caps[j]).item()),
            outcome,
            products,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::GradCheckOptions;
    use crate::nn::grad_check_model;
    use crate::oracle;
    use crate::selector::inner_product;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (JointModel, ParamStore) {
        tiny_seeded(99)
    }

    fn tiny_seeded(seed: u64) -> (JointModel, ParamStore) {
        let dims = ModelDims {
            vocab: 9,
            answers: 4,
            region_dim: 3,
            word_dim: 3,
            question_hidden: 3,
            joint: 3,
            attended: 3,
            caption_hidden: 2,
            caption_feature: 3,
            decoder_hidden: 3,
        };
        let (m, mut p) = JointModel::new(dims, 4);
        oracle::randomize(&mut p, seed, 0.6);
        (m, p)
    }

    fn image(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
        (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn dims_round_trip() {
        let d = ModelDims::uniform(30, 13, 32, 16);
        assert_eq!(ModelDims::from_slice(&d.as_vec()).unwrap(), d);
        assert!(ModelDims::from_slice(&[1, 2]).is_err());
    }

    #[test]
    fn joint_loss_gradient_matches_finite_differences() {
        let (m, p) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = image(&mut rng, 3, 3);
        let question = [3, 5, 4];
        let captions = vec![vec![3, 6], vec![7]];
        let labels = SoftLabels::new(vec![1.0, 0.0, 1.0 / 3.0, 0.0]).unwrap();
        let inputs: Vec<Tensor> = img.iter().cloned().map(Tensor::vector).collect();
        let report = grad_check_model(
            &p,
            &inputs,
            |g, params, ins| {
                let q = m.question.encode(g, params, &question)?;
                let att = m.attention.attend(g, params, ins, q)?;
                let fwd = m.head(g, params, q, &att.regions, CaptionInput::Captions(&captions), ForwardOptions::default())?;
                let l_vqa = vqa_loss(g, fwd.scores, &labels)?;
                let ctx = m.decoder.context(g, &fwd.vq)?;
                let l_cap = m.decoder.caption_nll(g, params, &ctx, &m.decoder.frame(&captions[1]))?;
                let sel = SelectionOutcome::Selected {
                    index: 0,
                    inner_product: 1.0,
                };
                joint_loss(g, l_vqa, &[l_cap], sel)
            },
            GradCheckOptions {
                tolerance: 1e-3,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn zero_caption_leg_matches_zeroed_caption_module() {
        let (m, mut p) = tiny();
        for id in [m.vqa.out_caption.w, m.vqa.out_caption.b, m.vqa.att_caption.w, m.vqa.att_caption.b] {
            p.get_mut(id).data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = image(&mut rng, 4, 3);
        let caps = vec![vec![4, 5, 6]];
        let a = m
            .predict(&p, &Example { features: &img, question: &[3, 4], captions: CaptionInput::Captions(&caps) })
            .unwrap();
        let b = m
            .predict(&p, &Example { features: &img, question: &[3, 4], captions: CaptionInput::Zeroed })
            .unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn detached_forward_has_identical_values() {
        let (m, p) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = image(&mut rng, 3, 3);
        let caps = vec![vec![4, 5], vec![6, 7, 8]];
        let ex = Example { features: &img, question: &[3], captions: CaptionInput::Captions(&caps) };
        let mut g1 = Graph::new();
        let a = m.forward(&mut g1, &p, &ex, ForwardOptions::default()).unwrap();
        let mut g2 = Graph::new();
        let b = m.forward(&mut g2, &p, &ex, ForwardOptions { detach_caption_path: true }).unwrap();
        assert_eq!(g1.value(a.scores), g2.value(b.scores));
    }

    #[test]
    fn train_example_selection_and_shared_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let caps = vec![vec![3, 6], vec![7, 4, 4], vec![5]];
        let mut checked = 0;
        for seed in 0..30 {
            let (m, p) = tiny_seeded(seed);
            let labels = SoftLabels::new((0..4).map(|_| f64::from(rng.random_range(0..4u8)) / 3.0).map(|v| v.min(1.0)).collect()).unwrap();
            let img = image(&mut rng, 3, 3);
            let question = [3, 8];
            let ex = Example { features: &img, question: &question, captions: CaptionInput::Captions(&caps) };
            let mut grads = p.zero_grads();
            let stats = m
                .train_example(&p, &ex, &labels, &caps, SelectionConfig::default(), ForwardOptions::default(), &mut grads)
                .unwrap();
            assert_eq!(stats.products.len(), 3);
            let best = stats.products.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(stats.outcome.is_feasible(), best > 0.0);
            let Some(j) = stats.outcome.index() else { continue };

            // Directional derivative of L_vqa at V^q along −(g_vqa + g_cap).
            let mut g = Graph::new();
            let fwd = m.forward(&mut g, &p, &ex, ForwardOptions::default()).unwrap();
            let l_vqa = vqa_loss(&mut g, fwd.scores, &labels).unwrap();
            let ctx = m.decoder.context(&mut g, &fwd.vq).unwrap();
            let l_cap = m.decoder.caption_nll(&mut g, &p, &ctx, &m.decoder.frame(&caps[j])).unwrap();
            let gv = feature_gradients(&g, l_vqa, &fwd.vq).unwrap();
            let gc = feature_gradients(&g, l_cap, &fwd.vq).unwrap();
            let ip = inner_product(&gv, &gc).unwrap();
            assert!((ip - stats.products[j]).abs() < 1e-12);
            let dir = gv.add(&gc).unwrap().scaled(-1.0);
            let vq: Vec<Vec<f64>> = fwd.vq.iter().map(|&v| g.value(v).data().to_vec()).collect();
            let moved = |h: f64| -> Vec<Vec<f64>> {
                vq.iter()
                    .zip(dir.regions())
                    .map(|(v, d)| v.iter().zip(d.data()).map(|(a, b)| a + h * b).collect())
                    .collect()
            };
            let h = 1e-6;
            let cap_in = CaptionInput::Captions(&caps);
            let numeric = (m.vqa_loss_at(&p, &question, &moved(h), cap_in, &labels).unwrap()
                - m.vqa_loss_at(&p, &question, &moved(-h), cap_in, &labels).unwrap())
                / (2.0 * h);
            let analytic = -(gv.norm_sq() + ip);
            assert!(numeric < 0.0);
            assert!(crate::autograd::relative_error(numeric, analytic) < 1e-3, "{numeric} vs {analytic}");
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn infeasible_step_uses_vqa_loss_only() {
        let (m, p) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = image(&mut rng, 3, 3);
        let caps = vec![vec![3, 6]];
        let labels = SoftLabels::new(vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let ex = Example { features: &img, question: &[4], captions: CaptionInput::Captions(&caps) };
        let strict = SelectionConfig { xi: f64::INFINITY };
        let mut grads = p.zero_grads();
        let stats = m.train_example(&p, &ex, &labels, &caps, strict, ForwardOptions::default(), &mut grads).unwrap();
        assert_eq!(stats.outcome, SelectionOutcome::Infeasible);
        assert_eq!(stats.caption_loss, 0.0);
        // Decoder output layer receives no gradient without caption loss.
        assert!(grads.get(m.decoder.out_w).data().iter().all(|&v| v == 0.0));
        let mut g = Graph::new();
        let fwd = m.forward(&mut g, &p, &ex, ForwardOptions::default()).unwrap();
        let l = vqa_loss(&mut g, fwd.scores, &labels).unwrap();
        let map = g.backward(l).unwrap();
        let mut direct = p.zero_grads();
        direct.accumulate(&g, &map);
        assert_eq!(direct, grads);
    }

    #[test]
    fn rejects_bad_images() {
        let (m, p) = tiny();
        let ex = Example { features: &[vec![0.0; 2]], question: &[3], captions: CaptionInput::Zeroed };
        assert!(m.predict(&p, &ex).is_err());
        let ex = Example { features: &[], question: &[3], captions: CaptionInput::Zeroed };
        assert!(m.predict(&p, &ex).is_err());
    }
}
