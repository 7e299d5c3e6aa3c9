//! Caption-attended visual attention, answer prediction and the soft-score loss.

use std::collections::{BTreeMap, HashMap};

use crate::autograd::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nn::{FcBlock, ParamBuilder, ParamStore};

/// Annotator-derived soft answer scores in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabels(Vec<f64>);

impl SoftLabels {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidArgument("soft label outside [0, 1]".into()));
        }
        Ok(Self(scores))
    }

    /// `s_j = min(count_j / 3, 1)` over the answer vocabulary; answers outside it are dropped.
    pub fn from_annotators<'a>(vocab: &AnswerVocabulary, answers: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts = vec![0usize; vocab.len()];
        for a in answers {
            if let Some(j) = vocab.index(a) {
                counts[j] += 1;
            }
        }
        Self(counts.into_iter().map(|c| (c as f64 / 3.0).min(1.0)).collect())
    }

    pub fn scores(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Sigmoid answer predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerScores(pub Vec<f64>);

impl AnswerScores {
    /// Highest-scoring index, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.0.iter().enumerate() {
            if s > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Answer string ↔ output index, built from answers that occur at least `min_count` times.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerVocabulary {
    answers: Vec<String>,
    index: HashMap<String, usize>,
    pub min_count: usize,
}

impl AnswerVocabulary {
    pub fn from_answers(answers: Vec<String>, min_count: usize) -> Self {
        let index = answers.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        Self {
            answers,
            index,
            min_count,
        }
    }

    /// Keeps answers with count ≥ `min_count`, in order of first appearance in `order`
    /// (or lexicographic order when `order` is empty).
    pub fn build<'a>(occurrences: impl IntoIterator<Item = &'a str>, min_count: usize, order: &[String]) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for a in occurrences {
            *counts.entry(a).or_default() += 1;
        }
        let keep = |a: &str| counts.get(a).copied().unwrap_or(0) >= min_count.max(1);
        let answers: Vec<String> = if order.is_empty() {
            counts.keys().filter(|a| keep(a)).map(|a| a.to_string()).collect()
        } else {
            order.iter().filter(|a| keep(a)).cloned().collect()
        };
        Self::from_answers(answers, min_count)
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn index(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, index: usize) -> &str {
        &self.answers[index]
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }
}

/// ```text
/// a^cv_i = f_s(f(c) ∘ f(v^q_i)),  α^cv = softmax_i(a^cv),  v̄^qc = Σ_i α^cv_i v^q_i
/// h = q ∘ (f(v̄^qc) + f(c)),       ŝ = σ(f(h))
/// ```
#[derive(Clone, Debug)]
pub struct VqaHead {
    pub att_caption: FcBlock,
    pub att_region: FcBlock,
    pub att_score: FcBlock,
    pub out_visual: FcBlock,
    pub out_caption: FcBlock,
    pub classifier: FcBlock,
}

impl VqaHead {
    pub fn new(pb: &mut ParamBuilder, caption_dim: usize, attended: usize, joint: usize, question: usize, answers: usize) -> Self {
        Self {
            att_caption: FcBlock::new(pb, "vqa.att_caption", caption_dim, joint),
            att_region: FcBlock::new(pb, "vqa.att_region", attended, joint),
            att_score: FcBlock::new(pb, "vqa.att_score", joint, 1),
            out_visual: FcBlock::new(pb, "vqa.out_visual", attended, question),
            out_caption: FcBlock::new(pb, "vqa.out_caption", caption_dim, question),
            classifier: FcBlock::new(pb, "vqa.classifier", question, answers),
        }
    }

    /// Returns `(α^cv, v̄^qc)`.
    pub fn caption_visual_attention(
        &self,
        graph: &mut Graph,
        params: &ParamStore,
        c: NodeId,
        vq: &[NodeId],
    ) -> Result<(NodeId, NodeId)> {
        if vq.is_empty() {
            return Err(Error::InvalidArgument("no regions to attend".into()));
        }
        let fc = self.att_caption.apply(graph, params, c)?;
        let mut scores = Vec::with_capacity(vq.len());
        for &v in vq {
            let fv = self.att_region.apply(graph, params, v)?;
            let joint = graph.mul(fc, fv)?;
            scores.push(self.att_score.apply(graph, params, joint)?);
        }
        let logits = graph.concat(&scores)?;
        let alpha = graph.softmax(logits, 0)?;
        let stacked = graph.stack(vq)?;
        let pooled = graph.matvec_t(stacked, alpha)?;
        Ok((alpha, pooled))
    }

    pub fn predict_answers(&self, graph: &mut Graph, params: &ParamStore, q: NodeId, vqc: NodeId, c: NodeId) -> Result<NodeId> {
        let fv = self.out_visual.apply(graph, params, vqc)?;
        let fc = self.out_caption.apply(graph, params, c)?;
        let sum = graph.add(fv, fc)?;
        let h = graph.mul(q, sum)?;
        let logits = self.classifier.affine(graph, params, h)?;
        graph.sigmoid(logits)
    }
}

/// `−Σ_j [s_j ln ŝ_j + (1−s_j) ln(1−ŝ_j)]`, with `ŝ` clamped into `[ε, 1−ε]`.
pub fn vqa_loss(graph: &mut Graph, predicted: NodeId, labels: &SoftLabels) -> Result<NodeId> {
    let n = graph.value(predicted).len();
    if n != labels.len() {
        return Err(Error::shape("vqa_loss", &[graph.value(predicted).shape(), &[labels.len()]]));
    }
    let s = graph.constant(Tensor::vector(labels.0.clone()));
    let one_minus_s = graph.constant(Tensor::vector(labels.0.iter().map(|v| 1.0 - v).collect()));
    let one = graph.constant(Tensor::scalar(1.0));
    let log_p = graph.log_prob(predicted)?;
    let neg = graph.scale(predicted, -1.0)?;
    let complement = graph.add(one, neg)?;
    let log_q = graph.log_prob(complement)?;
    let a = graph.mul(s, log_p)?;
    let b = graph.mul(one_minus_s, log_q)?;
    let both = graph.add(a, b)?;
    let total = graph.sum(both, None)?;
    graph.scale(total, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check, GradCheckOptions};
    use crate::nn::grad_check_model;
    use crate::oracle::{self, fc};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture(seed: u64) -> (VqaHead, ParamStore, ChaCha8Rng) {
        let mut pb = ParamBuilder::new(seed);
        let head = VqaHead::new(&mut pb, 3, 4, 5, 3, 6);
        let mut store = pb.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).rank() == 1 {
                for v in store.get_mut(id).data_mut() {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
        }
        (head, store, rng)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn attention_is_normalized_and_matches_oracle() {
        let (head, store, mut rng) = fixture(1);
        let c = rand_vec(&mut rng, 3);
        let vq: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 4)).collect();
        let mut g = Graph::new();
        let cn = g.input(Tensor::vector(c.clone()));
        let vn: Vec<NodeId> = vq.iter().map(|v| g.input(Tensor::vector(v.clone()))).collect();
        let (alpha, pooled) = head.caption_visual_attention(&mut g, &store, cn, &vn).unwrap();
        let a = g.value(alpha).data();
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let fcv = fc(&store, &head.att_caption, &c);
        let logits: Vec<f64> = vq
            .iter()
            .map(|v| {
                let fv = fc(&store, &head.att_region, v);
                let j: Vec<f64> = fcv.iter().zip(&fv).map(|(x, y)| x * y).collect();
                fc(&store, &head.att_score, &j)[0]
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let want: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
        for (x, y) in a.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        for (k, got) in g.value(pooled).data().iter().enumerate() {
            let p: f64 = (0..5).map(|i| want[i] * vq[i][k]).sum();
            assert!((got - p).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_regions_give_uniform_attention() {
        let (head, store, mut rng) = fixture(2);
        let v = rand_vec(&mut rng, 4);
        let mut g = Graph::new();
        let cn = g.input(Tensor::vector(rand_vec(&mut rng, 3)));
        let vn: Vec<NodeId> = (0..4).map(|_| g.input(Tensor::vector(v.clone()))).collect();
        let (alpha, pooled) = head.caption_visual_attention(&mut g, &store, cn, &vn).unwrap();
        for &a in g.value(alpha).data() {
            assert!((a - 0.25).abs() < 1e-15);
        }
        for (x, y) in g.value(pooled).data().iter().zip(&v) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn predictions_match_composition_oracle() {
        let (head, store, mut rng) = fixture(3);
        let q = rand_vec(&mut rng, 3);
        let vqc = rand_vec(&mut rng, 4);
        let c = rand_vec(&mut rng, 3);
        let mut g = Graph::new();
        let qn = g.input(Tensor::vector(q.clone()));
        let vn = g.input(Tensor::vector(vqc.clone()));
        let cn = g.input(Tensor::vector(c.clone()));
        let s = head.predict_answers(&mut g, &store, qn, vn, cn).unwrap();

        let fv = fc(&store, &head.out_visual, &vqc);
        let fcc = fc(&store, &head.out_caption, &c);
        let h: Vec<f64> = (0..3).map(|i| q[i] * (fv[i] + fcc[i])).collect();
        let logits = oracle::affine(&store, head.classifier.w, head.classifier.b, &h);
        for (got, l) in g.value(s).data().iter().zip(logits) {
            let want = 1.0 / (1.0 + (-l).exp());
            assert!(*got > 0.0 && *got < 1.0);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_caption_with_zero_biases_drops_caption_term() {
        let (head, mut store, mut rng) = fixture(4);
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).rank() == 1 {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let q = rand_vec(&mut rng, 3);
        let vqc = rand_vec(&mut rng, 4);
        let mut g = Graph::new();
        let qn = g.input(Tensor::vector(q.clone()));
        let vn = g.input(Tensor::vector(vqc.clone()));
        let cn = g.constant(Tensor::zeros(&[3]));
        let fcz = head.out_caption.apply(&mut g, &store, cn).unwrap();
        assert!(g.value(fcz).data().iter().all(|&x| x == 0.0));
        let s = head.predict_answers(&mut g, &store, qn, vn, cn).unwrap();
        let fv = fc(&store, &head.out_visual, &vqc);
        let h: Vec<f64> = (0..3).map(|i| q[i] * fv[i]).collect();
        let logits = oracle::affine(&store, head.classifier.w, head.classifier.b, &h);
        for (got, l) in g.value(s).data().iter().zip(logits) {
            assert!((got - 1.0 / (1.0 + (-l).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_plug_in_values() {
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![0.5]));
        let l = vqa_loss(&mut g, p, &SoftLabels::new(vec![0.5]).unwrap()).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![1.0 - 1e-7]));
        let l = vqa_loss(&mut g, p, &SoftLabels::new(vec![1.0]).unwrap()).unwrap();
        assert!(g.value(l).item().abs() < 1e-6);

        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![0.5, 0.2]));
        assert!(vqa_loss(&mut g, p, &SoftLabels::new(vec![0.5]).unwrap()).is_err());
    }

    #[test]
    fn loss_gradient_at_logits_is_prediction_minus_label() {
        let logits = vec![0.3, -1.2, 2.0, 0.0];
        let labels = SoftLabels::new(vec![1.0, 0.0, 1.0 / 3.0, 2.0 / 3.0]).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(logits.clone()));
        let p = g.sigmoid(x).unwrap();
        let l = vqa_loss(&mut g, p, &labels).unwrap();
        let grads = g.backward(l).unwrap();
        for (j, (&gx, &pj)) in grads.get(x).unwrap().data().iter().zip(g.value(p).data()).enumerate() {
            assert!((gx - (pj - labels.scores()[j])).abs() < 1e-12);
        }
        let report = grad_check(
            |g, ins| {
                let p = g.sigmoid(ins[0])?;
                vqa_loss(g, p, &labels)
            },
            &[Tensor::vector(logits)],
            1e-4,
        )
        .unwrap();
        assert!(report.passed());
    }

    #[test]
    fn loss_minimum_is_label_entropy() {
        let s = vec![0.2, 0.7, 1.0 / 3.0];
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(s.clone()));
        let l = vqa_loss(&mut g, p, &SoftLabels::new(s.clone()).unwrap()).unwrap();
        let h: f64 = s.iter().map(|&v: &f64| -(v * v.ln() + (1.0 - v) * (1.0 - v).ln())).sum();
        assert!((g.value(l).item() - h).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_head_gradient() {
        let (head, store, mut rng) = fixture(5);
        let mut inputs = vec![Tensor::vector(rand_vec(&mut rng, 3)), Tensor::vector(rand_vec(&mut rng, 3))];
        for _ in 0..4 {
            inputs.push(Tensor::vector(rand_vec(&mut rng, 4)));
        }
        let labels = SoftLabels::new(vec![1.0, 0.0, 0.0, 1.0 / 3.0, 0.0, 2.0 / 3.0]).unwrap();
        let report = grad_check_model(
            &store,
            &inputs,
            |g, p, ins| {
                let (_, vqc) = head.caption_visual_attention(g, p, ins[1], &ins[2..])?;
                let s = head.predict_answers(g, p, ins[0], vqc, ins[1])?;
                vqa_loss(g, s, &labels)
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
    fn vocabulary_threshold_and_soft_labels() {
        let occ = ["yes", "no", "yes", "red", "no", "yes"];
        let v = AnswerVocabulary::build(occ.iter().copied(), 2, &[]);
        assert_eq!(v.answers(), &["no".to_string(), "yes".to_string()]);
        let v = AnswerVocabulary::build(occ.iter().copied(), 1, &["yes".into(), "no".into(), "red".into(), "blue".into()]);
        assert_eq!(v.len(), 3);
        assert_eq!(v.index("red"), Some(2));
        let s = SoftLabels::from_annotators(&v, ["yes", "yes", "red", "blue", "yes", "yes"].iter().copied());
        assert_eq!(s.scores(), &[1.0, 0.0, 1.0 / 3.0]);
    }
}
