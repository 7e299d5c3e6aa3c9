//! Soft VQA accuracy, informativeness, BLEU and evaluation reports.

use std::collections::HashMap;
use std::fmt;

use crate::captioner::DecodeMode;
use crate::error::{Error, Result};
use crate::microworld::{Dataset, Family, SceneRecord, Split, ANNOTATORS, EOS};
use crate::model::{CaptionInput, Example, JointModel};
use crate::nn::ParamStore;
use crate::vqa_head::AnswerVocabulary;

/// The ten simulated annotator answers of one question.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatorAnswers(Vec<String>);

impl AnnotatorAnswers {
    pub fn new(answers: Vec<String>) -> Result<Self> {
        if answers.len() != ANNOTATORS {
            return Err(Error::InvalidArgument(format!(
                "expected {ANNOTATORS} annotator answers, got {}",
                answers.len()
            )));
        }
        Ok(Self(answers))
    }

    pub fn answers(&self) -> &[String] {
        &self.0
    }
}

/// `min(#annotators agreeing / 3, 1)`
pub fn soft_accuracy(predicted: &str, annos: &AnnotatorAnswers) -> f64 {
    let matches = annos.0.iter().filter(|a| *a == predicted).count();
    (matches as f64 / 3.0).min(1.0)
}

/// `(ŝ − ŝ₀) / ŝ₀`
pub fn informativeness(with_captions: f64, zero_captions: f64) -> Result<f64> {
    if zero_captions == 0.0 {
        return Err(Error::UndefinedInformativeness);
    }
    Ok((with_captions - zero_captions) / zero_captions)
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram matches and candidate n-gram total for one order.
fn clipped(candidate: &[usize], references: &[Vec<usize>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<&[usize], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

fn closest_ref_len(c: usize, references: &[Vec<usize>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

#[derive(Clone, Debug, Default, PartialEq)]
struct BleuStats {
    matched: [usize; 4],
    total: [usize; 4],
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn add(&mut self, candidate: &[usize], references: &[Vec<usize>]) {
        for k in 0..4 {
            let (m, t) = clipped(candidate, references, k + 1);
            self.matched[k] += m;
            self.total[k] += t;
        }
        self.cand_len += candidate.len();
        self.ref_len += closest_ref_len(candidate.len(), references);
    }

    /// Geometric mean of orders `1..=n` that have at least one candidate n-gram, times the brevity penalty.
    fn score(&self, n: usize) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let orders: Vec<usize> = (0..n).filter(|&k| self.total[k] > 0).collect();
        let mut log_sum = 0.0;
        for &k in &orders {
            if self.matched[k] == 0 {
                return 0.0;
            }
            log_sum += (self.matched[k] as f64 / self.total[k] as f64).ln();
        }
        let bp = if self.cand_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        } else {
            1.0
        };
        bp * (log_sum / orders.len() as f64).exp()
    }
}

fn check_order(n: usize) -> Result<()> {
    if (1..=4).contains(&n) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("BLEU order must be 1..=4, got {n}")))
    }
}

/// Sentence BLEU-n: clipped n-gram precisions (orders longer than the candidate
/// are skipped), uniform geometric mean, brevity penalty against the closest reference.
pub fn bleu_n(candidate: &[usize], references: &[Vec<usize>], n: usize) -> Result<f64> {
    corpus_bleu(&[(candidate.to_vec(), references.to_vec())], n)
}

/// Corpus BLEU-n: n-gram statistics are pooled over all pairs before combining.
pub fn corpus_bleu(pairs: &[(Vec<usize>, Vec<Vec<usize>>)], n: usize) -> Result<f64> {
    check_order(n)?;
    if pairs.iter().any(|(_, refs)| refs.is_empty()) {
        return Err(Error::InvalidArgument("BLEU needs at least one reference".into()));
    }
    let mut stats = BleuStats::default();
    for (c, refs) in pairs {
        stats.add(c, refs);
    }
    Ok(stats.score(n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    None,
    ZeroCaptions,
    ZeroImages,
}

/// Which captions the caption-embedding module receives at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptionSource {
    Annotated,
    /// Greedy captions generated by the model for each image-question pair.
    Generated,
    Zeroed,
}

impl CaptionSource {
    pub fn name(self) -> &'static str {
        match self {
            CaptionSource::Annotated => "annotated",
            CaptionSource::Generated => "generated",
            CaptionSource::Zeroed => "zeroed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [CaptionSource::Annotated, CaptionSource::Generated, CaptionSource::Zeroed]
            .into_iter()
            .find(|c| c.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuestionResult {
    pub family: Family,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub all: f64,
    /// Per-family accuracy; `None` when the family has no questions.
    pub yesno: Option<f64>,
    pub num: Option<f64>,
    pub other: Option<f64>,
    pub counts: [usize; 3],
    /// `Err` when the zero-caption accuracy is 0; `None` when not computed.
    pub info: Option<std::result::Result<f64, String>>,
    pub bleu1: Option<f64>,
    pub bleu4: Option<f64>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "all,yesno,num,other,info,bleu1,bleu4";

    pub fn from_results(results: &[QuestionResult]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::InvalidArgument("no questions to evaluate".into()));
        }
        let mut sums = [0.0; 3];
        let mut counts = [0usize; 3];
        for r in results {
            let k = family_slot(r.family);
            sums[k] += r.accuracy;
            counts[k] += 1;
        }
        let mean = |k: usize| (counts[k] > 0).then(|| sums[k] / counts[k] as f64);
        Ok(Self {
            all: results.iter().map(|r| r.accuracy).sum::<f64>() / results.len() as f64,
            yesno: mean(0),
            num: mean(1),
            other: mean(2),
            counts,
            info: None,
            bleu1: None,
            bleu4: None,
        })
    }

    pub fn family(&self, family: Family) -> Option<f64> {
        match family {
            Family::Existence => self.yesno,
            Family::Count => self.num,
            Family::Attribute => self.other,
        }
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let info = match &self.info {
            None => "NA".to_string(),
            Some(Ok(v)) => v.to_string(),
            Some(Err(_)) => "undefined".to_string(),
        };
        format!(
            "{},{},{},{},{},{},{}",
            self.all,
            opt(self.yesno),
            opt(self.num),
            opt(self.other),
            info,
            opt(self.bleu1),
            opt(self.bleu4)
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::CSV_HEADER)?;
        write!(f, "{}", self.csv_row())
    }
}

fn family_slot(f: Family) -> usize {
    match f {
        Family::Existence => 0,
        Family::Count => 1,
        Family::Attribute => 2,
    }
}

/// Model-side context shared by every evaluation call.
pub struct Evaluator<'a> {
    pub model: &'a JointModel,
    pub params: &'a ParamStore,
    pub dataset: &'a Dataset,
    pub answers: &'a AnswerVocabulary,
}

impl Evaluator<'_> {
    fn features(&self, record: &SceneRecord, ablation: Ablation) -> Vec<Vec<f64>> {
        if ablation == Ablation::ZeroImages {
            vec![vec![0.0; self.dataset.config.region_dim]; record.features.len()]
        } else {
            record.features.clone()
        }
    }

    /// Greedy caption for one pair, end marker stripped; an immediate end marker
    /// yields the one-token caption `[eos]` so the caption module always has input.
    pub fn generated_words(&self, features: &[Vec<f64>], question: &[usize]) -> Result<Vec<usize>> {
        let gen = self.model.generate_caption(self.params, features, question, DecodeMode::Greedy)?;
        let words = gen.words(EOS);
        Ok(if words.is_empty() { vec![EOS] } else { words.to_vec() })
    }

    /// Soft accuracy of every question in the split.
    pub fn question_results(&self, split: Split, source: CaptionSource, ablation: Ablation) -> Result<Vec<QuestionResult>> {
        let mut out = Vec::with_capacity(self.dataset.question_count(split));
        for record in self.dataset.split(split) {
            let features = self.features(record, ablation);
            for qa in &record.questions {
                let generated;
                let captions = match (source, ablation) {
                    (_, Ablation::ZeroCaptions) | (CaptionSource::Zeroed, _) => CaptionInput::Zeroed,
                    (CaptionSource::Annotated, _) => CaptionInput::Captions(&record.captions),
                    (CaptionSource::Generated, _) => {
                        generated = vec![self.generated_words(&features, &qa.tokens)?];
                        CaptionInput::Captions(&generated)
                    }
                };
                let scores = self.model.predict(
                    self.params,
                    &Example {
                        features: &features,
                        question: &qa.tokens,
                        captions,
                    },
                )?;
                let predicted = self.answers.answer(scores.argmax());
                let annos = AnnotatorAnswers::new(qa.annotators.iter().map(|&a| self.dataset.answers[a].clone()).collect())?;
                out.push(QuestionResult {
                    family: qa.family,
                    accuracy: soft_accuracy(predicted, &annos),
                });
            }
        }
        Ok(out)
    }

    pub fn accuracy(&self, split: Split, source: CaptionSource, ablation: Ablation) -> Result<f64> {
        Ok(EvalReport::from_results(&self.question_results(split, source, ablation)?)?.all)
    }

    /// Corpus BLEU-1 and BLEU-4 of greedy captions against each scene's annotated captions.
    pub fn caption_bleu(&self, split: Split, ablation: Ablation) -> Result<(f64, f64)> {
        let mut pairs = Vec::new();
        for record in self.dataset.split(split) {
            let features = self.features(record, ablation);
            for qa in &record.questions {
                let gen = self.model.generate_caption(self.params, &features, &qa.tokens, DecodeMode::Greedy)?;
                pairs.push((gen.words(EOS).to_vec(), record.captions.clone()));
            }
        }
        Ok((corpus_bleu(&pairs, 1)?, corpus_bleu(&pairs, 4)?))
    }

    /// Per-family accuracies; with no ablation also informativeness against the
    /// zero-caption leg; caption BLEU unless captions are ablated.
    pub fn report(&self, split: Split, source: CaptionSource, ablation: Ablation) -> Result<EvalReport> {
        let mut report = EvalReport::from_results(&self.question_results(split, source, ablation)?)?;
        if ablation == Ablation::None && source != CaptionSource::Zeroed {
            let zero = self.accuracy(split, source, Ablation::ZeroCaptions)?;
            report.info = Some(informativeness(report.all, zero).map_err(|e| e.to_string()));
        }
        if ablation != Ablation::ZeroCaptions {
            let (b1, b4) = self.caption_bleu(split, ablation)?;
            report.bleu1 = Some(b1);
            report.bleu4 = Some(b4);
        }
        Ok(report)
    }
}
