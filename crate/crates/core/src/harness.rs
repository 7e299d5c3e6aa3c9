//! Two-phase training, checkpoints, configuration and evaluation entry points.
//!
//! Phase 1 feeds annotated captions to the caption-embedding module and selects
//! the supervising caption per example. Between phases the model generates one
//! caption per training image-question pair. Phase 2 feeds those generated
//! captions instead, keeps the same selection rule over the supervision captions,
//! and runs at a reduced learning rate.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tensor;
use crate::captioner::{DecodeMode, GeneratedCaption};
use crate::error::{Error, Result};
use crate::metrics::{informativeness, Ablation, CaptionSource, EvalReport, Evaluator};
use crate::microworld::{splitmix64, Dataset, Split, EOS};
use crate::model::{CaptionInput, Example, ForwardOptions, JointModel, ModelDims};
use crate::nn::{AdaMaxState, ParamStore};
use crate::selector::SelectionConfig;
use crate::vqa_head::{AnswerVocabulary, SoftLabels};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"JCVQA1";
pub const METRICS_HEADER: &str = "epoch,phase,vqa_loss,caption_loss,selection_feasible_rate,soft_acc,soft_acc_zero_captions,info";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const GENERATED_FILE: &str = "generated_captions.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase2Supervision {
    Annotated,
    Generated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub phase2_lr_factor: f64,
    pub xi: f64,
    pub seed: u64,
    pub hidden: usize,
    pub word_dim: Option<usize>,
    pub question_hidden: Option<usize>,
    pub joint: Option<usize>,
    pub attended: Option<usize>,
    pub caption_hidden: Option<usize>,
    pub caption_feature: Option<usize>,
    pub decoder_hidden: Option<usize>,
    pub answer_min_count: usize,
    pub detach_caption_path: bool,
    pub phase2_supervision: Phase2Supervision,
    /// Beam width for the between-phase caption generation; 1 is greedy.
    pub beam_width: usize,
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-2,
            batch_size: 32,
            phase1_epochs: 20,
            phase2_epochs: 10,
            phase2_lr_factor: 0.25,
            xi: 0.0,
            seed: 0,
            hidden: 16,
            word_dim: None,
            question_hidden: None,
            joint: None,
            attended: None,
            caption_hidden: None,
            caption_feature: None,
            decoder_hidden: None,
            answer_min_count: 1,
            detach_caption_path: false,
            phase2_supervision: Phase2Supervision::Annotated,
            beam_width: 1,
            dataset: None,
            out_dir: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse {key}={value}")))
}

impl TrainConfig {
    /// Parses `key=value` lines; blank lines and `#` comments are skipped, unknown keys rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            cfg.set(key.trim(), value.trim(), i + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let n = line;
        match key {
            "lr" => self.lr = parse_value(key, value, n)?,
            "batch_size" => self.batch_size = parse_value(key, value, n)?,
            "phase1_epochs" => self.phase1_epochs = parse_value(key, value, n)?,
            "phase2_epochs" => self.phase2_epochs = parse_value(key, value, n)?,
            "phase2_lr_factor" => self.phase2_lr_factor = parse_value(key, value, n)?,
            "xi" => self.xi = parse_value(key, value, n)?,
            "seed" => self.seed = parse_value(key, value, n)?,
            "hidden" => self.hidden = parse_value(key, value, n)?,
            "word_dim" => self.word_dim = Some(parse_value(key, value, n)?),
            "question_hidden" => self.question_hidden = Some(parse_value(key, value, n)?),
            "joint" => self.joint = Some(parse_value(key, value, n)?),
            "attended" => self.attended = Some(parse_value(key, value, n)?),
            "caption_hidden" => self.caption_hidden = Some(parse_value(key, value, n)?),
            "caption_feature" => self.caption_feature = Some(parse_value(key, value, n)?),
            "decoder_hidden" => self.decoder_hidden = Some(parse_value(key, value, n)?),
            "answer_min_count" => self.answer_min_count = parse_value(key, value, n)?,
            "detach_caption_path" => self.detach_caption_path = parse_value(key, value, n)?,
            "phase2_supervision" => {
                self.phase2_supervision = match value {
                    "annotated" => Phase2Supervision::Annotated,
                    "generated" => Phase2Supervision::Generated,
                    _ => return Err(Error::Config(format!("line {n}: phase2_supervision must be annotated or generated"))),
                }
            }
            "beam_width" => self.beam_width = parse_value(key, value, n)?,
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("line {n}: unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.phase2_lr_factor > 0.0 && self.phase2_lr_factor <= 1.0) {
            return Err(Error::Config(format!("phase2_lr_factor must lie in (0, 1], got {}", self.phase2_lr_factor)));
        }
        if !self.xi.is_finite() {
            return Err(Error::Config("xi must be finite".into()));
        }
        if self.hidden == 0 || self.answer_min_count == 0 || self.beam_width == 0 {
            return Err(Error::Config("hidden, answer_min_count and beam_width must be positive".into()));
        }
        Ok(())
    }

    pub fn dims(&self, vocab: usize, answers: usize, region_dim: usize) -> ModelDims {
        let h = self.hidden;
        ModelDims {
            vocab,
            answers,
            region_dim,
            word_dim: self.word_dim.unwrap_or(h),
            question_hidden: self.question_hidden.unwrap_or(h),
            joint: self.joint.unwrap_or(h),
            attended: self.attended.unwrap_or(h),
            caption_hidden: self.caption_hidden.unwrap_or(h),
            caption_feature: self.caption_feature.unwrap_or(h),
            decoder_hidden: self.decoder_hidden.unwrap_or(h),
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }

    /// Learning rate used in a 1-based epoch.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch > self.phase1_epochs {
            self.lr * self.phase2_lr_factor
        } else {
            self.lr
        }
    }
}

/// Answer vocabulary of the training split at the configured threshold.
pub fn answer_vocabulary(ds: &Dataset, min_count: usize) -> AnswerVocabulary {
    AnswerVocabulary::build(
        ds.train
            .iter()
            .flat_map(|r| &r.questions)
            .flat_map(|q| q.annotators.iter().map(|&a| ds.answers[a].as_str())),
        min_count,
        &ds.answers,
    )
}

/// Saved model, optimizer state and progress.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dims: ModelDims,
    pub epoch: u64,
    pub answers: Vec<String>,
    pub params: ParamStore,
    pub optimizer: AdaMaxState,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {n}")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.len()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n * 8 > self.bytes.len() - self.pos {
            return Err(Error::Checkpoint(format!("tensor of {n} values overruns the file")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u64(out, t.shape().len() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    /// Layout: magic, dimension header, epoch, answer list, named parameters,
    /// optimizer scalars and moments. All integers u64 and reals f64, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let dims = self.dims.as_vec();
        put_u64(&mut out, dims.len() as u64);
        for d in dims {
            put_u64(&mut out, d as u64);
        }
        put_u64(&mut out, self.epoch);
        put_u64(&mut out, self.answers.len() as u64);
        for a in &self.answers {
            put_str(&mut out, a);
        }
        put_u64(&mut out, self.params.len() as u64);
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            put_tensor(&mut out, t);
        }
        let o = &self.optimizer;
        for v in [o.lr, o.beta1, o.beta2, o.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u64(&mut out, o.t);
        for t in o.m.iter().chain(&o.u) {
            put_tensor(&mut out, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(CHECKPOINT_MAGIC)
            )));
        }
        let nd = r.len()?;
        let dims = ModelDims::from_slice(&(0..nd).map(|_| r.len()).collect::<Result<Vec<_>>>()?)?;
        let epoch = r.u64()?;
        let na = r.len()?;
        let answers = (0..na).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let np = r.len()?;
        let mut params = ParamStore::new();
        for _ in 0..np {
            let name = r.string()?;
            let t = r.tensor()?;
            params.insert(name, t);
        }
        let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let t = r.u64()?;
        let m = (0..np).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let u = (0..np).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            dims,
            epoch,
            answers,
            params,
            optimizer: AdaMaxState {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                u,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and checks the stored parameters match its layout.
    pub fn model(&self) -> Result<JointModel> {
        let (model, fresh) = JointModel::new(self.dims.clone(), 0);
        if fresh.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, model has {}",
                self.params.len(),
                fresh.len()
            )));
        }
        for ((a, ta), (b, tb)) in fresh.iter().zip(self.params.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {b} {:?} does not match {a} {:?}",
                    tb.shape(),
                    ta.shape()
                )));
            }
        }
        Ok(model)
    }

    /// Errors unless the checkpoint was trained for data with these sizes.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let ok = self.dims.vocab == ds.words.len()
            && self.dims.region_dim == ds.config.region_dim
            && self.answers.iter().all(|a| ds.answers.contains(a));
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                checkpoint: self.dims.describe(),
                expected: format!(
                    "vocab={} region_dim={} answers={}",
                    ds.words.len(),
                    ds.config.region_dim,
                    ds.answers.len()
                ),
            })
        }
    }

    pub fn answer_vocabulary(&self) -> AnswerVocabulary {
        AnswerVocabulary::from_answers(self.answers.clone(), 1)
    }
}

/// One metrics CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: usize,
    pub vqa_loss: f64,
    pub caption_loss: f64,
    pub selection_feasible_rate: f64,
    pub soft_acc: f64,
    pub soft_acc_zero_captions: f64,
    pub info: Option<f64>,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.phase,
            self.vqa_loss,
            self.caption_loss,
            self.selection_feasible_rate,
            self.soft_acc,
            self.soft_acc_zero_captions,
            self.info.map_or_else(|| "undefined".to_string(), |v| v.to_string())
        )
    }

    pub fn parse_row(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != 8 {
            return Err(Error::InvalidArgument(format!("metrics row has {} columns: {row:?}", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::InvalidArgument(format!("bad metrics value {:?}", f[i])))
        };
        let int = |i: usize| -> Result<usize> {
            f[i].parse()
                .map_err(|_| Error::InvalidArgument(format!("bad metrics value {:?}", f[i])))
        };
        Ok(Self {
            epoch: int(0)?,
            phase: int(1)?,
            vqa_loss: num(2)?,
            caption_loss: num(3)?,
            selection_feasible_rate: num(4)?,
            soft_acc: num(5)?,
            soft_acc_zero_captions: num(6)?,
            info: if f[7] == "undefined" { None } else { Some(num(7)?) },
        })
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::InvalidArgument(format!("{} lacks the metrics header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(EpochMetrics::parse_row).collect()
}

/// Generated captions keyed by question id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeneratedCaptions {
    pub entries: Vec<(usize, usize, GeneratedCaption)>,
}

impl GeneratedCaptions {
    /// Caption-module input for each question id: the generated words, or `[eos]` when empty.
    pub fn inputs(&self) -> HashMap<usize, Vec<Vec<usize>>> {
        self.entries
            .iter()
            .map(|(_, q, g)| {
                let w = g.words(EOS);
                (*q, vec![if w.is_empty() { vec![EOS] } else { w.to_vec() }])
            })
            .collect()
    }

    /// `scene_id<TAB>question_id<TAB>token ids<TAB>logprob` per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (s, q, g) in &self.entries {
            let toks: Vec<String> = g.tokens.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{s}\t{q}\t{}\t{}", toks.join(" "), g.logprob);
        }
        out
    }

    pub fn parse_tsv(text: &str, path: &str) -> Result<Self> {
        let err = |line: usize, field: &str, message: &str| Error::Parse {
            path: path.to_string(),
            line,
            field: field.to_string(),
            message: message.to_string(),
        };
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(err(i + 1, "record", "expected 4 tab-separated fields"));
            }
            let scene = f[0].parse().map_err(|_| err(i + 1, "scene_id", "not an integer"))?;
            let question = f[1].parse().map_err(|_| err(i + 1, "question_id", "not an integer"))?;
            let tokens = f[2]
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| err(i + 1, "tokens", "not an integer")))
                .collect::<Result<Vec<usize>>>()?;
            let logprob = f[3].parse().map_err(|_| err(i + 1, "logprob", "not a number"))?;
            entries.push((scene, question, GeneratedCaption { tokens, logprob }));
        }
        Ok(Self { entries })
    }
}

/// Options that do not change the result of a completed run.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunControl {
    /// Continue from `checkpoint.bin` in the output directory if present.
    pub resume: bool,
    /// Stop after this many completed epochs (for interrupt/resume testing).
    pub stop_after: Option<usize>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

/// A finished (or stopped) training run.
pub struct TrainRun {
    pub model: JointModel,
    pub params: ParamStore,
    pub answers: AnswerVocabulary,
    pub rows: Vec<EpochMetrics>,
    pub out_dir: PathBuf,
}

impl TrainRun {
    pub fn evaluator<'a>(&'a self, ds: &'a Dataset) -> Evaluator<'a> {
        Evaluator {
            model: &self.model,
            params: &self.params,
            dataset: ds,
            answers: &self.answers,
        }
    }
}

struct TrainExample<'a> {
    scene: usize,
    question: usize,
    features: &'a [Vec<f64>],
    tokens: &'a [usize],
    annotated: &'a [Vec<usize>],
    labels: SoftLabels,
}

fn examples<'a>(ds: &'a Dataset, answers: &AnswerVocabulary) -> Vec<TrainExample<'a>> {
    ds.train
        .iter()
        .flat_map(|r| {
            r.questions.iter().map(move |q| (r, q))
        })
        .map(|(r, q)| TrainExample {
            scene: r.scene.id,
            question: q.id,
            features: &r.features,
            tokens: &q.tokens,
            annotated: &r.captions,
            labels: SoftLabels::from_annotators(answers, q.annotators.iter().map(|&a| ds.answers[a].as_str())),
        })
        .collect()
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn generate_all(model: &JointModel, params: &ParamStore, exs: &[TrainExample<'_>], beam: usize) -> Result<GeneratedCaptions> {
    let mode = if beam <= 1 { DecodeMode::Greedy } else { DecodeMode::Beam(beam) };
    let entries = exs
        .iter()
        .map(|e| Ok((e.scene, e.question, model.generate_caption(params, e.features, e.tokens, mode)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratedCaptions { entries })
}

/// Validation accuracy with annotated captions, with zeroed captions, and their informativeness.
pub fn validation_metrics(eval: &Evaluator<'_>) -> Result<(f64, f64, Option<f64>)> {
    let with = eval.accuracy(Split::Val, CaptionSource::Annotated, Ablation::None)?;
    let zero = eval.accuracy(Split::Val, CaptionSource::Zeroed, Ablation::None)?;
    Ok((with, zero, informativeness(with, zero).ok()))
}

/// Runs (or resumes) the two-phase schedule, writing the checkpoint, metrics CSV
/// and generated-caption file into `out_dir` after every epoch.
pub fn train(cfg: &TrainConfig, ds: &Dataset, out_dir: &Path, control: RunControl) -> Result<TrainRun> {
    cfg.validate()?;
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::Config("training needs non-empty train and validation splits".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let answers = answer_vocabulary(ds, cfg.answer_min_count);
    if answers.is_empty() {
        return Err(Error::Config("answer vocabulary is empty at this answer_min_count".into()));
    }
    let dims = cfg.dims(ds.words.len(), answers.len(), ds.config.region_dim);
    let (model, mut params) = JointModel::new(dims.clone(), cfg.seed);
    let mut opt = AdaMaxState::new(&params, cfg.lr);
    let mut rows: Vec<EpochMetrics> = Vec::new();
    let mut start_epoch = 0;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    let generated_path = out_dir.join(GENERATED_FILE);

    if control.resume && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.dims != dims || ck.answers != answers.answers() {
            return Err(Error::DimensionMismatch {
                checkpoint: ck.dims.describe(),
                expected: dims.describe(),
            });
        }
        ck.model()?;
        params = ck.params;
        opt = ck.optimizer;
        start_epoch = ck.epoch as usize;
        rows = read_metrics(&metrics_path)?;
        rows.truncate(start_epoch);
        if rows.len() != start_epoch {
            return Err(Error::InvalidArgument(format!(
                "metrics file has {} rows, checkpoint is at epoch {start_epoch}",
                rows.len()
            )));
        }
    }

    let exs = examples(ds, &answers);
    let mut generated: Option<HashMap<usize, Vec<Vec<usize>>>> = None;
    if start_epoch >= cfg.phase1_epochs && start_epoch < cfg.total_epochs() {
        let text = std::fs::read_to_string(&generated_path).map_err(|e| Error::io(&generated_path, e))?;
        generated = Some(GeneratedCaptions::parse_tsv(&text, &generated_path.display().to_string())?.inputs());
    }
    let selection = SelectionConfig { xi: cfg.xi };
    let fwd_opts = ForwardOptions {
        detach_caption_path: cfg.detach_caption_path,
    };
    let mut grads = params.zero_grads();

    for epoch in start_epoch + 1..=cfg.total_epochs() {
        if control.stop_after.is_some_and(|s| epoch > s) {
            break;
        }
        let phase = if epoch > cfg.phase1_epochs { 2 } else { 1 };
        if phase == 2 && generated.is_none() {
            let gen = generate_all(&model, &params, &exs, cfg.beam_width)?;
            write_file(&generated_path, gen.to_tsv())?;
            generated = Some(gen.inputs());
        }
        opt.lr = cfg.lr_for_epoch(epoch);

        let mut order: Vec<usize> = (0..exs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ splitmix64(epoch as u64))));
        let (mut vqa_sum, mut cap_sum, mut feasible) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            for &i in batch {
                let e = &exs[i];
                let gen_input;
                let (input, supervision): (&[Vec<usize>], &[Vec<usize>]) = match (phase, &generated) {
                    (2, Some(g)) => {
                        gen_input = g
                            .get(&e.question)
                            .ok_or_else(|| Error::InvalidArgument(format!("no generated caption for question {}", e.question)))?;
                        let sup = match cfg.phase2_supervision {
                            Phase2Supervision::Annotated => e.annotated,
                            Phase2Supervision::Generated => gen_input.as_slice(),
                        };
                        (gen_input.as_slice(), sup)
                    }
                    _ => (e.annotated, e.annotated),
                };
                let ex = Example {
                    features: e.features,
                    question: e.tokens,
                    captions: CaptionInput::Captions(input),
                };
                let stats = model.train_example(&params, &ex, &e.labels, supervision, selection, fwd_opts, &mut grads)?;
                vqa_sum += stats.vqa_loss;
                if stats.outcome.is_feasible() {
                    feasible += 1;
                    cap_sum += stats.caption_loss;
                }
            }
            opt.update(&mut params, &grads)?;
        }

        let eval = Evaluator {
            model: &model,
            params: &params,
            dataset: ds,
            answers: &answers,
        };
        let (soft_acc, soft_acc_zero_captions, info) = validation_metrics(&eval)?;
        let row = EpochMetrics {
            epoch,
            phase,
            vqa_loss: vqa_sum / exs.len() as f64,
            caption_loss: if feasible > 0 { cap_sum / feasible as f64 } else { 0.0 },
            selection_feasible_rate: feasible as f64 / exs.len() as f64,
            soft_acc,
            soft_acc_zero_captions,
            info,
        };
        if control.verbose {
            eprintln!("{}", row.csv_row());
        }
        rows.push(row);
        write_file(&metrics_path, metrics_csv(&rows))?;
        Checkpoint {
            dims: dims.clone(),
            epoch: epoch as u64,
            answers: answers.answers().to_vec(),
            params: params.clone(),
            optimizer: opt.clone(),
        }
        .save(&ckpt_path)?;
        if epoch == cfg.phase1_epochs && cfg.phase2_epochs > 0 {
            let gen = generate_all(&model, &params, &exs, cfg.beam_width)?;
            write_file(&generated_path, gen.to_tsv())?;
            generated = Some(gen.inputs());
        }
    }

    Ok(TrainRun {
        model,
        params,
        answers,
        rows,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Loads a checkpoint for evaluation against `ds`.
pub fn load_for(ds: &Dataset, path: &Path) -> Result<(JointModel, ParamStore, AnswerVocabulary)> {
    let ck = Checkpoint::load(path)?;
    ck.check_dataset(ds)?;
    let model = ck.model()?;
    let answers = ck.answer_vocabulary();
    Ok((model, ck.params, answers))
}

/// A loaded model answering and captioning single pairs.
pub struct Predictor {
    pub model: JointModel,
    pub params: ParamStore,
    pub answers: AnswerVocabulary,
}

/// One answered question.
#[derive(Clone, Debug, PartialEq)]
pub struct Answer {
    pub answer: String,
    pub score: f64,
    /// Caption words fed to the model, if any.
    pub captions: Vec<String>,
}

impl Predictor {
    pub fn load(ds: &Dataset, checkpoint: &Path) -> Result<Self> {
        let (model, params, answers) = load_for(ds, checkpoint)?;
        Ok(Self { model, params, answers })
    }

    fn scene<'a>(&self, ds: &'a Dataset, scene: usize) -> Result<&'a crate::microworld::SceneRecord> {
        ds.scene(scene)
            .ok_or_else(|| Error::InvalidArgument(format!("no scene {scene} in the dataset")))
    }

    pub fn answer(&self, ds: &Dataset, scene: usize, question: &str, source: CaptionSource) -> Result<Answer> {
        let record = self.scene(ds, scene)?;
        let tokens = ds.tokenize(question);
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty question".into()));
        }
        let generated;
        let captions = match source {
            CaptionSource::Annotated => CaptionInput::Captions(&record.captions),
            CaptionSource::Generated => {
                let g = self.model.generate_caption(&self.params, &record.features, &tokens, DecodeMode::Greedy)?;
                let w = g.words(EOS);
                generated = vec![if w.is_empty() { vec![EOS] } else { w.to_vec() }];
                CaptionInput::Captions(&generated)
            }
            CaptionSource::Zeroed => CaptionInput::Zeroed,
        };
        let scores = self.model.predict(
            &self.params,
            &Example {
                features: &record.features,
                question: &tokens,
                captions,
            },
        )?;
        let best = scores.argmax();
        let shown = match captions {
            CaptionInput::Captions(list) => list.iter().map(|c| ds.detokenize(c)).collect(),
            CaptionInput::Zeroed => Vec::new(),
        };
        Ok(Answer {
            answer: self.answers.answer(best).to_string(),
            score: scores.0[best],
            captions: shown,
        })
    }

    /// Caption for a scene, steered by `question` (an empty question gives an unsteered caption).
    pub fn caption(&self, ds: &Dataset, scene: usize, question: &str, mode: DecodeMode) -> Result<(String, GeneratedCaption)> {
        let record = self.scene(ds, scene)?;
        let tokens = ds.tokenize(question);
        let g = self.model.generate_caption(&self.params, &record.features, &tokens, mode)?;
        Ok((ds.detokenize(g.words(EOS)), g))
    }
}

pub fn evaluate(checkpoint: &Path, ds: &Dataset, split: Split, source: CaptionSource, ablation: Ablation) -> Result<EvalReport> {
    let (model, params, answers) = load_for(ds, checkpoint)?;
    Evaluator {
        model: &model,
        params: &params,
        dataset: ds,
        answers: &answers,
    }
    .report(split, source, ablation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::{generate_dataset, WorldConfig};

    fn tiny_world() -> Dataset {
        generate_dataset(
            &WorldConfig {
                train_scenes: 12,
                val_scenes: 4,
                region_dim: 8,
                ..WorldConfig::default()
            },
            3,
        )
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            hidden: 6,
            batch_size: 8,
            phase1_epochs: 2,
            phase2_epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_parse_and_reject() {
        let cfg = TrainConfig::parse("# comment\nlr=0.01\n\nbatch_size = 4\nphase2_supervision=generated\ndetach_caption_path=true\nhidden=8\nword_dim=5\n").unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.phase2_supervision, Phase2Supervision::Generated);
        assert!(cfg.detach_caption_path);
        assert_eq!(cfg.dims(10, 3, 4).word_dim, 5);
        assert_eq!(cfg.dims(10, 3, 4).joint, 8);
        assert!(TrainConfig::parse("bogus=1").is_err());
        assert!(TrainConfig::parse("lr").is_err());
        assert!(TrainConfig::parse("batch_size=0").is_err());
        assert!(TrainConfig::parse("phase2_lr_factor=1.5").is_err());
        assert!(TrainConfig::parse("lr=abc").is_err());
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_for_epoch(20), 2e-2);
        assert_eq!(cfg.lr_for_epoch(21), 2e-2 * 0.25);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dims = ModelDims::uniform(9, 4, 5, 3);
        let (_, mut params) = JointModel::new(dims.clone(), 1);
        params.get_mut(crate::nn::ParamId(0)).data_mut()[0] = f64::MIN_POSITIVE / 3.0;
        let mut opt = AdaMaxState::new(&params, 0.01);
        let grads = crate::nn::ParamGrads::from_tensors(params.iter().map(|(_, t)| Tensor::new(t.shape().to_vec(), vec![0.1; t.len()]).unwrap()).collect());
        opt.update(&mut params, &grads).unwrap();
        let ck = Checkpoint {
            dims,
            epoch: 7,
            answers: vec!["yes".into(), "no".into(), "3".into(), "red".into()],
            params,
            optimizer: opt,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.model().is_ok());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn generated_file_round_trip() {
        let g = GeneratedCaptions {
            entries: vec![
                (0, 0, GeneratedCaption { tokens: vec![4, 5, EOS], logprob: -1.25 }),
                (0, 1, GeneratedCaption { tokens: vec![EOS], logprob: -0.5 }),
            ],
        };
        let back = GeneratedCaptions::parse_tsv(&g.to_tsv(), "x").unwrap();
        assert_eq!(back, g);
        let inputs = back.inputs();
        assert_eq!(inputs[&0], vec![vec![4, 5]]);
        assert_eq!(inputs[&1], vec![vec![EOS]]);
        assert!(GeneratedCaptions::parse_tsv("1\t2\tx\t0.5", "x").is_err());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let ds = tiny_world();
        let cfg = tiny_cfg();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let c = tempfile::tempdir().unwrap();
        let run = train(&cfg, &ds, a.path(), RunControl::default()).unwrap();
        assert_eq!(run.rows.len(), 3);
        assert_eq!(run.rows[2].phase, 2);
        train(&cfg, &ds, b.path(), RunControl::default()).unwrap();
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        assert_eq!(read(a.path(), METRICS_FILE), read(b.path(), METRICS_FILE));
        assert_eq!(read(a.path(), CHECKPOINT_FILE), read(b.path(), CHECKPOINT_FILE));
        assert_eq!(read(a.path(), GENERATED_FILE), read(b.path(), GENERATED_FILE));

        for stop in [1, 2] {
            let partial = train(&cfg, &ds, c.path(), RunControl { stop_after: Some(stop), ..RunControl::default() }).unwrap();
            assert_eq!(partial.rows.len(), stop);
            train(&cfg, &ds, c.path(), RunControl { resume: true, ..RunControl::default() }).unwrap();
            assert_eq!(read(a.path(), METRICS_FILE), read(c.path(), METRICS_FILE));
            assert_eq!(read(a.path(), CHECKPOINT_FILE), read(c.path(), CHECKPOINT_FILE));
            std::fs::remove_dir_all(c.path()).unwrap();
        }

        let csv = String::from_utf8(read(a.path(), METRICS_FILE)).unwrap();
        assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
        for row in read_metrics(&a.path().join(METRICS_FILE)).unwrap() {
            assert!((0.0..=1.0).contains(&row.selection_feasible_rate));
        }

        let report = evaluate(&a.path().join(CHECKPOINT_FILE), &ds, Split::Val, CaptionSource::Annotated, Ablation::None).unwrap();
        let again = evaluate(&a.path().join(CHECKPOINT_FILE), &ds, Split::Val, CaptionSource::Annotated, Ablation::None).unwrap();
        assert_eq!(report, again);
        let zero = evaluate(&a.path().join(CHECKPOINT_FILE), &ds, Split::Val, CaptionSource::Zeroed, Ablation::None).unwrap();
        let ablated = evaluate(&a.path().join(CHECKPOINT_FILE), &ds, Split::Val, CaptionSource::Annotated, Ablation::ZeroCaptions).unwrap();
        assert_eq!(zero.all, ablated.all);
        assert_eq!(run.rows[2].soft_acc_zero_captions, zero.all);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let ds = tiny_world();
        let dir = tempfile::tempdir().unwrap();
        train(&TrainConfig { phase1_epochs: 1, phase2_epochs: 0, ..tiny_cfg() }, &ds, dir.path(), RunControl::default()).unwrap();
        let other = generate_dataset(&WorldConfig { train_scenes: 3, val_scenes: 1, region_dim: 5, ..WorldConfig::default() }, 1).unwrap();
        let err = evaluate(&dir.path().join(CHECKPOINT_FILE), &other, Split::Val, CaptionSource::Annotated, Ablation::None).unwrap_err();
        match err {
            Error::DimensionMismatch { checkpoint, expected } => {
                assert!(checkpoint.contains("region_dim=8"));
                assert!(expected.contains("region_dim=5"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let resumed = train(&TrainConfig { hidden: 7, ..tiny_cfg() }, &ds, dir.path(), RunControl { resume: true, ..RunControl::default() });
        assert!(matches!(resumed, Err(Error::DimensionMismatch { .. })));
    }
}
