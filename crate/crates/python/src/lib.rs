//! Python module `capvqa_py`.
use std::path::PathBuf;

use capvqa::captioner::DecodeMode;
use capvqa::harness::{self, RunControl};
use capvqa::metrics::{self, Ablation, AnnotatorAnswers, CaptionSource, EvalReport};
use capvqa::microworld::{self, Split, WorldConfig};
use capvqa::selector::{self, SelectionConfig};
use capvqa::{autograd::Fault, selfcheck, Error};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::InvalidArgument(_) | Error::Config(_) | Error::Parse { .. } | Error::DimensionMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

type QuestionRow = (usize, String, String, String, Vec<String>);
type CheckRow = (String, bool, String);

fn split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        _ => Err(PyValueError::new_err(format!("unknown split {name:?}"))),
    }
}

fn source(name: &str) -> PyResult<CaptionSource> {
    CaptionSource::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown caption source {name:?}")))
}

fn ablation(name: &str) -> PyResult<Ablation> {
    match name {
        "none" => Ok(Ablation::None),
        "zero-captions" => Ok(Ablation::ZeroCaptions),
        "zero-images" => Ok(Ablation::ZeroImages),
        _ => Err(PyValueError::new_err(format!("unknown ablation {name:?}"))),
    }
}

/// A generated micro-world: scenes with region features, captions and questions.
#[pyclass(module = "capvqa_py", frozen)]
pub struct Dataset(pub microworld::Dataset);

impl Dataset {
    fn record(&self, scene: usize) -> PyResult<&microworld::SceneRecord> {
        self.0
            .scene(scene)
            .ok_or_else(|| PyValueError::new_err(format!("no scene {scene} in the dataset")))
    }
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (seed=0, train_scenes=None, val_scenes=None, relevance=None, feature_noise=None))]
    fn generate(
        seed: u64,
        train_scenes: Option<usize>,
        val_scenes: Option<usize>,
        relevance: Option<f64>,
        feature_noise: Option<f64>,
    ) -> PyResult<Self> {
        let d = WorldConfig::default();
        let cfg = WorldConfig {
            train_scenes: train_scenes.unwrap_or(d.train_scenes),
            val_scenes: val_scenes.unwrap_or(d.val_scenes),
            relevance: relevance.unwrap_or(d.relevance),
            feature_noise: feature_noise.unwrap_or(d.feature_noise),
            ..d
        };
        microworld::generate_dataset(&cfg, seed).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        microworld::read_dataset(&path).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        microworld::parse_dataset(text, "<string>").map(Self).map_err(to_py)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        microworld::write_dataset(&self.0, &path).map_err(to_py)
    }

    fn to_text(&self) -> String {
        microworld::dataset_to_string(&self.0)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn words(&self) -> Vec<String> {
        self.0.words.clone()
    }

    #[getter]
    fn answers(&self) -> Vec<String> {
        self.0.answers.clone()
    }

    fn scene_ids(&self, split_name: &str) -> PyResult<Vec<usize>> {
        let s = split(split_name)?;
        Ok(self.0.split(s).iter().map(|r| r.scene.id).collect())
    }

    fn question_count(&self, split_name: &str) -> PyResult<usize> {
        Ok(self.0.question_count(split(split_name)?))
    }

    fn features(&self, scene: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.record(scene)?.features.clone())
    }

    fn captions(&self, scene: usize) -> PyResult<Vec<String>> {
        Ok(self.record(scene)?.captions.iter().map(|c| self.0.detokenize(c)).collect())
    }

    /// `(question_id, family, text, true_answer, annotator_answers)` per question.
    fn questions(&self, scene: usize) -> PyResult<Vec<QuestionRow>> {
        let r = self.record(scene)?;
        Ok(r.questions
            .iter()
            .map(|q| {
                (
                    q.id,
                    q.family.name().to_string(),
                    self.0.detokenize(&q.tokens),
                    self.0.answers[q.truth].clone(),
                    q.annotators.iter().map(|&a| self.0.answers[a].clone()).collect(),
                )
            })
            .collect())
    }

    fn tokenize(&self, text: &str) -> Vec<usize> {
        self.0.tokenize(text)
    }

    fn detokenize(&self, tokens: Vec<usize>) -> String {
        self.0.detokenize(&tokens)
    }

    fn __len__(&self) -> usize {
        self.0.train.len() + self.0.val.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(seed={}, train={}, val={}, words={}, answers={})",
            self.0.seed,
            self.0.train.len(),
            self.0.val.len(),
            self.0.words.len(),
            self.0.answers.len()
        )
    }
}

/// Training hyper-parameters, parsed from `key=value` lines.
#[pyclass(module = "capvqa_py")]
pub struct TrainConfig(pub harness::TrainConfig);

#[pymethods]
impl TrainConfig {
    #[new]
    #[pyo3(signature = (text="", **overrides))]
    fn new(text: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = harness::TrainConfig::parse(text).map_err(to_py)?;
        if let Some(map) = overrides {
            for (k, v) in map.iter() {
                let key: String = k.extract()?;
                let value = v.str()?.to_string();
                cfg.set(&key, &value, 0).map_err(to_py)?;
            }
        }
        Ok(Self(cfg))
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        harness::TrainConfig::from_file(&path).map(Self).map_err(to_py)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.0.set(key, value, 0).map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.0.validate().map_err(to_py)
    }

    fn lr_for_epoch(&self, epoch: usize) -> f64 {
        self.0.lr_for_epoch(epoch)
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.0.lr
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.0.batch_size
    }

    #[getter]
    fn phase1_epochs(&self) -> usize {
        self.0.phase1_epochs
    }

    #[getter]
    fn phase2_epochs(&self) -> usize {
        self.0.phase2_epochs
    }

    #[getter]
    fn xi(&self) -> f64 {
        self.0.xi
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.0.hidden
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &harness::EpochMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", m.epoch)?;
    d.set_item("phase", m.phase)?;
    d.set_item("vqa_loss", m.vqa_loss)?;
    d.set_item("caption_loss", m.caption_loss)?;
    d.set_item("selection_feasible_rate", m.selection_feasible_rate)?;
    d.set_item("soft_acc", m.soft_acc)?;
    d.set_item("soft_acc_zero_captions", m.soft_acc_zero_captions)?;
    d.set_item("info", m.info)?;
    Ok(d)
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("all", r.all)?;
    d.set_item("yesno", r.yesno)?;
    d.set_item("num", r.num)?;
    d.set_item("other", r.other)?;
    d.set_item("info", r.info.as_ref().and_then(|i| i.as_ref().ok().copied()))?;
    d.set_item("bleu1", r.bleu1)?;
    d.set_item("bleu4", r.bleu4)?;
    Ok(d)
}

/// Runs the two-phase schedule into `out_dir`; returns one metrics dict per epoch.
#[pyfunction]
#[pyo3(signature = (config, dataset, out_dir, resume=false, stop_after=None, verbose=false))]
fn train<'py>(
    py: Python<'py>,
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: PathBuf,
    resume: bool,
    stop_after: Option<usize>,
    verbose: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let control = RunControl {
        resume,
        stop_after,
        verbose,
    };
    let cfg = &config.0;
    let ds = &dataset.0;
    let run = py
        .detach(|| harness::train(cfg, ds, &out_dir, control))
        .map_err(to_py)?;
    run.rows.iter().map(|m| metrics_dict(py, m)).collect()
}

/// Evaluates a checkpoint; returns accuracies, informativeness and BLEU as a dict.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, split_name="val", captions="annotated", ablation_name="none"))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    dataset: &Dataset,
    split_name: &str,
    captions: &str,
    ablation_name: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let (s, c, a) = (split(split_name)?, source(captions)?, ablation(ablation_name)?);
    let ds = &dataset.0;
    let report = py
        .detach(|| harness::evaluate(&checkpoint, ds, s, c, a))
        .map_err(to_py)?;
    report_dict(py, &report)
}

/// A trained model loaded from a checkpoint.
#[pyclass(module = "capvqa_py", frozen)]
pub struct Predictor(pub harness::Predictor);

#[pymethods]
impl Predictor {
    #[new]
    fn new(dataset: &Dataset, checkpoint: PathBuf) -> PyResult<Self> {
        harness::Predictor::load(&dataset.0, &checkpoint).map(Self).map_err(to_py)
    }

    /// Returns `(answer, score, captions_used)`.
    #[pyo3(signature = (dataset, scene, question, captions="annotated"))]
    fn answer(&self, dataset: &Dataset, scene: usize, question: &str, captions: &str) -> PyResult<(String, f64, Vec<String>)> {
        let a = self.0.answer(&dataset.0, scene, question, source(captions)?).map_err(to_py)?;
        Ok((a.answer, a.score, a.captions))
    }

    /// Returns `(caption, logprob)`; `beam=1` decodes greedily.
    #[pyo3(signature = (dataset, scene, question="", beam=1))]
    fn caption(&self, dataset: &Dataset, scene: usize, question: &str, beam: usize) -> PyResult<(String, f64)> {
        let mode = match beam {
            0 => return Err(PyValueError::new_err("beam width must be at least 1")),
            1 => DecodeMode::Greedy,
            k => DecodeMode::Beam(k),
        };
        let (text, g) = self.0.caption(&dataset.0, scene, question, mode).map_err(to_py)?;
        Ok((text, g.logprob))
    }
}

/// `min(#annotators agreeing / 3, 1)`.
#[pyfunction]
fn soft_accuracy(predicted: &str, annotators: Vec<String>) -> PyResult<f64> {
    let annos = AnnotatorAnswers::new(annotators).map_err(to_py)?;
    Ok(metrics::soft_accuracy(predicted, &annos))
}

/// Relative gain of captioned over zero-caption accuracy.
#[pyfunction]
fn informativeness(with_captions: f64, zero_captions: f64) -> PyResult<f64> {
    metrics::informativeness(with_captions, zero_captions).map_err(to_py)
}

/// Sentence BLEU-n of a token sequence against references.
#[pyfunction]
#[pyo3(signature = (candidate, references, n=4))]
fn bleu(candidate: Vec<usize>, references: Vec<Vec<usize>>, n: usize) -> PyResult<f64> {
    metrics::bleu_n(&candidate, &references, n).map_err(to_py)
}

/// Index of the candidate with the largest gradient inner product, if any exceeds `xi`.
#[pyfunction]
#[pyo3(signature = (products, xi=0.0))]
fn select_caption(products: Vec<f64>, xi: f64) -> Option<usize> {
    selector::select_from_products(&products, SelectionConfig { xi }).index()
}

/// Runs the built-in checks; returns `(passed, [(name, passed, detail)])`.
#[pyfunction]
#[pyo3(signature = (inject_fault=false))]
fn selftest(py: Python<'_>, inject_fault: bool) -> PyResult<(bool, Vec<CheckRow>)> {
    let fault = if inject_fault { Fault::SigmoidDerivative } else { Fault::None };
    let report = py.detach(|| selfcheck::run(fault)).map_err(to_py)?;
    Ok((
        report.passed(),
        report.checks.into_iter().map(|c| (c.name, c.passed, c.detail)).collect(),
    ))
}

#[pymodule]
pub fn capvqa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Predictor>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(soft_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(informativeness, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(select_caption, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
