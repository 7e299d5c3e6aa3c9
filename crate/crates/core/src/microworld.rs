//! Deterministic synthetic scenes with region features, templated captions and
//! questions answered by simulated annotators.
//!
//! Region features are `category + attenuation·color + position + noise`, so color
//! is weak in the visual signal while captions name it explicitly.
//!
//! # File format (`MW1`)
//!
//! Tab-separated lines. Every field after the record tag is `name=value`.
//!
//! ```text
//! MW1      seed=… categories=… colors=… … (config echo)
//! words    <bos> <eos> <unk> a …            (space-separated, id = position)
//! answers  yes no 0 1 …                      (space-separated, id = position)
//! scene    id=… split=train|val objects=slot:category:color,… features=f f …
//! caption  scene=… tokens=t t …
//! qa       scene=… id=… family=existence|count|attribute truth=a tokens=t t … annotators=a a … scores=s s …
//! ```
//!
//! Caption and qa lines belong to the scene line above them. Floats use Rust's
//! shortest round-trip formatting, so reading a written file is lossless.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::vqa_head::SoftLabels;

pub const VERSION: &str = "MW1";
pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const ANNOTATORS: usize = 10;

const CATEGORY_NAMES: [&str; 16] = [
    "cube", "ball", "cone", "ring", "star", "box", "cup", "bell", "disk", "key", "fork", "lamp", "vase", "drum", "shoe", "kite",
];
const COLOR_NAMES: [&str; 8] = ["red", "blue", "green", "yellow", "purple", "orange", "white", "black"];

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub categories: usize,
    pub colors: usize,
    pub slots: usize,
    pub region_dim: usize,
    pub captions_per_scene: usize,
    pub max_objects: usize,
    pub relevance: f64,
    pub annotator_noise: f64,
    pub color_attenuation: f64,
    pub feature_noise: f64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub min_word_count: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            categories: 12,
            colors: 6,
            slots: 9,
            region_dim: 32,
            captions_per_scene: 5,
            max_objects: 4,
            relevance: 0.8,
            annotator_noise: 0.1,
            color_attenuation: 0.2,
            feature_noise: 0.5,
            train_scenes: 2000,
            val_scenes: 500,
            min_word_count: 1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("categories", self.categories),
            ("colors", self.colors),
            ("slots", self.slots),
            ("region_dim", self.region_dim),
            ("captions_per_scene", self.captions_per_scene),
            ("min_word_count", self.min_word_count),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.max_objects < 2 || self.max_objects > self.slots {
            return Err(Error::Config(format!(
                "max_objects must lie in 2..={} (slots), got {}",
                self.slots, self.max_objects
            )));
        }
        if self.categories < 2 {
            return Err(Error::Config("at least two categories are needed".into()));
        }
        for (name, v) in [
            ("relevance", self.relevance),
            ("annotator_noise", self.annotator_noise),
            ("color_attenuation", self.color_attenuation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::Config(format!("feature_noise must be a finite non-negative number, got {}", self.feature_noise)));
        }
        Ok(())
    }

    fn echo(&self, seed: u64) -> String {
        format!(
            "seed={seed}\tcategories={}\tcolors={}\tslots={}\tregion_dim={}\tcaptions_per_scene={}\tmax_objects={}\trelevance={}\tannotator_noise={}\tcolor_attenuation={}\tfeature_noise={}\ttrain_scenes={}\tval_scenes={}\tmin_word_count={}",
            self.categories,
            self.colors,
            self.slots,
            self.region_dim,
            self.captions_per_scene,
            self.max_objects,
            self.relevance,
            self.annotator_noise,
            self.color_attenuation,
            self.feature_noise,
            self.train_scenes,
            self.val_scenes,
            self.min_word_count
        )
    }

    pub fn category_name(&self, c: usize) -> String {
        CATEGORY_NAMES.get(c).map_or_else(|| format!("thing{c}"), |s| s.to_string())
    }

    pub fn color_name(&self, c: usize) -> String {
        COLOR_NAMES.get(c).map_or_else(|| format!("color{c}"), |s| s.to_string())
    }

    /// Every answer an annotator can give: yes, no, counts `0..=max_objects`, colors.
    pub fn answer_table(&self) -> Vec<String> {
        let mut out = vec!["yes".to_string(), "no".to_string()];
        out.extend((0..=self.max_objects).map(|n| n.to_string()));
        out.extend((0..self.colors).map(|c| self.color_name(c)));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Object {
    pub category: usize,
    pub color: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub slots: Vec<Option<Object>>,
}

impl Scene {
    pub fn objects(&self) -> impl Iterator<Item = (usize, Object)> + '_ {
        self.slots.iter().enumerate().filter_map(|(i, o)| o.map(|o| (i, o)))
    }

    pub fn count(&self, category: usize) -> usize {
        self.objects().filter(|(_, o)| o.category == category).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Existence,
    Count,
    Attribute,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Existence, Family::Count, Family::Attribute];

    pub fn name(self) -> &'static str {
        match self {
            Family::Existence => "existence",
            Family::Count => "count",
            Family::Attribute => "attribute",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaRecord {
    pub id: usize,
    pub family: Family,
    pub tokens: Vec<usize>,
    /// Ground-truth answer id.
    pub truth: usize,
    /// One answer id per annotator.
    pub annotators: Vec<usize>,
    /// `min(count/3, 1)` per answer id.
    pub scores: Vec<f64>,
}

impl QaRecord {
    pub fn soft_labels(&self) -> SoftLabels {
        SoftLabels::new(self.scores.clone()).expect("scores are built in [0, 1]")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub scene: Scene,
    pub features: Vec<Vec<f64>>,
    pub captions: Vec<Vec<usize>>,
    pub questions: Vec<QaRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub seed: u64,
    pub words: Vec<String>,
    pub answers: Vec<String>,
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SceneRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn word_index(&self) -> HashMap<&str, usize> {
        self.words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect()
    }

    /// Maps whitespace-separated lower-cased text to token ids, unknown words to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let index = self.word_index();
        text.split_whitespace()
            .map(|w| index.get(w.to_lowercase().as_str()).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn detokenize(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.words.get(t).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Scene record by id, searching both splits.
    pub fn scene(&self, id: usize) -> Option<&SceneRecord> {
        self.train.iter().chain(&self.val).find(|r| r.scene.id == id)
    }

    pub fn question_count(&self, split: Split) -> usize {
        self.split(split).iter().map(|s| s.questions.len()).sum()
    }
}

/// SplitMix64 finalizer, used to derive independent per-scene seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn substream(seed: u64, key: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed) ^ key))
}

struct Tables {
    category: Vec<Vec<f64>>,
    color: Vec<Vec<f64>>,
    position: Vec<Vec<f64>>,
    empty: Vec<f64>,
}

impl Tables {
    fn new(cfg: &WorldConfig, seed: u64) -> Self {
        let mut rng = substream(seed, u64::MAX);
        let normal = Normal::new(0.0, 1.0).expect("positive std");
        let mut table = |n: usize, scale: f64| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..cfg.region_dim).map(|_| scale * normal.sample(&mut rng)).collect())
                .collect()
        };
        let category = table(cfg.categories, 1.0);
        let color = table(cfg.colors, 1.0);
        let position = table(cfg.slots, 0.5);
        let empty = table(1, 1.0).pop().expect("one row");
        Self {
            category,
            color,
            position,
            empty,
        }
    }
}

struct RawQuestion {
    family: Family,
    words: Vec<String>,
    truth: usize,
    annotators: Vec<usize>,
}

struct RawScene {
    scene: Scene,
    features: Vec<Vec<f64>>,
    captions: Vec<Vec<String>>,
    questions: Vec<RawQuestion>,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn generate_scene(cfg: &WorldConfig, tables: &Tables, seed: u64, id: usize, answers: &[String]) -> RawScene {
    let mut rng = substream(seed, id as u64);
    let answer_id = |a: &str| answers.iter().position(|x| x == a).expect("answer table covers every answer");

    // Objects: at least one category must be unique so the attribute question is well posed.
    let (slots, objects) = loop {
        let n = rng.random_range(2..=cfg.max_objects);
        let mut positions: Vec<usize> = (0..cfg.slots).collect();
        positions.shuffle(&mut rng);
        positions.truncate(n);
        positions.sort_unstable();
        let mut objects: Vec<(usize, Object)> = Vec::with_capacity(n);
        for &p in &positions {
            let category = if !objects.is_empty() && rng.random_bool(0.3) {
                objects.choose(&mut rng).expect("nonempty").1.category
            } else {
                rng.random_range(0..cfg.categories)
            };
            let color = rng.random_range(0..cfg.colors);
            objects.push((p, Object { category, color }));
        }
        let unique = objects
            .iter()
            .any(|(_, o)| objects.iter().filter(|(_, x)| x.category == o.category).count() == 1);
        if unique {
            let mut slots = vec![None; cfg.slots];
            for &(p, o) in &objects {
                slots[p] = Some(o);
            }
            break (slots, objects);
        }
    };
    let scene = Scene { id, slots };

    let noise = Normal::new(0.0, cfg.feature_noise.max(f64::MIN_POSITIVE)).expect("positive std");
    let features = scene
        .slots
        .iter()
        .enumerate()
        .map(|(k, slot)| {
            (0..cfg.region_dim)
                .map(|d| {
                    let base = match slot {
                        Some(o) => tables.category[o.category][d] + cfg.color_attenuation * tables.color[o.color][d],
                        None => tables.empty[d],
                    };
                    let eps = if cfg.feature_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    base + tables.position[k][d] + eps
                })
                .collect()
        })
        .collect();

    let uniques: Vec<(usize, Object)> = objects
        .iter()
        .copied()
        .filter(|(_, o)| scene.count(o.category) == 1)
        .collect();
    let target = uniques.choose(&mut rng).expect("a unique category exists").1;

    let annotate = |truth: usize, plausible: &[usize], rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..ANNOTATORS)
            .map(|_| {
                if rng.random_bool(1.0 - cfg.annotator_noise) {
                    truth
                } else {
                    *plausible.choose(rng).expect("nonempty")
                }
            })
            .collect()
    };
    let yes_no = [answer_id("yes"), answer_id("no")];
    let counts: Vec<usize> = (0..=cfg.max_objects).map(|n| answer_id(&n.to_string())).collect();
    let colors: Vec<usize> = (0..cfg.colors).map(|c| answer_id(&cfg.color_name(c))).collect();

    let present: Vec<usize> = objects.iter().map(|(_, o)| o.category).collect();
    let absent: Vec<usize> = (0..cfg.categories).filter(|c| !present.contains(c)).collect();
    let ask_present = absent.is_empty() || rng.random_bool(0.5);
    let exist_cat = if ask_present {
        *present.choose(&mut rng).expect("nonempty")
    } else {
        *absent.choose(&mut rng).expect("nonempty")
    };
    let exist_truth = yes_no[if ask_present { 0 } else { 1 }];
    let count_cat = if rng.random_bool(0.7) {
        *present.choose(&mut rng).expect("nonempty")
    } else {
        rng.random_range(0..cfg.categories)
    };
    let count_truth = counts[scene.count(count_cat)];
    let attr_truth = colors[target.color];

    let questions = vec![
        RawQuestion {
            family: Family::Existence,
            words: words(&format!("is there a {}", cfg.category_name(exist_cat))),
            truth: exist_truth,
            annotators: annotate(exist_truth, &yes_no, &mut rng),
        },
        RawQuestion {
            family: Family::Count,
            words: words(&format!("how many {} are there", cfg.category_name(count_cat))),
            truth: count_truth,
            annotators: annotate(count_truth, &counts, &mut rng),
        },
        RawQuestion {
            family: Family::Attribute,
            words: words(&format!("what color is the {}", cfg.category_name(target.category))),
            truth: attr_truth,
            annotators: annotate(attr_truth, &colors, &mut rng),
        },
    ];

    // Captions: with probability `relevance` at least one names the target; otherwise none do.
    let relevant = rng.random_bool(cfg.relevance);
    let pool: Vec<Object> = objects
        .iter()
        .map(|&(_, o)| o)
        .filter(|o| relevant || o.category != target.category)
        .collect();
    let forced = rng.random_range(0..cfg.captions_per_scene);
    let phrase = |o: Object| format!("a {} {}", cfg.color_name(o.color), cfg.category_name(o.category));
    let captions = (0..cfg.captions_per_scene)
        .map(|i| {
            let mut chosen: Vec<Object> = pool.choose_multiple(&mut rng, 2).copied().collect();
            let two = chosen.len() == 2 && rng.random_bool(0.5);
            if !two {
                chosen.truncate(1);
            }
            if relevant && i == forced && !chosen.contains(&target) {
                chosen[0] = target;
            }
            let text = match (chosen.as_slice(), rng.random_range(0..2)) {
                ([a], 0) => format!("there is {}", phrase(*a)),
                ([a], _) => phrase(*a),
                ([a, b], 0) => format!("{} and {}", phrase(*a), phrase(*b)),
                ([a, b], _) => format!("{} next to {}", phrase(*a), phrase(*b)),
                _ => unreachable!("captions describe one or two objects"),
            };
            words(&text)
        })
        .collect();

    RawScene {
        scene,
        features,
        captions,
        questions,
    }
}

/// Generates the train and validation splits. Scene `i` draws from its own
/// substream keyed by `(seed, i)`; embedding tables use a separate stream.
pub fn generate_dataset(cfg: &WorldConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let tables = Tables::new(cfg, seed);
    let answers = cfg.answer_table();
    let total = cfg.train_scenes + cfg.val_scenes;
    let raw: Vec<RawScene> = (0..total).map(|id| generate_scene(cfg, &tables, seed, id, &answers)).collect();

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in &raw[..cfg.train_scenes] {
        for w in r.captions.iter().flatten().chain(r.questions.iter().flat_map(|q| &q.words)) {
            *counts.entry(w.as_str()).or_default() += 1;
        }
    }
    let mut vocab: Vec<String> = ["<bos>", "<eos>", "<unk>"].iter().map(|s| s.to_string()).collect();
    let mut template_words: Vec<String> = words("is there a how many are what color is the and next to");
    template_words.extend((0..cfg.categories).map(|c| cfg.category_name(c)));
    template_words.extend((0..cfg.colors).map(|c| cfg.color_name(c)));
    for w in template_words {
        if counts.get(w.as_str()).copied().unwrap_or(0) >= cfg.min_word_count && !vocab.contains(&w) {
            vocab.push(w);
        }
    }
    let index: HashMap<String, usize> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    let ids = |ws: &[String]| -> Vec<usize> { ws.iter().map(|w| index.get(w).copied().unwrap_or(UNK)).collect() };

    let mut train = Vec::with_capacity(cfg.train_scenes);
    let mut val = Vec::with_capacity(cfg.val_scenes);
    for r in raw {
        let id = r.scene.id;
        let record = SceneRecord {
            captions: r.captions.iter().map(|c| ids(c)).collect(),
            questions: r
                .questions
                .iter()
                .enumerate()
                .map(|(k, q)| {
                    let mut counts = vec![0usize; answers.len()];
                    for &a in &q.annotators {
                        counts[a] += 1;
                    }
                    QaRecord {
                        id: id * 3 + k,
                        family: q.family,
                        tokens: ids(&q.words),
                        truth: q.truth,
                        annotators: q.annotators.clone(),
                        scores: counts.iter().map(|&c| (c as f64 / 3.0).min(1.0)).collect(),
                    }
                })
                .collect(),
            scene: r.scene,
            features: r.features,
        };
        if id < cfg.train_scenes {
            train.push(record);
        } else {
            val.push(record);
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        seed,
        words: vocab,
        answers,
        train,
        val,
    })
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

pub fn dataset_to_string(ds: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{VERSION}\t{}", ds.config.echo(ds.seed));
    let _ = writeln!(out, "words\t{}", ds.words.join(" "));
    let _ = writeln!(out, "answers\t{}", ds.answers.join(" "));
    for (split, records) in [(Split::Train, &ds.train), (Split::Val, &ds.val)] {
        for r in records {
            let objects = r
                .scene
                .objects()
                .map(|(k, o)| format!("{k}:{}:{}", o.category, o.color))
                .collect::<Vec<_>>()
                .join(",");
            let features: Vec<f64> = r.features.iter().flatten().copied().collect();
            let _ = writeln!(
                out,
                "scene\tid={}\tsplit={}\tobjects={objects}\tfeatures={}",
                r.scene.id,
                split.name(),
                join(&features)
            );
            for c in &r.captions {
                let _ = writeln!(out, "caption\tscene={}\ttokens={}", r.scene.id, join(c));
            }
            for q in &r.questions {
                let _ = writeln!(
                    out,
                    "qa\tscene={}\tid={}\tfamily={}\ttruth={}\ttokens={}\tannotators={}\tscores={}",
                    r.scene.id,
                    q.id,
                    q.family.name(),
                    q.truth,
                    join(&q.tokens),
                    join(&q.annotators),
                    join(&q.scores)
                );
            }
        }
    }
    out
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_string(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string())
}

struct Line<'a> {
    path: &'a str,
    number: usize,
    fields: HashMap<&'a str, &'a str>,
}

impl<'a> Line<'a> {
    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_string(),
            line: self.number,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn raw(&self, field: &str) -> Result<&'a str> {
        self.fields.get(field).copied().ok_or_else(|| self.err(field, "missing"))
    }

    fn num<T: std::str::FromStr>(&self, field: &str) -> Result<T> {
        let raw = self.raw(field)?;
        raw.parse().map_err(|_| self.err(field, format!("cannot parse {raw:?}")))
    }

    fn list<T: std::str::FromStr>(&self, field: &str) -> Result<Vec<T>> {
        self.raw(field)?
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| self.err(field, format!("cannot parse {v:?}"))))
            .collect()
    }
}

fn split_fields<'a>(path: &'a str, number: usize, parts: &[&'a str]) -> Result<Line<'a>> {
    let mut fields = HashMap::new();
    for part in parts {
        let (k, v) = part.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_string(),
            line: number,
            field: part.to_string(),
            message: "expected name=value".into(),
        })?;
        fields.insert(k, v);
    }
    Ok(Line { path, number, fields })
}

pub fn parse_dataset(text: &str, path: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let parse_err = |line: usize, field: &str, message: &str| Error::Parse {
        path: path.to_string(),
        line,
        field: field.to_string(),
        message: message.to_string(),
    };

    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "header", "empty file"))?;
    let mut parts = header.split('\t');
    let tag = parts.next().unwrap_or("");
    if tag != VERSION {
        return Err(Error::Version {
            expected: VERSION.into(),
            found: tag.into(),
        });
    }
    let h = split_fields(path, 1, &parts.collect::<Vec<_>>())?;
    let config = WorldConfig {
        categories: h.num("categories")?,
        colors: h.num("colors")?,
        slots: h.num("slots")?,
        region_dim: h.num("region_dim")?,
        captions_per_scene: h.num("captions_per_scene")?,
        max_objects: h.num("max_objects")?,
        relevance: h.num("relevance")?,
        annotator_noise: h.num("annotator_noise")?,
        color_attenuation: h.num("color_attenuation")?,
        feature_noise: h.num("feature_noise")?,
        train_scenes: h.num("train_scenes")?,
        val_scenes: h.num("val_scenes")?,
        min_word_count: h.num("min_word_count")?,
    };
    let seed = h.num("seed")?;

    let mut table = |tag: &str| -> Result<Vec<String>> {
        let (n, line) = lines.next().ok_or_else(|| parse_err(0, tag, "missing line"))?;
        match line.split_once('\t') {
            Some((t, rest)) if t == tag => Ok(rest.split_whitespace().map(str::to_string).collect()),
            _ => Err(parse_err(n, tag, "expected this table")),
        }
    };
    let words = table("words")?;
    let answers = table("answers")?;

    let mut train: Vec<SceneRecord> = Vec::new();
    let mut val: Vec<SceneRecord> = Vec::new();
    let mut current: Option<(Split, SceneRecord)> = None;
    let dim = config.region_dim;
    let mut last_line = 3;
    for (n, line) in lines {
        last_line = n;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let tag = parts.next().unwrap_or("");
        let f = split_fields(path, n, &parts.collect::<Vec<_>>())?;
        let check_tokens = |field: &str, tokens: &[usize]| -> Result<()> {
            match tokens.iter().find(|&&t| t >= words.len()) {
                Some(t) => Err(f.err(field, format!("token {t} outside vocabulary of {}", words.len()))),
                None => Ok(()),
            }
        };
        match tag {
            "scene" => {
                if let Some((split, rec)) = current.take() {
                    match split {
                        Split::Train => train.push(rec),
                        Split::Val => val.push(rec),
                    }
                }
                let id: usize = f.num("id")?;
                let split = match f.raw("split")? {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    other => return Err(f.err("split", format!("unknown split {other:?}"))),
                };
                let mut slots = vec![None; config.slots];
                let objects = f.raw("objects")?;
                for item in objects.split(',').filter(|s| !s.is_empty()) {
                    let v: Vec<usize> = item
                        .split(':')
                        .map(|x| x.parse().map_err(|_| f.err("objects", format!("cannot parse {item:?}"))))
                        .collect::<Result<_>>()?;
                    match v.as_slice() {
                        &[slot, category, color] if slot < config.slots => {
                            slots[slot] = Some(Object { category, color });
                        }
                        _ => return Err(f.err("objects", format!("bad object {item:?}"))),
                    }
                }
                let flat: Vec<f64> = f.list("features")?;
                if flat.len() != config.slots * dim {
                    return Err(f.err(
                        "features",
                        format!("expected {} values, found {}", config.slots * dim, flat.len()),
                    ));
                }
                current = Some((
                    split,
                    SceneRecord {
                        scene: Scene { id, slots },
                        features: flat.chunks(dim).map(<[f64]>::to_vec).collect(),
                        captions: Vec::new(),
                        questions: Vec::new(),
                    },
                ));
            }
            "caption" | "qa" => {
                let (_, rec) = current.as_mut().ok_or_else(|| f.err("scene", "record before any scene line"))?;
                let scene: usize = f.num("scene")?;
                if scene != rec.scene.id {
                    return Err(f.err("scene", format!("refers to scene {scene} inside scene {}", rec.scene.id)));
                }
                let tokens: Vec<usize> = f.list("tokens")?;
                check_tokens("tokens", &tokens)?;
                if tag == "caption" {
                    rec.captions.push(tokens);
                } else {
                    let family = Family::parse(f.raw("family")?).ok_or_else(|| f.err("family", "unknown family"))?;
                    let annotators: Vec<usize> = f.list("annotators")?;
                    if annotators.len() != ANNOTATORS {
                        return Err(f.err("annotators", format!("expected {ANNOTATORS}, found {}", annotators.len())));
                    }
                    let truth: usize = f.num("truth")?;
                    if let Some(a) = annotators.iter().chain([&truth]).find(|&&a| a >= answers.len()) {
                        return Err(f.err("annotators", format!("answer {a} outside table of {}", answers.len())));
                    }
                    let scores: Vec<f64> = f.list("scores")?;
                    if scores.len() != answers.len() {
                        return Err(f.err("scores", format!("expected {}, found {}", answers.len(), scores.len())));
                    }
                    rec.questions.push(QaRecord {
                        id: f.num("id")?,
                        family,
                        tokens,
                        truth,
                        annotators,
                        scores,
                    });
                }
            }
            other => return Err(f.err("record", format!("unknown record type {other:?}"))),
        }
    }
    if let Some((split, rec)) = current.take() {
        match split {
            Split::Train => train.push(rec),
            Split::Val => val.push(rec),
        }
    }
    let found = train.len() + val.len();
    if train.len() != config.train_scenes || val.len() != config.val_scenes {
        return Err(parse_err(
            last_line,
            "scene",
            &format!(
                "header declares {} scenes, file holds {found} (truncated?)",
                config.train_scenes + config.val_scenes
            ),
        ));
    }
    for r in train.iter().chain(&val) {
        if r.questions.len() != 3 || r.captions.len() != config.captions_per_scene {
            return Err(parse_err(
                last_line,
                "scene",
                &format!("scene {} is incomplete (truncated?)", r.scene.id),
            ));
        }
    }
    Ok(Dataset {
        config,
        seed,
        words,
        answers,
        train,
        val,
    })
}
