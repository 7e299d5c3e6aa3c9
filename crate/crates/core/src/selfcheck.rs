//! Built-in verification suites: finite-difference checks of every primitive and
//! module, selection against brute force, attention normalization and dataset
//! round trip. Used by the `selftest` command.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check_with, Fault, GradCheckOptions, GradCheckReport, Graph, NodeId, Tensor};
use crate::caption_embed::CaptionEmbedder;
use crate::captioner::CaptionDecoder;
use crate::encoders::{QuestionEncoder, QuestionVisualAttention};
use crate::error::Result;
use crate::microworld::{dataset_to_string, generate_dataset, parse_dataset, WorldConfig};
use crate::model::{CaptionInput, ForwardOptions, JointModel, ModelDims};
use crate::nn::{grad_check_model, EmbeddingTable, FcBlock, GruCell, ParamBuilder, ParamStore};
use crate::selector::{select_caption, FeatureGradients, SelectionConfig, SelectionOutcome};
use crate::vqa_head::{vqa_loss, SoftLabels, VqaHead};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const MODULE_TOLERANCE: f64 = 1e-4;
pub const JOINT_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct SelfTestReport {
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// A named finite-difference report.
#[derive(Clone, Debug)]
pub struct NamedGradCheck {
    pub name: String,
    pub report: GradCheckReport,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// `Σ x ∘ w` for a fixed random `w`, turning any tensor into a scalar root.
fn weighted(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(x, w)?;
    g.sum(p, None)
}

type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

/// Finite-difference checks of every primitive, each composed with a random weighted sum.
pub fn primitive_checks(fault: Fault) -> Result<Vec<NamedGradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let v = |rng: &mut ChaCha8Rng, n: usize| rand_tensor(rng, &[n], -1.5, 1.5);
    let m = |rng: &mut ChaCha8Rng, r: usize, c: usize| rand_tensor(rng, &[r, c], -1.5, 1.5);
    let cases: Vec<(&str, Builder, Vec<Tensor>)> = vec![
        ("add", Box::new(|g, x| { let y = g.add(x[0], x[1])?; weighted(g, y, 1) }), vec![v(&mut rng, 4), v(&mut rng, 4)]),
        ("add_broadcast", Box::new(|g, x| { let y = g.add(x[0], x[1])?; weighted(g, y, 2) }), vec![v(&mut rng, 4), v(&mut rng, 1)]),
        ("mul", Box::new(|g, x| { let y = g.mul(x[0], x[1])?; weighted(g, y, 3) }), vec![v(&mut rng, 5), v(&mut rng, 5)]),
        ("mul_broadcast", Box::new(|g, x| { let y = g.mul(x[1], x[0])?; weighted(g, y, 4) }), vec![v(&mut rng, 5), v(&mut rng, 1)]),
        ("matvec", Box::new(|g, x| { let y = g.matvec(x[0], x[1])?; weighted(g, y, 5) }), vec![m(&mut rng, 3, 4), v(&mut rng, 4)]),
        ("matvec_t", Box::new(|g, x| { let y = g.matvec_t(x[0], x[1])?; weighted(g, y, 6) }), vec![m(&mut rng, 3, 4), v(&mut rng, 3)]),
        ("row", Box::new(|g, x| { let y = g.row(x[0], 2)?; weighted(g, y, 7) }), vec![m(&mut rng, 4, 3)]),
        ("stack", Box::new(|g, x| { let y = g.stack(x)?; weighted(g, y, 8) }), vec![v(&mut rng, 3), v(&mut rng, 3), v(&mut rng, 3)]),
        ("slice", Box::new(|g, x| { let y = g.slice(x[0], 1, 3)?; weighted(g, y, 9) }), vec![v(&mut rng, 6)]),
        ("concat", Box::new(|g, x| { let y = g.concat(x)?; weighted(g, y, 10) }), vec![v(&mut rng, 2), v(&mut rng, 3)]),
        ("sigmoid", Box::new(|g, x| { let y = g.sigmoid(x[0])?; weighted(g, y, 11) }), vec![v(&mut rng, 5)]),
        ("tanh", Box::new(|g, x| { let y = g.tanh(x[0])?; weighted(g, y, 12) }), vec![v(&mut rng, 5)]),
        ("leaky_relu", Box::new(|g, x| { let y = g.leaky_relu(x[0], 0.1)?; weighted(g, y, 13) }), vec![v(&mut rng, 6)]),
        ("softmax_vector", Box::new(|g, x| { let y = g.softmax(x[0], 0)?; weighted(g, y, 14) }), vec![v(&mut rng, 5)]),
        ("softmax_rows", Box::new(|g, x| { let y = g.softmax(x[0], 1)?; weighted(g, y, 15) }), vec![m(&mut rng, 3, 4)]),
        ("softmax_cols", Box::new(|g, x| { let y = g.softmax(x[0], 0)?; weighted(g, y, 16) }), vec![m(&mut rng, 3, 4)]),
        ("sum_all", Box::new(|g, x| { let y = g.sum(x[0], None)?; g.scale(y, 1.7) }), vec![m(&mut rng, 2, 3)]),
        ("sum_axis0", Box::new(|g, x| { let y = g.sum(x[0], Some(0))?; weighted(g, y, 17) }), vec![m(&mut rng, 3, 4)]),
        ("sum_axis1", Box::new(|g, x| { let y = g.sum(x[0], Some(1))?; weighted(g, y, 18) }), vec![m(&mut rng, 3, 4)]),
        ("max", Box::new(|g, x| { let y = g.max(x)?; weighted(g, y, 19) }), vec![v(&mut rng, 4), v(&mut rng, 4), v(&mut rng, 4)]),
        ("scale", Box::new(|g, x| { let y = g.scale(x[0], -2.5)?; weighted(g, y, 20) }), vec![v(&mut rng, 3)]),
        ("log", Box::new(|g, x| { let y = g.log(x[0])?; weighted(g, y, 21) }), vec![rand_tensor(&mut rng, &[4], 0.2, 3.0)]),
        ("log_prob", Box::new(|g, x| { let y = g.log_prob(x[0])?; weighted(g, y, 22) }), vec![rand_tensor(&mut rng, &[4], 0.05, 0.95)]),
        (
            "gru_step",
            Box::new(|g, x| {
                let y = g.gru_step(x[0], x[1], [x[2], x[3], x[4], x[5], x[6], x[7], x[8], x[9], x[10]])?;
                weighted(g, y, 23)
            }),
            vec![
                v(&mut rng, 3),
                v(&mut rng, 4),
                m(&mut rng, 4, 3),
                m(&mut rng, 4, 4),
                v(&mut rng, 4),
                m(&mut rng, 4, 3),
                m(&mut rng, 4, 4),
                v(&mut rng, 4),
                m(&mut rng, 4, 3),
                m(&mut rng, 4, 4),
                v(&mut rng, 4),
            ],
        ),
    ];
    let opts = GradCheckOptions {
        tolerance: PRIMITIVE_TOLERANCE,
        fault,
        ..GradCheckOptions::default()
    };
    cases
        .into_iter()
        .map(|(name, build, point)| {
            Ok(NamedGradCheck {
                name: name.to_string(),
                report: grad_check_with(build, &point, opts)?,
            })
        })
        .collect()
}

fn module_check<F>(name: &str, params: &ParamStore, inputs: &[Tensor], tolerance: f64, fault: Fault, build: F) -> Result<NamedGradCheck>
where
    F: Fn(&mut Graph, &ParamStore, &[NodeId]) -> Result<NodeId>,
{
    let report = grad_check_model(
        params,
        inputs,
        build,
        GradCheckOptions {
            tolerance,
            fault,
            ..GradCheckOptions::default()
        },
    )?;
    Ok(NamedGradCheck {
        name: name.to_string(),
        report,
    })
}

/// Finite-difference checks of every module (inputs and parameters), and of the
/// end-to-end joint loss of the assembled model.
pub fn module_checks(fault: Fault) -> Result<Vec<NamedGradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut out = Vec::new();
    let vec = |rng: &mut ChaCha8Rng, n: usize| rand_tensor(rng, &[n], -1.0, 1.0);

    {
        let mut pb = ParamBuilder::new(1);
        let fc = FcBlock::new(&mut pb, "fc", 4, 3);
        let gru = GruCell::new(&mut pb, "gru", 3, 3);
        let embed = EmbeddingTable::new(&mut pb, "embed", 5, 3);
        let mut p = pb.finish();
        randomize(&mut p, &mut rng, 0.6);
        let x4 = vec(&mut rng, 4);
        out.push(module_check("fc", &p, &[x4], MODULE_TOLERANCE, fault, |g, p, x| {
            let y = fc.apply(g, p, x[0])?;
            weighted(g, y, 30)
        })?);
        let (x3, h3) = (vec(&mut rng, 3), vec(&mut rng, 3));
        out.push(module_check("gru", &p, &[x3, h3], MODULE_TOLERANCE, fault, |g, p, x| {
            let h = gru.step(g, p, x[0], x[1])?;
            let h = gru.step(g, p, x[0], h)?;
            weighted(g, h, 31)
        })?);
        out.push(module_check("embedding", &p, &[], MODULE_TOLERANCE, fault, |g, p, _| {
            let rows = embed.embed(g, p, &[1, 4, 1])?;
            let s = g.add_all(&rows)?;
            weighted(g, s, 32)
        })?);
    }

    let (k, dv, dq, da) = (3, 4, 3, 3);
    let mut pb = ParamBuilder::new(2);
    let question = QuestionEncoder::new(&mut pb, 8, 3, dq);
    let attention = QuestionVisualAttention::new(&mut pb, dq, dv, 3, da);
    let caption = CaptionEmbedder::new(&mut pb, 8, 3, da, 2, 3);
    let head = VqaHead::new(&mut pb, 3, da, 3, dq, 4);
    let decoder = CaptionDecoder::new(&mut pb, 8, 3, da, 3, 3, 0, 1);
    let mut p = pb.finish();
    randomize(&mut p, &mut rng, 0.6);
    let image: Vec<Tensor> = (0..k).map(|_| vec(&mut rng, dv)).collect();
    let vq: Vec<Tensor> = (0..k).map(|_| vec(&mut rng, da)).collect();
    let captions = vec![vec![2, 5, 3], vec![4, 7]];
    let labels = SoftLabels::new(vec![1.0, 0.0, 1.0 / 3.0, 2.0 / 3.0]).expect("valid labels");

    out.push(module_check("question_encoder", &p, &[], MODULE_TOLERANCE, fault, |g, p, _| {
        let q = question.encode(g, p, &[3, 6, 2, 7])?;
        weighted(g, q, 33)
    })?);
    let mut qin = image.clone();
    qin.push(vec(&mut rng, dq));
    out.push(module_check("question_visual_attention", &p, &qin, MODULE_TOLERANCE, fault, |g, p, x| {
        let att = attention.attend(g, p, &x[..k], x[k])?;
        let s = g.add_all(&att.regions)?;
        weighted(g, s, 34)
    })?);
    out.push(module_check("caption_word_gates", &p, &vq, MODULE_TOLERANCE, fault, |g, p, x| {
        let gates = caption.gate_words(g, p, &captions[0], x)?;
        let s = g.add_all(&gates)?;
        weighted(g, s, 35)
    })?);
    out.push(module_check("caption_embedding", &p, &vq, MODULE_TOLERANCE, fault, |g, p, x| {
        let c = caption.embed(g, p, &captions, x)?;
        weighted(g, c.fused, 36)
    })?);
    let mut cin = vec![vec(&mut rng, 3)];
    cin.extend(vq.iter().cloned());
    out.push(module_check("caption_visual_attention", &p, &cin, MODULE_TOLERANCE, fault, |g, p, x| {
        let (_, pooled) = head.caption_visual_attention(g, p, x[0], &x[1..])?;
        weighted(g, pooled, 37)
    })?);
    let pin = vec![vec(&mut rng, dq), vec(&mut rng, da), vec(&mut rng, 3)];
    out.push(module_check("answer_prediction", &p, &pin, MODULE_TOLERANCE, fault, |g, p, x| {
        let s = head.predict_answers(g, p, x[0], x[1], x[2])?;
        weighted(g, s, 38)
    })?);
    out.push(module_check("vqa_loss", &p, &[vec(&mut rng, 4)], MODULE_TOLERANCE, fault, |g, _, x| {
        let s = g.sigmoid(x[0])?;
        vqa_loss(g, s, &labels)
    })?);
    out.push(module_check("caption_nll", &p, &vq, MODULE_TOLERANCE, fault, |g, p, x| {
        let ctx = decoder.context(g, x)?;
        decoder.caption_nll(g, p, &ctx, &decoder.frame(&captions[1]))
    })?);

    let dims = ModelDims {
        vocab: 8,
        answers: 4,
        region_dim: dv,
        word_dim: 3,
        question_hidden: 3,
        joint: 3,
        attended: 3,
        caption_hidden: 2,
        caption_feature: 3,
        decoder_hidden: 3,
    };
    let (model, mut mp) = JointModel::new(dims, 3);
    randomize(&mut mp, &mut rng, 0.6);
    out.push(module_check("joint_loss", &mp, &image, JOINT_TOLERANCE, fault, |g, p, x| {
        let q = model.question.encode(g, p, &[3, 6, 2])?;
        let att = model.attention.attend(g, p, x, q)?;
        let fwd = model.head(g, p, q, &att.regions, CaptionInput::Captions(&captions), ForwardOptions::default())?;
        let l_vqa = vqa_loss(g, fwd.scores, &labels)?;
        let ctx = model.decoder.context(g, &fwd.vq)?;
        let l_cap = model.decoder.caption_nll(g, p, &ctx, &model.decoder.frame(&captions[0]))?;
        let sel = SelectionOutcome::Selected {
            index: 0,
            inner_product: 1.0,
        };
        crate::selector::joint_loss(g, l_vqa, &[l_cap], sel)
    })?);
    Ok(out)
}

/// Brute-force selection oracle, independent of the library's argmax loop.
pub fn brute_force_select(g_vqa: &FeatureGradients, g_caps: &[FeatureGradients], xi: f64) -> Option<usize> {
    let flat = |g: &FeatureGradients| -> Vec<f64> { g.regions().iter().flat_map(|t| t.data().to_vec()).collect() };
    let a = flat(g_vqa);
    let ips: Vec<f64> = g_caps.iter().map(|c| a.iter().zip(flat(c)).map(|(x, y)| x * y).sum()).collect();
    (0..ips.len()).find(|&j| ips[j] > xi && ips.iter().all(|&o| ips[j] >= o))
}

/// Random selection instances with `k` regions and `candidates` captions. Every
/// fourth instance is built with ties or all-infeasible candidates.
pub fn selection_instance(seed: u64, k: usize, dim: usize, candidates: usize) -> (FeatureGradients, Vec<FeatureGradients>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grads = |rng: &mut ChaCha8Rng| FeatureGradients((0..k).map(|_| rand_tensor(rng, &[dim], -1.0, 1.0)).collect());
    let g = grads(&mut rng);
    let mut caps: Vec<FeatureGradients> = (0..candidates).map(|_| grads(&mut rng)).collect();
    match seed % 4 {
        1 => {
            // Exact ties: duplicate a candidate at a later index.
            let j = rng.random_range(0..candidates - 1);
            caps[candidates - 1] = caps[j].clone();
        }
        2 => {
            // Every candidate opposes the VQA gradient.
            for c in caps.iter_mut() {
                *c = g.scaled(-rng.random_range(0.1..2.0));
            }
        }
        _ => {}
    }
    let xi = [0.0, 0.0, 0.5, -0.25][(seed / 4 % 4) as usize];
    (g, caps, xi)
}

/// Number of disagreements between `select_caption` and the brute-force oracle.
pub fn selection_mismatches(instances: u64) -> Result<usize> {
    let mut bad = 0;
    for seed in 0..instances {
        let (g, caps, xi) = selection_instance(seed, 9, 4, 5);
        let got = select_caption(&g, &caps, SelectionConfig { xi })?.index();
        if got != brute_force_select(&g, &caps, xi) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Largest deviation from 1 of the summed attention weights over random models and inputs.
pub fn attention_normalization_error(trials: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut pb = ParamBuilder::new(seed);
        let head = VqaHead::new(&mut pb, 4, 5, 4, 3, 3);
        let mut p = pb.finish();
        randomize(&mut p, &mut rng, 2.0);
        let mut g = Graph::new();
        let k = rng.random_range(1..10);
        let c = g.input(rand_tensor(&mut rng, &[4], -3.0, 3.0));
        let vq: Vec<NodeId> = (0..k).map(|_| g.input(rand_tensor(&mut rng, &[5], -3.0, 3.0))).collect();
        let (alpha, _) = head.caption_visual_attention(&mut g, &p, c, &vq)?;
        worst = worst.max((g.value(alpha).data().iter().sum::<f64>() - 1.0).abs());
        let logits = g.input(rand_tensor(&mut rng, &[7], -20.0, 20.0));
        let sm = g.softmax(logits, 0)?;
        worst = worst.max((g.value(sm).data().iter().sum::<f64>() - 1.0).abs());
    }
    Ok(worst)
}

pub fn dataset_round_trip() -> Result<bool> {
    let cfg = WorldConfig {
        train_scenes: 30,
        val_scenes: 10,
        ..WorldConfig::default()
    };
    let ds = generate_dataset(&cfg, 77)?;
    let text = dataset_to_string(&ds);
    Ok(parse_dataset(&text, "<memory>")? == ds)
}

fn summarize(checks: &[NamedGradCheck]) -> (bool, String) {
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.report.passed())
        .map(|c| format!("{} (max rel error {:.3e})", c.name, c.report.max_rel_error))
        .collect();
    let worst = checks.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    if failed.is_empty() {
        (true, format!("{} checks, max rel error {worst:.3e}", checks.len()))
    } else {
        (false, format!("failed: {}", failed.join(", ")))
    }
}

/// Runs every suite. `fault` corrupts a primitive derivative to show the checks catch it.
pub fn run(fault: Fault) -> Result<SelfTestReport> {
    let start = Instant::now();
    let mut checks = Vec::new();
    let (ok, detail) = summarize(&primitive_checks(fault)?);
    checks.push(CheckResult {
        name: "primitive gradients".into(),
        passed: ok,
        detail,
    });
    let (ok, detail) = summarize(&module_checks(fault)?);
    checks.push(CheckResult {
        name: "module gradients".into(),
        passed: ok,
        detail,
    });
    let bad = selection_mismatches(500)?;
    checks.push(CheckResult {
        name: "selection vs brute force".into(),
        passed: bad == 0,
        detail: format!("{bad} of 500 instances disagree"),
    });
    let err = attention_normalization_error(200)?;
    checks.push(CheckResult {
        name: "attention normalization".into(),
        passed: err <= 1e-12,
        detail: format!("max |Σα − 1| = {err:.3e}"),
    });
    let rt = dataset_round_trip()?;
    checks.push(CheckResult {
        name: "dataset round trip".into(),
        passed: rt,
        detail: if rt { "identical".into() } else { "differs".into() },
    });
    Ok(SelfTestReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}
