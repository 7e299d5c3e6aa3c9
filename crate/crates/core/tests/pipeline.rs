use capvqa::captioner::DecodeMode;
use capvqa::harness::{self, Checkpoint, Predictor, RunControl, TrainConfig, CHECKPOINT_FILE, GENERATED_FILE, METRICS_FILE};
use capvqa::metrics::{Ablation, CaptionSource};
use capvqa::microworld::{self, Split, WorldConfig};
use capvqa::Error;
use proptest::prelude::*;

fn small_world(seed: u64) -> microworld::Dataset {
    let cfg = WorldConfig {
        train_scenes: 30,
        val_scenes: 10,
        ..WorldConfig::default()
    };
    microworld::generate_dataset(&cfg, seed).unwrap()
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        phase1_epochs: 1,
        phase2_epochs: 1,
        hidden: 6,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn train_then_reload_and_evaluate() {
    let ds = small_world(2);
    let dir = tempfile::tempdir().unwrap();
    let run = harness::train(&tiny_config(2), &ds, dir.path(), RunControl::default()).unwrap();
    assert_eq!(run.rows.len(), 2);
    assert_eq!((run.rows[0].phase, run.rows[1].phase), (1, 2));
    for f in [CHECKPOINT_FILE, METRICS_FILE, GENERATED_FILE] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert_eq!(harness::read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), run.rows);

    let ckpt = dir.path().join(CHECKPOINT_FILE);
    let in_memory = run.evaluator(&ds).report(Split::Val, CaptionSource::Annotated, Ablation::None).unwrap();
    let reloaded = harness::evaluate(&ckpt, &ds, Split::Val, CaptionSource::Annotated, Ablation::None).unwrap();
    assert_eq!(in_memory.all, reloaded.all);
    assert!((0.0..=1.0).contains(&reloaded.all));

    let loaded = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.epoch, 2);
    assert_eq!(loaded.params, run.params);

    let p = Predictor::load(&ds, &ckpt).unwrap();
    let scene = &ds.val[0];
    let question = ds.detokenize(&scene.questions[0].tokens);
    let a = p.answer(&ds, scene.scene.id, &question, CaptionSource::Zeroed).unwrap();
    assert!(ds.answers.contains(&a.answer));
    assert!(a.captions.is_empty());
    let a = p.answer(&ds, scene.scene.id, &question, CaptionSource::Annotated).unwrap();
    assert_eq!(a.captions.len(), scene.captions.len());
    let (_, greedy) = p.caption(&ds, scene.scene.id, &question, DecodeMode::Greedy).unwrap();
    let (_, beam) = p.caption(&ds, scene.scene.id, &question, DecodeMode::Beam(3)).unwrap();
    assert!(beam.logprob >= greedy.logprob);
    assert!(p.answer(&ds, 10_000, &question, CaptionSource::Annotated).is_err());
}

#[test]
fn checkpoint_rejects_other_dataset() {
    let ds = small_world(3);
    let dir = tempfile::tempdir().unwrap();
    harness::train(&TrainConfig { phase2_epochs: 0, ..tiny_config(3) }, &ds, dir.path(), RunControl::default()).unwrap();
    let other = microworld::generate_dataset(
        &WorldConfig {
            categories: 5,
            train_scenes: 10,
            val_scenes: 4,
            ..WorldConfig::default()
        },
        3,
    )
    .unwrap();
    let e = harness::evaluate(&dir.path().join(CHECKPOINT_FILE), &other, Split::Val, CaptionSource::Zeroed, Ablation::None);
    assert!(matches!(e, Err(Error::DimensionMismatch { .. })), "{e:?}");
}

#[test]
fn dataset_file_round_trip() {
    let ds = small_world(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.mw1");
    microworld::write_dataset(&ds, &path).unwrap();
    assert_eq!(microworld::read_dataset(&path).unwrap(), ds);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn config_text_round_trips(lr in 1e-4f64..1.0, batch in 1usize..256, p1 in 1usize..40, p2 in 0usize..40, seed in any::<u64>()) {
        let text = format!("lr = {lr}\nbatch_size={batch}\n# comment\nphase1_epochs={p1}\nphase2_epochs={p2}\nseed={seed}\n");
        let cfg = TrainConfig::parse(&text).unwrap();
        prop_assert_eq!(cfg.lr, lr);
        prop_assert_eq!(cfg.batch_size, batch);
        prop_assert_eq!(cfg.total_epochs(), p1 + p2);
        prop_assert_eq!(cfg.seed, seed);
        prop_assert_eq!(cfg.lr_for_epoch(p1 + 1), lr * cfg.phase2_lr_factor);
    }

    #[test]
    fn generated_worlds_are_seed_deterministic(seed in 0u64..1000) {
        let cfg = WorldConfig { train_scenes: 4, val_scenes: 2, ..WorldConfig::default() };
        let a = microworld::generate_dataset(&cfg, seed).unwrap();
        let b = microworld::generate_dataset(&cfg, seed).unwrap();
        prop_assert_eq!(microworld::dataset_to_string(&a), microworld::dataset_to_string(&b));
        prop_assert_eq!(microworld::parse_dataset(&microworld::dataset_to_string(&a), "mem").unwrap(), a);
    }
}
