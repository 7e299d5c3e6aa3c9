use std::path::Path;
use std::process::{Command, Output};

fn capvqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capvqa"))
        .args(args)
        .output()
        .expect("spawn capvqa")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_data(dir: &Path) -> String {
    let path = dir.join("world.mw1");
    let p = path.to_str().unwrap().to_string();
    let o = capvqa(&["gen-data", "--seed", "5", "--train-scenes", "24", "--val-scenes", "8", "--out", &p]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    p
}

#[test]
fn selftest_passes_and_fault_is_detected() {
    let ok = capvqa(&["selftest"]);
    assert!(ok.status.success());
    assert!(!stdout(&ok).contains("FAIL"));

    let bad = capvqa(&["selftest", "--inject-fault"]);
    assert!(!bad.status.success());
    assert!(stdout(&bad).contains("FAIL primitive gradients"));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_data(dir.path());
    let b = dir.path().join("again.mw1");
    let o = capvqa(&["gen-data", "--seed", "5", "--train-scenes", "24", "--val-scenes", "8", "--out", b.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn train_evaluate_answer_caption() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny run\nphase1_epochs=1\nphase2_epochs=1\nhidden=6\n").unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();

    let o = capvqa(&["--config", cfg.to_str().unwrap(), "--seed", "2", "--out", run_s, "train", "--data", &data]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.bin", "metrics.csv", "generated_captions.tsv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,phase,vqa_loss"));

    let ckpt = run.join("checkpoint.bin");
    let ckpt = ckpt.to_str().unwrap();
    let o = capvqa(&["evaluate", "--checkpoint", ckpt, "--data", &data, "--captions", "zeroed"]);
    assert!(o.status.success());
    let report = stdout(&o);
    assert!(report.starts_with("all,yesno,num,other,info"), "{report}");

    let o = capvqa(&["answer", "--checkpoint", ckpt, "--data", &data, "--scene", "0", "--question", "is there a red cube"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    let (_, score) = line.trim_end().rsplit_once('\t').unwrap();
    let score: f64 = score.parse().unwrap();
    assert!((0.0..=1.0).contains(&score));

    let o = capvqa(&["caption", "--checkpoint", ckpt, "--data", &data, "--scene", "0", "--beam", "2"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains('\t'));
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate=0.1\n").unwrap();
    let o = capvqa(&["--config", cfg.to_str().unwrap(), "train", "--data", "nowhere.mw1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let o = capvqa(&["evaluate", "--checkpoint", "missing.bin", "--data", "missing.mw1"]);
    assert!(!o.status.success());
}
