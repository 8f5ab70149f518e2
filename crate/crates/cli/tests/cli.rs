use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY: &[&str] = &[
    "--d-model", "16", "--n-heads", "2", "--n-layers", "1", "--d-ff", "32",
    "--max-seq-len", "16", "--seq-len", "16", "--batch-size", "2", "--rank", "2",
    "--eval-windows", "16",
];

fn lrqat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrqat")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY.iter().copied()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Corpus and a briefly pretrained tiny model, shared by the tests.
fn fixture() -> &'static (tempfile::TempDir, PathBuf, PathBuf) {
    static F: OnceLock<(tempfile::TempDir, PathBuf, PathBuf)> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.txt");
        let model = dir.path().join("fp.lrqt");
        let o = lrqat(&["gen-corpus", "--out", s(&corpus), "--bytes", "20000", "--seed", "3"]);
        assert!(o.status.success());
        let o = lrqat(&with_tiny(&[
            "pretrain", "--corpus", s(&corpus), "--out", s(&model), "--steps", "40",
        ]));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (dir, corpus, model)
    })
}

#[test]
fn pretrain_writes_report_and_metrics() {
    let (dir, corpus, _) = fixture();
    let out = dir.path().join("p2.lrqt");
    let report = dir.path().join("p2.json");
    let metrics = dir.path().join("p2.csv");
    let o = lrqat(&with_tiny(&[
        "pretrain", "--corpus", s(corpus), "--out", s(&out), "--steps", "6", "--eval-every", "3",
        "--report", s(&report), "--metrics", s(&metrics),
    ]));
    assert!(o.status.success());
    assert!(stdout(&o).contains("final ppl"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["metrics"].as_array().unwrap().len(), 6);
    let csv = std::fs::read_to_string(&metrics).unwrap();
    let steps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4", "5", "6"]);
    assert!(csv.starts_with("step,lr,train_loss,val_ppl\n"));
}

#[test]
fn missing_corpus_is_a_usage_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never.lrqt");
    let o = lrqat(&with_tiny(&[
        "pretrain", "--corpus", s(&dir.path().join("nope.txt")), "--out", s(&out),
    ]));
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn config_file_errors_exit_2() {
    let (dir, corpus, _) = fixture();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"steps": 3, "learning_rate": 1.0}"#).unwrap();
    let out = dir.path().join("bad.lrqt");
    let o = lrqat(&["pretrain", "--corpus", s(corpus), "--out", s(&out), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    assert!(!out.exists());

    // Rank too large for the model is an invalid combination.
    let o = lrqat(&with_tiny(&["pretrain", "--corpus", s(corpus), "--out", s(&out), "--rank", "16"]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let (dir, corpus, _) = fixture();
    let cfg = dir.path().join("ok.json");
    std::fs::write(&cfg, r#"{"steps": 1000, "eval_every": 2}"#).unwrap();
    let out = dir.path().join("ok.lrqt");
    let report = dir.path().join("ok.json.out");
    let mut args = with_tiny(&["pretrain", "--corpus", s(corpus), "--out", s(&out)]);
    args.extend(["--config", s(&cfg), "--steps", "4", "--report", s(&report)]);
    let o = lrqat(&args);
    assert!(o.status.success());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["steps"], 4);
    assert!(json["metrics"][1]["val_ppl"].is_number());
}

#[test]
fn rtn_reports_the_chosen_estimator() {
    let (dir, corpus, model) = fixture();
    let report = dir.path().join("rtn.json");
    let o = lrqat(&with_tiny(&[
        "rtn", "--model", s(model), "--corpus", s(corpus), "--bits", "3", "--report", s(&report),
    ]));
    assert!(o.status.success());
    let text = stdout(&o);
    for label in ["min-max", "L2 ", "L2.4", "L3 ", "L3.5", "L4 ", "L5 "] {
        assert!(text.contains(label), "{label} missing from {text}");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let best = json["best_label"].as_str().unwrap();
    assert!(text.contains(&format!("best     {best} ppl")));
}

#[test]
fn fuse_then_eval_reproduces_simulated_eval() {
    let (dir, corpus, model) = fixture();
    let fused = dir.path().join("lr_fused.lrqt");
    let sim = dir.path().join("lr_sim.lrqt");
    let refused = dir.path().join("lr_refused.lrqt");
    let o = lrqat(&with_tiny(&[
        "train-lrqat", "--model", s(model), "--corpus", s(corpus), "--out", s(&fused),
        "--simulated-out", s(&sim), "--steps", "5", "--bits", "4", "--estimator", "L2.4",
        "--downcast", "int_packed", "--init", "loftq",
    ]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = lrqat(&["fuse", "--model", s(&sim), "--out", s(&refused)]);
    assert!(o.status.success());

    let eval = |p: &Path| {
        let o = lrqat(&with_tiny(&["eval", "--model", s(p), "--corpus", s(corpus)]));
        assert!(o.status.success());
        stdout(&o)
    };
    let e = eval(&sim);
    assert!(e.starts_with("ppl "));
    assert_eq!(eval(&refused), e);
    assert_eq!(eval(&fused), e);
    assert_eq!(std::fs::read(&fused).unwrap(), std::fs::read(&refused).unwrap());
}

#[test]
fn lsq_training_and_fp_fuse_failure() {
    let (dir, corpus, model) = fixture();
    let out = dir.path().join("lsq.lrqt");
    let o = lrqat(&with_tiny(&[
        "train-lsq", "--model", s(model), "--corpus", s(corpus), "--out", s(&out), "--steps", "3",
        "--estimator", "minmax",
    ]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mode           lsq"));

    let o = lrqat(&["fuse", "--model", s(model), "--out", s(&dir.path().join("x.lrqt"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupted_checkpoint_is_a_runtime_error() {
    let (dir, corpus, model) = fixture();
    let bad = dir.path().join("bad.lrqt");
    let mut bytes = std::fs::read(model).unwrap();
    bytes[1] = b'X';
    std::fs::write(&bad, bytes).unwrap();
    let o = lrqat(&with_tiny(&["eval", "--model", s(&bad), "--corpus", s(corpus)]));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("offset 0"));
}

#[test]
fn mem_report_prints_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("mem.json");
    let o = lrqat(&[
        "mem-report", "--d-model", "1024", "--d-ff", "4096", "--n-heads", "16", "--bits", "3",
        "--report", s(&report),
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("at m=k=4096, r=32: 1.5625%"), "{text}");
    assert!(text.contains("lrqat-Q3.5"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["rank"], 32);
}

#[test]
fn ablations_run_on_tiny_model() {
    let (dir, corpus, model) = fixture();
    let report = dir.path().join("abl.json");
    let o = lrqat(&with_tiny(&[
        "ablate-rank", "--model", s(model), "--corpus", s(corpus), "--ranks", "1,2",
        "--steps", "2", "--estimator", "minmax", "--report", s(&report),
    ]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);

    let o = lrqat(&with_tiny(&[
        "ablate-downcast", "--model", s(model), "--corpus", s(corpus), "--steps", "1",
        "--bits", "4", "--estimator", "minmax", "--report", s(&report),
    ]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 12);
    assert!(stdout(&o).contains("loftq(T=64)"));
}
