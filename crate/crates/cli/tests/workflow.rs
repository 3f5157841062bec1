//! End-to-end runs of the `mgproto` binary on small generated datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mgproto::tensorio::read_predictions;

fn mgproto(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgproto"))
        .args(args)
        .output()
        .expect("spawn mgproto")
}

fn ok(args: &[&str]) -> String {
    let out = mgproto(args);
    assert!(
        out.status.success(),
        "mgproto {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    mgproto(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// 3 classes, 2/1/1 clips per class.
fn tiny(dir: &Path) -> PathBuf {
    let d = dir.join("data");
    ok(&["gen", "--out", s(&d), "--num-classes", "3", "--clips-train", "2", "--clips-val", "1", "--clips-test", "1"]);
    d
}

fn summary_value(run: &Path, key: &str) -> f64 {
    let text = fs::read_to_string(run.join("summary.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix(' '))
        .unwrap_or_else(|| panic!("{key} missing"))
        .parse()
        .unwrap()
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["gen", "--out", s(out), "--num-classes", "3", "--clips-train", "2", "--clips-val", "1", "--clips-test", "1", "--seed", "11"]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 10);
    assert_eq!(ta, tb);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "gen.num_classes = 3\ngen.clips_train = 1\ngen.clips_val = 1\ngen.clips_test = 1\n").unwrap();
    let out = dir.path().join("d");
    ok(&["gen", "--out", s(&out), "--config", s(&cfg), "--num-classes", "2"]);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l == "num_classes 2"), "{manifest}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    // unknown flag and contradictory shapes are validation errors
    assert_eq!(code(&["train", "--bogus"]), 2);
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "gen.t_pose = 30\n").unwrap();
    assert_eq!(code(&["gen", "--out", s(&out), "--config", s(&bad)]), 2);
    fs::write(&bad, "alpha = 1\n").unwrap();
    assert_eq!(code(&["gen", "--out", s(&out), "--config", s(&bad)]), 2);
    // missing inputs are I/O errors
    let missing = dir.path().join("missing");
    assert_eq!(code(&["train", "--data", s(&missing), "--out", s(&out)]), 4);
    assert_eq!(code(&["gen", "--out", s(&out), "--config", s(&missing)]), 4);
    // a diverging run stops with the numerical-failure code and a dump
    let data = tiny(dir.path());
    let run = dir.path().join("diverge");
    assert_eq!(code(&["train", "--data", s(&data), "--out", s(&run), "--epochs", "2", "--lr", "1e30"]), 3);
    assert!(run.join("run_manifest.txt").exists());
    assert!(fs::read_to_string(run.join("nonfinite.txt")).unwrap().contains("non-finite"));
}

#[test]
fn train_eval_ensemble_report_replay() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&run), "--epochs", "2", "--alpha", "0.5"]);
    for f in ["run_manifest.txt", "record.tsv", "proto_drift.tsv", "summary.txt", "best/index.txt", "last/index.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(run.join("run_manifest.txt")).unwrap();
    assert!(manifest.contains("run.finished"));
    assert!(manifest.contains("train.alpha = 0.5"));

    let preds = dir.path().join("test.tsv");
    let confusion = dir.path().join("confusion.tsv");
    ok(&["eval", "--data", s(&data), "--checkpoint", s(&run.join("best")), "--out", s(&preds), "--confusion", s(&confusion)]);
    let p = read_predictions(&preds).unwrap();
    assert_eq!((p.len(), p.num_classes()), (3, 3));
    let counts: Vec<usize> = fs::read_to_string(&confusion)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').skip(1).map(|v| v.parse::<usize>().unwrap()).sum())
        .collect();
    assert_eq!(counts, vec![1, 1, 1]);

    let ens = dir.path().join("ens.tsv");
    ok(&["ensemble", s(&preds), s(&preds), "--weights", "1", "1", "--out", s(&ens)]);
    assert_eq!(fs::read(&preds).unwrap(), fs::read(&ens).unwrap());
    assert_eq!(code(&["ensemble", s(&preds), "--weights", "1", "1", "--out", s(&ens)]), 2);

    let report = dir.path().join("report");
    ok(&["report", "--run", s(&run), "--out", s(&report)]);
    for f in ["loss.png", "accuracy.png", "drift.png", "confusion.png", "report.md"] {
        assert!(report.join(f).exists(), "{f}");
    }

    let again = dir.path().join("replay");
    ok(&["train", "--replay", s(&run.join("run_manifest.txt")), "--out", s(&again)]);
    assert_eq!(
        fs::read(run.join("record.tsv")).unwrap(),
        fs::read(again.join("record.tsv")).unwrap()
    );
}

#[test]
fn joint_start_keeps_branch_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--out", s(&data), "--seed", "7"]);
    let branch = |stage: &str| {
        let run = dir.path().join(stage);
        ok(&["train", "--data", s(&data), "--out", s(&run), "--stage", stage, "--epochs", "5"]);
        run
    };
    let (rgb, pose) = (branch("rgb"), branch("pose"));
    let joint = dir.path().join("joint");
    ok(&[
        "train", "--data", s(&data), "--out", s(&joint), "--stage", "joint", "--epochs", "1",
        "--init-rgb", s(&rgb.join("best")), "--init-pose", s(&pose.join("best")),
    ]);
    let start = summary_value(&joint, "initial_val_fused");
    for run in [&rgb, &pose] {
        let branch_val = summary_value(run, "best_val_fused");
        assert!(start >= branch_val - 0.05, "joint start {start} vs branch {branch_val}");
    }
}
