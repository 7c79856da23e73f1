use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn tssan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tssan"))
        .args(args)
        .output()
        .expect("running tssan")
}

fn ok(args: &[&str]) -> String {
    let out = tssan(args);
    assert!(
        out.status.success(),
        "tssan {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    tssan(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic train split: 3 labels, 6 clips each, 16 frames.
fn toy_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "prepare", "--synthetic", "--labels", "3", "--per-label", "6", "--frames", "16", "--out", s(&data),
    ]);
    data.join("train.manifest")
}

const TOY_MODEL: &[&str] = &[
    "--encoder", "ff", "--ff-width", "4", "--frames", "4", "--segments", "2", "--layers", "1", "--heads", "2",
    "--batch-size", "6", "--lr", "0.003",
];

fn train_toy(manifest: &Path, out: &Path, epochs: &str, extra: &[&str]) {
    let mut args = vec!["train", "--train", s(manifest), "--val", s(manifest), "--out", s(out), "--epochs", epochs];
    args.extend_from_slice(TOY_MODEL);
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&["--help"]), 0);
    for sub in ["prepare", "train", "eval", "export-attention"] {
        assert_eq!(code(&[sub, "--help"]), 0, "{sub}");
    }
}

#[test]
fn prepare_writes_balanced_deterministic_data() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = ok(&["prepare", "--synthetic", "--val-per-label", "5", "--seed", "3", "--out", s(d)]);
        assert!(out.contains("train: 200 samples (0:50 1:50 2:50 3:50)"), "{out}");
        assert!(out.contains("val: 20 samples"), "{out}");
    }
    let manifest = fs::read_to_string(a.join("train.manifest")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.contains("train_")).count(), 200);
    for name in ["train.manifest", "train_00000.txt", "train_00199.txt", "val_00019.txt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn prepare_normalizes_a_raw_directory() {
    let dir = TempDir::new().unwrap();
    let raw = dir.path().join("raw");
    ok(&["prepare", "--synthetic", "--labels", "2", "--per-label", "2", "--frames", "10", "--joints", "18", "--out", s(&raw)]);
    let out = dir.path().join("norm");
    let text = ok(&[
        "prepare", "--input", s(&raw), "--kind", "kinetics", "--pad-frames", "12", "--split", "test", "--out", s(&out),
    ]);
    assert!(text.contains("test: 4 samples (0:2 1:2)"), "{text}");
    let sample = fs::read_to_string(out.join("test_00000.txt")).unwrap();
    assert!(!sample.is_empty());
    assert!(out.join("test.manifest").exists());
}

#[test]
fn prepare_rejects_missing_input_directory() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(code(&["prepare", "--input", s(&missing), "--out", s(dir.path())]), 2);
    assert_eq!(code(&["prepare", "--out", s(dir.path())]), 2);
}

#[test]
fn train_writes_outputs_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let manifest = toy_data(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_toy(&manifest, &a, "3", &[]);
    train_toy(&manifest, &b, "3", &[]);
    for name in ["config.toml", "metrics.log", "timing.log", "last.ckpt", "best.ckpt"] {
        assert!(a.join(name).exists(), "{name}");
    }
    let log = fs::read_to_string(a.join("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch=1 loss="), "{log}");
    assert_eq!(log, fs::read_to_string(b.join("metrics.log")).unwrap());
    assert_eq!(fs::read(a.join("last.ckpt")).unwrap(), fs::read(b.join("last.ckpt")).unwrap());
    assert_eq!(fs::read_to_string(a.join("timing.log")).unwrap().lines().count(), 3);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = TempDir::new().unwrap();
    let manifest = toy_data(dir.path());
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    train_toy(&manifest, &full, "4", &[]);
    train_toy(&manifest, &part, "2", &[]);
    let ckpt = part.join("last.ckpt");
    train_toy(&manifest, &part, "4", &["--resume", s(&ckpt)]);
    assert_eq!(
        fs::read_to_string(full.join("metrics.log")).unwrap(),
        fs::read_to_string(part.join("metrics.log")).unwrap()
    );
    assert_eq!(fs::read(full.join("last.ckpt")).unwrap(), fs::read(part.join("last.ckpt")).unwrap());
}

#[test]
fn train_reads_a_config_file_with_flag_overrides() {
    let dir = TempDir::new().unwrap();
    let manifest = toy_data(dir.path());
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "[data]\ntrain = {m:?}\nval = {m:?}\n\n[model]\nencoder = \"ff\"\nff_width = 4\nlayers = 1\nheads = 2\n\n\
             [tsn]\nsegments = 2\nframes_per_segment = 4\n\n[train]\nepochs = 5\nbatch_size = 6\n",
            m = s(&manifest)
        ),
    )
    .unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--epochs", "1", "--out", s(&out)]);
    let written = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(written.contains("epochs = 1"), "{written}");
    assert!(written.contains("encoder = \"ff\""), "{written}");
    assert!(written.contains("num_labels = 3"), "{written}");

    fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&cfg), "--out", s(&out)]), 2);
}

#[test]
fn train_rejects_invalid_settings() {
    let dir = TempDir::new().unwrap();
    let manifest = toy_data(dir.path());
    let out = dir.path().join("run");
    let base = ["train", "--train", s(&manifest), "--val", s(&manifest), "--out", s(&out)];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        code(&a)
    };
    assert_eq!(with(&["--consensus", "median"]), 2);
    assert_eq!(with(&["--heads", "5", "--layers", "1", "--epochs", "1"]), 2);
    assert_eq!(with(&["--segments", "0"]), 2);
    assert_eq!(code(&["train", "--out", s(&out)]), 2);
}

#[test]
fn divergence_exits_three() {
    let dir = TempDir::new().unwrap();
    let manifest = toy_data(dir.path());
    let out = dir.path().join("run");
    let mut args = vec!["train", "--train", s(&manifest), "--val", s(&manifest), "--out", s(&out), "--epochs", "3"];
    args.extend_from_slice(TOY_MODEL);
    args.extend_from_slice(&["--lr", "1e300"]);
    let res = tssan(&args);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("non-finite loss"));
}

#[test]
fn eval_reports_accuracy_of_an_overfit_model() {
    let dir = TempDir::new().unwrap();
    let manifest = toy_data(dir.path());
    let run = dir.path().join("run");
    train_toy(&manifest, &run, "15", &[]);
    let ckpt = run.join("last.ckpt");
    let first = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&manifest)]);
    assert_eq!(first.trim(), "top1=1 top5=1");
    let again = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&manifest), "--batch-size", "4"]);
    assert_eq!(first, again);
}

#[test]
fn eval_rejects_missing_or_mismatched_inputs() {
    let dir = TempDir::new().unwrap();
    let manifest = toy_data(dir.path());
    let missing = dir.path().join("none.ckpt");
    assert_eq!(code(&["eval", "--checkpoint", s(&missing), "--data", s(&manifest)]), 2);

    let run = dir.path().join("run");
    train_toy(&manifest, &run, "1", &[]);
    let other = dir.path().join("other");
    ok(&["prepare", "--synthetic", "--labels", "3", "--per-label", "2", "--joints", "5", "--frames", "16", "--out", s(&other)]);
    let ckpt = run.join("last.ckpt");
    let wrong = other.join("train.manifest");
    assert_eq!(code(&["eval", "--checkpoint", s(&ckpt), "--data", s(&wrong)]), 2);
}

fn read_matrix(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn export_writes_one_distribution_matrix_per_head() {
    let dir = TempDir::new().unwrap();
    let manifest = toy_data(dir.path());
    let run = dir.path().join("run");
    train_toy(&manifest, &run, "1", &["--heads", "2", "--layers", "2"]);
    let ckpt = run.join("last.ckpt");
    let sample = dir.path().join("data").join("train_00000.txt");
    let att = dir.path().join("att");
    ok(&["export-attention", "--checkpoint", s(&ckpt), "--sample", s(&sample), "--out", s(&att), "--all-layers", "--segment", "1", "--scale", "3"]);
    let mut csv: Vec<String> = fs::read_dir(&att)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    csv.sort();
    assert_eq!(
        csv,
        [
            "person_seg1_p0_layer0_head0.csv",
            "person_seg1_p0_layer0_head1.csv",
            "person_seg1_p0_layer1_head0.csv",
            "person_seg1_p0_layer1_head1.csv",
        ]
    );
    for name in &csv {
        let m = read_matrix(&att.join(name));
        assert_eq!(m.len(), 4);
        for row in &m {
            assert_eq!(row.len(), 4);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6, "{row:?}");
        }
        let pgm = fs::read_to_string(att.join(name.replace(".csv", ".pgm"))).unwrap();
        assert!(pgm.starts_with("P2\n12 12\n255\n"), "{pgm}");
        assert!(pgm.split_whitespace().skip(4).any(|v| v == "255"));
    }
}

#[test]
fn export_rejects_out_of_range_indices() {
    let dir = TempDir::new().unwrap();
    let manifest = toy_data(dir.path());
    let run = dir.path().join("run");
    train_toy(&manifest, &run, "1", &[]);
    let ckpt = run.join("last.ckpt");
    let sample = dir.path().join("data").join("train_00000.txt");
    let att = dir.path().join("att");
    let base = ["export-attention", "--checkpoint", s(&ckpt), "--sample", s(&sample), "--out", s(&att)];
    for extra in [["--layer", "1"], ["--head", "2"], ["--segment", "2"], ["--person", "2"]] {
        let mut a = base.to_vec();
        a.extend_from_slice(&extra);
        assert_eq!(code(&a), 2, "{extra:?}");
    }
    let mut a = base.to_vec();
    a.extend_from_slice(&["--layer", "0", "--head", "1", "--person", "1"]);
    assert_eq!(code(&a), 0);
    assert!(att.join("person_seg0_p1_layer0_head1.csv").exists());
}
