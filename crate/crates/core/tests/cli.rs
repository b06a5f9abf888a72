use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use graph_rerank::store::{load_descriptors, load_ground_truth, save_descriptors, save_submission};
use graph_rerank::{DescriptorSet, ImageId, Role};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graph-rerank"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn synth(dir: &Path) {
    ok(&[
        "synth", "--clusters", "3", "--queries", "2", "--index", "8", "--train", "4", "--dim", "16", "--keypoints",
        "20", "--out-dir", &path(dir, ""),
    ]);
}

#[test]
fn perfect_submission_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let truth = load_ground_truth(dir.path().join("truth.csv")).unwrap();
    let rows: Vec<(ImageId, Vec<ImageId>)> =
        truth.iter().map(|(q, r)| (q.clone(), r.iter().cloned().collect())).collect();
    save_submission(rows.iter().map(|(q, r)| (q, r.as_slice())), dir.path().join("perfect.csv")).unwrap();
    let out = ok(&[
        "eval", "--submission", &path(dir.path(), "perfect.csv"), "--truth", &path(dir.path(), "truth.csv"),
    ]);
    assert!(out.starts_with("mAP@100 1.000000 over 6 queries (0 missing)"), "{out}");
}

#[test]
fn semisup_without_labels_is_a_usage_error() {
    // The graph does not exist: validation must fail before anything is read.
    let out = run(&[
        "rerank", "--graph", "/nonexistent/graph.csv", "--query", "/nonexistent/q.gds", "--index",
        "/nonexistent/i.gds", "--t", "0.5", "--semisup", "--out", "/nonexistent/out.csv",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--labels"), "{stderr}");
}

#[test]
fn failures_name_the_stage() {
    let out = run(&["knn", "--query", "/nonexistent/q.gds", "--index", "/nonexistent/i.gds", "--out", "/tmp/x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: knn"), "{stderr}");
}

#[test]
fn stages_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    for round in ["a", "b"] {
        ok(&[
            "knn", "--query", &path(d, "query.gds"), "--index", &path(d, "index.gds"), "--k", "10", "--out",
            &path(d, &format!("knn_{round}.csv")),
        ]);
        ok(&[
            "qesv", "--graph", &path(d, "knn_a.csv"), "--query", &path(d, "query.gds"), "--index",
            &path(d, "index.gds"), "--local", &path(d, "local.glf"), "--k", "10", "--out",
            &path(d, &format!("qe_{round}.csv")), "--out-query", &path(d, &format!("q_{round}.gds")),
            "--out-index", &path(d, &format!("i_{round}.gds")),
        ]);
        ok(&[
            "rerank", "--graph", &path(d, "qe_a.csv"), "--query", &path(d, "q_a.gds"), "--index",
            &path(d, "i_a.gds"), "--t", "0.6", "--p", "20", "--out", &path(d, &format!("sub_{round}.csv")),
        ]);
    }
    for stem in ["knn", "qe", "q", "i", "sub"] {
        let ext = if stem.len() == 1 { "gds" } else { "csv" };
        let a = fs::read(d.join(format!("{stem}_a.{ext}"))).unwrap();
        let b = fs::read(d.join(format!("{stem}_b.{ext}"))).unwrap();
        assert_eq!(a, b, "{stem} differs between runs");
    }
    let header = fs::read_to_string(d.join("knn_a.csv")).unwrap();
    assert!(header.starts_with("source,target,weight\n"));
    let sub = fs::read_to_string(d.join("sub_a.csv")).unwrap();
    assert_eq!(sub.lines().count(), 7);
    assert!(sub.lines().skip(1).all(|l| l.split(',').nth(1).unwrap().split(' ').count() == 20));
}

#[test]
fn ablate_writes_four_stages() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let stdout = ok(&[
        "ablate", "--query", &path(d, "query.gds"), "--index", &path(d, "index.gds"), "--local",
        &path(d, "local.glf"), "--truth", &path(d, "truth.csv"), "--k", "10", "--t", "0.7", "--semisup",
        "--labels", &path(d, "labels.csv"), "--train-desc", &path(d, "train.gds"), "--out", &path(d, "map.csv"),
    ]);
    assert!(stdout.contains("+SemiSup-EGT"), "{stdout}");
    let csv = fs::read_to_string(d.join("map.csv")).unwrap();
    let stages: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(stages, ["stage", "Blend", "+QE-SV", "+EGT", "+SemiSup-EGT"]);
}

#[test]
fn blend_concatenates_and_renormalizes() {
    let dir = tempfile::tempdir().unwrap();
    let a = DescriptorSet::from_rows(2, Role::Query, [("x", vec![1.0, 0.0]), ("y", vec![0.0, 1.0])]).unwrap();
    let b = DescriptorSet::from_rows(1, Role::Query, [("y", vec![1.0]), ("x", vec![1.0])]).unwrap();
    save_descriptors(&a, dir.path().join("a.gds")).unwrap();
    save_descriptors(&b, dir.path().join("b.gds")).unwrap();
    ok(&[
        "blend", "--a", &path(dir.path(), "a.gds"), "--b", &path(dir.path(), "b.gds"), "--out",
        &path(dir.path(), "ab.gds"),
    ]);
    let ab = load_descriptors(dir.path().join("ab.gds"), Role::Query).unwrap();
    let h = std::f32::consts::FRAC_1_SQRT_2;
    assert_eq!(ab.dim(), 3);
    assert_eq!(ab.get("x").unwrap(), &[h, 0.0, h]);
    assert_eq!(ab.get("y").unwrap(), &[0.0, h, h]);
}
