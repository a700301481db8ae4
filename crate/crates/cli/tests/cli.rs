use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use walkdir::WalkDir;

fn ddad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddad")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ddad(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 8] = ["--n-normal", "6", "--m-unlabeled", "6", "--t-normal", "3", "--t-abnormal", "3"];

fn synth(dir: &Path, ar: &str) {
    let mut args = vec!["synth", "--ar", ar, "--out", s(dir), "--seed", "4"];
    args.extend(TINY);
    ok(&args);
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(dir).unwrap().display().to_string(), fs::read(e.path()).unwrap()))
        .collect()
}

#[test]
fn synth_then_train_aeu_writes_six_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let run = tmp.path().join("run");
    synth(&data, "0.6");
    ok(&["train", "--data", s(&data), "--backbone", "aeu", "--epochs", "1", "--batch-size", "4", "--out", s(&run)]);
    let mut ckpts: Vec<String> = fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    ckpts.sort();
    let expected: Vec<String> =
        ["A", "B"].iter().flat_map(|m| (0..3).map(move |i| format!("module{m}_member{i}.ckpt"))).collect();
    assert_eq!(ckpts, expected);
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,member,role,loss\n"));
    assert_eq!(loss.lines().count(), 1 + 6);
}

#[test]
fn train_never_reads_test_images_or_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data, "0.5");
    // Anything train tried to decode here would fail.
    for dir in ["test/normal", "test/abnormal"] {
        fs::write(data.join(dir).join("00000.pgm"), b"garbage").unwrap();
    }
    fs::write(data.join("provenance.csv"), b"\xff\xfe not csv").unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--data", s(&data), "--epochs", "1", "--k", "1", "--out", s(&run)]);
    let err = ddad(&["score", "--data", s(&data), "--out", s(&run)]);
    assert_eq!(err.status.code(), Some(1));
}

#[test]
fn full_pipeline_is_byte_identical_on_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let run = tmp.path().join("run");
    let pipeline = || {
        synth(&data, "0.5");
        ok(&[
            "train",
            "--data",
            s(&data),
            "--backbone",
            "aeu",
            "--k",
            "2",
            "--epochs",
            "2",
            "--batch-size",
            "4",
            "--out",
            s(&run),
        ]);
        ok(&["score", "--data", s(&data), "--out", s(&run), "--maps"]);
        ok(&["eval", "--out", s(&run)]);
        (snapshot(&data), snapshot(&run))
    };
    let first = pipeline();
    let second = pipeline();
    assert_eq!(first.0.keys().collect::<Vec<_>>(), second.0.keys().collect::<Vec<_>>());
    assert!(first == second, "outputs changed between identical runs");

    let report: serde_json::Value = serde_json::from_slice(&first.1["report.json"]).unwrap();
    for kind in ["rec", "intra", "inter", "intra_refined", "inter_refined"] {
        let auc = report["auc"][kind].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&auc), "{kind}: {auc}");
    }
    assert_eq!(report["metadata"]["backbone"], "aeu");
    assert!(first.1.contains_key("maps/inter/test/abnormal/00000.pgm"));
    assert!(first.1.contains_key("maps/inter/test/abnormal/00000.f32"));
    assert!(first.1.contains_key("histogram_inter.csv"));

    let manifest: serde_json::Value = serde_json::from_slice(&first.1["train.manifest.json"]).unwrap();
    let digest = manifest["artifacts"]["moduleB_member1.ckpt"].as_str().unwrap();
    assert_eq!(digest.len(), 64);
    assert!(manifest.get("timestamp").is_none());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.cfg");
    let data = tmp.path().join("d");
    fs::write(
        &cfg,
        format!(
            "out = {}\nar = 1.0\nn_normal = 2\nm_unlabeled = 4\nt-normal = 1\nt-abnormal = 1\nseed = 3\n",
            data.display()
        ),
    )
    .unwrap();
    ok(&["synth", "--config", s(&cfg), "--ar", "0.5"]);
    let provenance = fs::read_to_string(data.join("provenance.csv")).unwrap();
    assert_eq!(provenance.lines().filter(|l| l.ends_with(",1")).count(), 2);
    assert_eq!(fs::read_dir(data.join("normal")).unwrap().count(), 2);
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    assert_eq!(ddad(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(ddad(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ddad(&["train", "--backbone", "vae"]).status.code(), Some(2));
    assert_eq!(ddad(&[]).status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let out = ddad(&["train", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error [config]"));

    let missing = ddad(&["train", "--data", s(&tmp.path().join("nope")), "--out", s(tmp.path())]);
    assert_eq!(missing.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&missing.stderr);
    assert!(stderr.starts_with("error ["), "{stderr}");

    let bad_ckpt = tmp.path().join("ck");
    fs::create_dir_all(&bad_ckpt).unwrap();
    fs::write(bad_ckpt.join("moduleB_member0.ckpt"), b"DDAD\x07\x00\x00\x00").unwrap();
    let data = tmp.path().join("d");
    synth(&data, "0.0");
    let out = ddad(&["score", "--data", s(&data), "--checkpoints", s(&bad_ckpt), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error [checkpoint]"));
}

#[test]
fn thread_cap_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_ddad"))
            .args(["synth", "--out", s(tmp.path())])
            .args(TINY)
            .env("DDAD_THREADS", threads)
            .output()
            .unwrap()
    };
    assert!(run("1").status.success());
    assert_eq!(run("0").status.code(), Some(1));
    assert_eq!(run("many").status.code(), Some(1));
}

#[test]
fn sweep_and_compare_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let sweep_dir = tmp.path().join("sweep");
    let mut args = vec!["sweep", "--ar-grid", "0,1", "--epochs", "1", "--k", "2", "--out", s(&sweep_dir)];
    args.extend(TINY);
    ok(&args);
    let csv = fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("ar,score_kind,backbone,auc,seed"));
    assert_eq!(lines.count(), 2 * 3);
    assert!(csv.contains("\n1,inter,ae,"));

    let cmp_dir = tmp.path().join("cmp");
    let mut args = vec!["compare", "--epochs", "1", "--k", "2", "--out", s(&cmp_dir)];
    args.extend(TINY);
    let out = ok(&args);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("AE + DDAD (intra)"));
    assert!(table.contains("AE-U + DDAD (inter_refined)"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cmp_dir.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 3 + 5);
    assert!(json["metadata"]["seeds"].is_array());
}
