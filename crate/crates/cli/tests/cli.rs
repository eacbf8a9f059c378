use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_abstractnet"));
    cmd.env_remove("ABSTRACTNET_LOG");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn without_timings(mut v: Value) -> Value {
    if let Value::Object(map) = &mut v {
        map.remove("timings");
    }
    v
}

fn trained_net(dir: &Path) -> PathBuf {
    let net = dir.join("net.json");
    let report = ok_json(&[
        "train",
        "--arch",
        "1x16",
        "--epochs",
        "3",
        "--seed",
        "4",
        "--out",
        net.to_str().unwrap(),
    ]);
    assert_eq!(report["schema"], 1);
    assert_eq!(report["layer_sizes"], serde_json::json!([64, 16, 10]));
    net
}

#[test]
fn full_width_abstraction_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let net = trained_net(dir.path());
    let rec = dir.path().join("rec.json");
    let report = ok_json(&[
        "abstract",
        "--net",
        net.to_str().unwrap(),
        "--kl",
        "1:16",
        "--out",
        rec.to_str().unwrap(),
    ]);
    assert_eq!(report["reduction_rate"], 0.0);
    assert_eq!(report["removed_neurons"], 0);
    assert_eq!(report["accuracy"]["test_drop_points"], 0.0);
    assert!(rec.exists());
}

#[test]
fn zero_radius_is_robust_where_correct() {
    let dir = tempfile::tempdir().unwrap();
    let net = trained_net(dir.path());
    let out = run(&[
        "verify",
        "--net",
        net.to_str().unwrap(),
        "--count",
        "20",
        "--delta",
        "0",
    ]);
    assert!(out.status.success());
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 20);
    for (i, line) in lines.iter().enumerate() {
        assert_eq!(line["schema"], 1);
        assert_eq!(line["index"], i);
        assert_eq!(line["verdict"], "robust", "{line}");
    }
}

#[test]
fn abstraction_and_lifting_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let net = trained_net(dir.path());
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let abstract_args = |out: &Path| {
        ok_json(&[
            "abstract",
            "--net",
            net.to_str().unwrap(),
            "--alpha",
            "0.5",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ])
    };
    let ra = without_timings(abstract_args(&a));
    let rb = without_timings(abstract_args(&b));
    assert_eq!(ra["out"], a.to_str().unwrap());
    let strip_out = |mut v: Value| {
        v.as_object_mut().unwrap().remove("out");
        v
    };
    assert_eq!(strip_out(ra), strip_out(rb));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let lift = || {
        without_timings(ok_json(&[
            "lift",
            "--net",
            net.to_str().unwrap(),
            "--record",
            a.to_str().unwrap(),
            "--delta",
            "0.001",
            "--count",
            "15",
            "--jobs",
            "2",
        ]))
    };
    let (la, lb) = (lift(), lift());
    assert_eq!(la, lb);
    assert_eq!(la["schema"], 1);
    assert_eq!(la["counts"]["queries"], 15);
    assert_eq!(la["queries"].as_array().unwrap().len(), 15);
    let robust = la["counts"]["abstract_robust"].as_u64().unwrap();
    let lifted = la["counts"]["lifted_robust"].as_u64().unwrap();
    assert!(lifted <= robust);
}

#[test]
fn bench_row_has_expected_fields() {
    let dir = tempfile::tempdir().unwrap();
    let net = trained_net(dir.path());
    let row = ok_json(&[
        "bench",
        "--net",
        net.to_str().unwrap(),
        "--kl",
        "1:12",
        "--delta",
        "0.001",
        "--count",
        "10",
    ]);
    assert_eq!(row["schema"], 1);
    assert_eq!(row["removed_neurons"], 4);
    assert_eq!(row["reduction_rate"], 0.25);
    assert_eq!(row["queries"], 10);
    assert!(row["images_verified"].as_u64().unwrap() <= row["abstract_verified"].as_u64().unwrap());
    for key in ["original_verify_ms", "abstract_verify_ms", "lift_ms"] {
        assert!(row["timings"][key].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn csv_data_and_vector_files() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("toy.csv");
    let mut text = String::from("label,a,b\n");
    for i in 0..40 {
        let v = i as f64 / 40.0;
        text.push_str(&format!("{},{v},{}\n", usize::from(v > 0.5), 1.0 - v));
    }
    fs::write(&csv, text).unwrap();
    let net = dir.path().join("net.json");
    let report = ok_json(&[
        "train",
        "--data",
        csv.to_str().unwrap(),
        "--arch",
        "4,3",
        "--epochs",
        "2",
        "--out",
        net.to_str().unwrap(),
    ]);
    assert_eq!(report["layer_sizes"], serde_json::json!([2, 4, 3, 2]));

    let x = dir.path().join("x.json");
    fs::write(&x, "[0.2, 0.8]").unwrap();
    let delta = dir.path().join("delta.txt");
    fs::write(&delta, "0 0\n").unwrap();
    let out = run(&[
        "verify",
        "--net",
        net.to_str().unwrap(),
        "--input",
        x.to_str().unwrap(),
        "--delta",
        delta.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let line: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(line.get("true_label").is_none());
    assert_ne!(line["verdict"], "not_robust_witness");
}

#[test]
fn invalid_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let net = trained_net(dir.path());
    let net = net.to_str().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"layer_sizes\": [1]}").unwrap();

    let cases: Vec<Vec<&str>> = vec![
        vec!["verify", "--net", "no-such-file.json", "--delta", "0.1"],
        vec!["verify", "--net", bad.to_str().unwrap(), "--delta", "0.1"],
        vec!["verify", "--net", net, "--delta=-0.1"],
        vec![
            "verify", "--net", net, "--delta", "0.1", "--input", "100000",
        ],
        vec![
            "abstract",
            "--net",
            net,
            "--kl",
            "2:3",
            "--out",
            "unused.json",
        ],
        vec![
            "abstract",
            "--net",
            net,
            "--alpha",
            "1.5",
            "--out",
            "unused.json",
        ],
        vec!["train", "--arch", "0x3", "--out", "unused.json"],
        vec!["train", "--data", "images.idx", "--out", "unused.json"],
        vec!["verify", "--delta", "0.1"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let out = run(&args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(out.stdout.is_empty(), "{args:?} wrote to stdout");
    }
}

#[test]
fn lift_rejects_a_record_from_another_network() {
    let dir = tempfile::tempdir().unwrap();
    let net = trained_net(dir.path());
    let rec = dir.path().join("rec.json");
    ok_json(&[
        "abstract",
        "--net",
        net.to_str().unwrap(),
        "--kl",
        "1:8",
        "--out",
        rec.to_str().unwrap(),
    ]);
    let other = dir.path().join("other.json");
    ok_json(&[
        "train",
        "--arch",
        "1x8",
        "--epochs",
        "1",
        "--out",
        other.to_str().unwrap(),
    ]);
    let out = run(&[
        "lift",
        "--net",
        other.to_str().unwrap(),
        "--record",
        rec.to_str().unwrap(),
        "--delta",
        "0.01",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
