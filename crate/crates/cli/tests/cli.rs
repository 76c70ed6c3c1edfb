use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn scenediff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenediff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_data_dir_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"data": {"kind": "raw", "dir": "/definitely/not/here"}}"#).unwrap();
    let out = scenediff(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = scenediff(&["train", "--preset", "synth-small", "--config", s(&cfg)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_without_data_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = scenediff(&["train", "--out", s(&tmp.path().join("run"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn exploding_training_is_a_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"lr": 1e30, "epochs": 20}}"#).unwrap();
    let out = scenediff(&["train", "--preset", "synth-small", "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_zero_scenes_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = scenediff(&["synth", "--n", "0", "--out", s(tmp.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn synth_writes_pairs_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = scenediff(&["synth", "--n", "64", "--seed", "2", "--out", s(tmp.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let names: Vec<String> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("scene_")).count(), 64);
    assert_eq!(names.iter().filter(|n| n.starts_with("graph_")).count(), 64);
    assert!(names.iter().any(|n| n == "manifest.json"));
}

#[test]
fn render_rejects_unparseable_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("bad.json");
    fs::write(&scene, "{ not json").unwrap();
    let out = scenediff(&["render", "--scene", s(&scene), "--out", s(&tmp.path().join("x.svg"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn render_empty_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("empty.json");
    fs::write(&scene, r#"{"n_max": 4, "objects": []}"#).unwrap();
    let svg = tmp.path().join("empty.svg");
    let out = scenediff(&["render", "--scene", s(&scene), "--out", s(&svg)]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(svg).unwrap();
    assert!(text.contains("legend") && !text.contains(r#"class="box""#));
}

/// One small training run shared by the sampling and evaluation checks.
fn trained(dir: &Path) {
    let out = scenediff(&["train", "--preset", "synth-small", "--seed", "3", "--epochs", "2", "--out", s(dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.bin", "train.log", "config.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(dir.join("train.log")).unwrap();
    assert!(log.starts_with("epoch, train_loss, val_loss, lr\n"));
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 3);
}

#[test]
fn sample_and_eval_contracts() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    trained(&run);
    let ck = run.join("checkpoint.bin");

    // A relation the checkpoint does not know.
    let bad = tmp.path().join("bad_graph.json");
    fs::write(&bad, r#"{"nodes": ["bed", "lamp"], "edges": [[0, "inside", 1]]}"#).unwrap();
    let out = scenediff(&["sample", "--checkpoint", s(&ck), "--graph", s(&bad), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&out), 2);
    let bad_label = tmp.path().join("bad_label.json");
    fs::write(&bad_label, r#"{"nodes": ["bed", "piano"], "edges": [[0, "left", 1]]}"#).unwrap();
    let out = scenediff(&["sample", "--checkpoint", s(&ck), "--graph", s(&bad_label), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&out), 2);

    let graph = tmp.path().join("g.json");
    fs::write(&graph, r#"{"nodes": ["bed", "lamp", "chair"], "edges": [[1, "left", 0], [2, "front", 0]]}"#).unwrap();
    let samples = tmp.path().join("samples");
    let out = scenediff(&["sample", "--checkpoint", s(&ck), "--graph", s(&graph), "--n", "3", "--seed", "1", "--out", s(&samples)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<Vec<u8>> = (0..3)
        .map(|k| fs::read(samples.join(format!("scene_{k:04}.json"))).unwrap())
        .collect();
    assert!(files[0] != files[1] && files[1] != files[2]);

    // At w = 0 the relations play no part.
    let other = tmp.path().join("g2.json");
    fs::write(&other, r#"{"nodes": ["bed", "lamp", "chair"], "edges": [[0, "right", 2]]}"#).unwrap();
    let uncond: Vec<Vec<u8>> = [&graph, &other]
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let dir = tmp.path().join(format!("w0_{i}"));
            let out = scenediff(&["sample", "--checkpoint", s(&ck), "--graph", s(g), "--guidance", "0", "--out", s(&dir)]);
            assert_eq!(code(&out), 0);
            fs::read(dir.join("scene_0000.json")).unwrap()
        })
        .collect();
    assert_eq!(uncond[0], uncond[1]);

    let empty_dir = tmp.path().join("no_graphs");
    fs::create_dir(&empty_dir).unwrap();
    let out = scenediff(&["eval", "--checkpoint", s(&ck), "--graphs", s(&empty_dir), "--out", s(&tmp.path().join("e0"))]);
    assert_eq!(code(&out), 2);

    let report_dir = tmp.path().join("eval");
    let out = scenediff(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--graphs",
        s(&graph),
        "--ablate-relations",
        "--out",
        s(&report_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["report.json", "report_label_only.json"] {
        let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(report_dir.join(name)).unwrap()).unwrap();
        let corpus = report["corpus"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&corpus), "{name}: {corpus}");
    }
}
