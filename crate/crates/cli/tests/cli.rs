use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
n_identities = 4
images_per_identity = 8
query_per_identity = 2
gallery_per_identity = 2
height = 32
width = 16

[model.backbone]
input_height = 32
input_width = 16
stem_stride = 2
stage_channels = [8, 12, 16, 24]

[model.dpu]
reduced_channels = 8

[model.reid]
embedding_dim = 16

[batch]
identities = 2
instances = 2

[optim]
epochs = 1
decay_epochs = []

[eval]
every = 1
strips = 2
strip_top_k = 3
"#;

fn drop_reid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drop-reid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(drop_reid(&["--help"]).status.code(), Some(0));
    assert_eq!(drop_reid(&["--version"]).status.code(), Some(0));
}

#[test]
fn bad_arguments_and_config_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(drop_reid(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(drop_reid(&["train", "--out", s(&out), "--set", "optim.nope=1"]).status.code(), Some(1));
    assert_eq!(drop_reid(&["train", "--out", s(&out), "--set", "optim.epochs=0"]).status.code(), Some(1));
    assert_eq!(drop_reid(&["train", "--out", s(&out), "--set", "loss.triplet=mystery"]).status.code(), Some(1));
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[optim\nlr = 1").unwrap();
    assert_eq!(drop_reid(&["train", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(1));
    let missing = dir.path().join("missing.toml");
    assert_eq!(drop_reid(&["train", "--config", s(&missing), "--out", s(&out)]).status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = dir.path().join("o");
    assert_eq!(drop_reid(&["eval", "--checkpoint", s(&junk), "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");

    let r = drop_reid(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(data.join("manifest.csv").exists());

    let r = drop_reid(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--set", "seed=3",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["config.toml", "metrics.jsonl", "last.ckpt", "best.ckpt", "report.txt", "report.json", "cmc.svg"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let saved = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(saved.contains("seed = 3"));

    let ckpt = run.join("last.ckpt");
    let ev = dir.path().join("eval");
    let r = drop_reid(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&ev), "--modes", "G,F+P"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(ev.join("report.txt")).unwrap();
    assert!(text.contains("F+P"));
    assert_eq!(std::fs::read_dir(ev.join("strips")).unwrap().count(), 2);

    let emb = dir.path().join("q.emb");
    let r = drop_reid(&["export", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&emb), "--split", "query"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let bytes = std::fs::read(&emb).unwrap();
    // 8 query rows: u64 id, u32 camera, one visibility byte, then 10 vectors of 16 floats.
    assert_eq!(bytes.len(), 24 + 8 * (13 + 10 * 16 * 4));

    let ab = dir.path().join("ablate");
    let r = drop_reid(&["ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&ab), "--axes", "ss"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ab.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(rows[0]["final_smoothing"].as_f64(), Some(0.0));
}
