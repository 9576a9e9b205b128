use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"seed = 5
data_dir = "data"
run_dir = "run"

[data]
train_minutes = 0.2
val_minutes = 0.1
test_minutes = 0.1

[data.scene]
duration_s = 3.0
utterance_s = [1.0, 2.0]
gap_s = [0.2, 0.5]

[data.rir]
max_order = 2

[model]
variant = "mdoa"
base_channels = 2
tcn_channels = 8
tcn_blocks = 1
tcn_modules_per_block = 1
tcn_kernels = [3]
angle_dim = 4

[train]
batch_size = 2
chunk_s = 3.0
epochs = 1

[eval]
baseline_trials = 20
"#;

fn doalab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_doalab"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("error line");
    serde_json::from_str(last).expect("stderr ends with an error object")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("exp.toml"), CONFIG).unwrap();

    let sim = ok_json(&doalab(d, &["simulate", "--config", "exp.toml"]));
    assert_eq!(sim["scenes"], serde_json::json!([4, 2, 2]));
    let manifest = std::fs::read_to_string(d.join("data/train.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 4);

    let feats = ok_json(&doalab(d, &["features", "--config", "exp.toml", "--split", "val"]));
    assert_eq!(feats["utterances"], 2);
    assert_eq!(feats["frames"], 600);
    assert!(d.join("data/features/val/val-00000.fbank").exists());

    let train = ok_json(&doalab(d, &["train", "--config", "exp.toml"]));
    assert_eq!(train["epochs"].as_array().unwrap().len(), 1);
    assert!(d.join("run/best.ckpt").exists());
    assert_eq!(std::fs::read_to_string(d.join("run/train_log.jsonl")).unwrap().lines().count(), 1);

    let ev = ok_json(&doalab(d, &["eval", "--config", "exp.toml", "--out", "ev"]));
    let metrics = read_json(&d.join("ev/metrics.json"));
    assert_eq!(ev["report"], metrics);
    for key in ["pimae_deg", "acc", "n_frames", "n_assignments"] {
        assert!(metrics[key].is_number(), "metrics.json lacks {key}");
    }
    let acc = metrics["acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(d.join("ev/baseline.json").exists());

    let pt = ok_json(&doalab(d, &["eval", "--config", "exp.toml", "--out", "pt", "--passthrough"]));
    assert_eq!(pt["report"]["pimae_deg"], 0.0);
    assert_eq!(pt["report"]["acc"], 1.0);

    let rep = ok_json(&doalab(d, &["report", "--out", "rep", "ev", "pt"]));
    assert_eq!(rep["rows"].as_array().unwrap().len(), 2);
    let md = std::fs::read_to_string(d.join("rep/summary.md")).unwrap();
    assert_eq!(md.lines().count(), 4);
    let svg = std::fs::read_to_string(d.join("rep/01_pt_timeline.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn annotate_matches_simulated_labels() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("exp.toml"), CONFIG.replace("train_minutes = 0.2", "train_minutes = 0.05")).unwrap();
    ok_json(&doalab(d, &["simulate", "--config", "exp.toml"]));
    let split = d.join("data/train");
    let out = ok_json(&doalab(
        d,
        &[
            "annotate",
            "--tracks",
            split.join("train-00000.tracks.csv").to_str().unwrap(),
            "--intrinsics",
            split.join("train-00000.intrinsics.txt").to_str().unwrap(),
            "--out",
            "ann.jsonl",
            "--frames",
            "30",
        ],
    ));
    assert_eq!(out["frames"], 30);
    let parse = |p: &Path| -> Vec<Value> {
        std::fs::read_to_string(p).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    };
    let ann = parse(&d.join("ann.jsonl"));
    let sim = parse(&split.join("train-00000.labels.jsonl"));
    assert_eq!(ann.len(), sim.len());
    for (a, s) in ann.iter().zip(&sim) {
        for (x, y) in a["speakers"].as_array().unwrap().iter().zip(s["speakers"].as_array().unwrap()) {
            assert_eq!(x["id"], y["id"]);
            let (ax, ay) = (x["azimuth_deg"].as_f64().unwrap(), y["azimuth_deg"].as_f64().unwrap());
            assert!((ax - ay).abs() < 1e-6, "{ax} vs {ay}");
        }
    }
}

#[test]
fn errors_are_json_and_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let usage = doalab(d, &["train"]);
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(err_json(&usage)["kind"], "usage");

    std::fs::write(d.join("typo.toml"), "sede = 1\n").unwrap();
    assert_eq!(err_json(&doalab(d, &["simulate", "--config", "typo.toml"]))["kind"], "toml");

    std::fs::write(d.join("bad.toml"), "[train]\nbatch_size = 0\n").unwrap();
    assert_eq!(err_json(&doalab(d, &["simulate", "--config", "bad.toml"]))["kind"], "config");
    assert!(!d.join("data").exists());

    std::fs::write(d.join("blocker"), "").unwrap();
    std::fs::write(d.join("unwritable.toml"), "data_dir = \"blocker/data\"\n").unwrap();
    assert_eq!(err_json(&doalab(d, &["simulate", "--config", "unwritable.toml"]))["kind"], "io");

    std::fs::write(d.join("nodata.toml"), "data_dir = \"missing\"\n").unwrap();
    assert_eq!(err_json(&doalab(d, &["train", "--config", "nodata.toml"]))["kind"], "io");
    assert!(!d.join("runs").exists());

    let e = err_json(&doalab(d, &["eval", "--config", "nodata.toml", "--out", "ev"]));
    assert_eq!(e["kind"], "io");
    assert!(e["message"].as_str().unwrap().contains("best.ckpt"));
    assert!(!d.join("ev").exists());
}

#[test]
fn eval_rejects_variant_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("exp.toml"), CONFIG).unwrap();
    std::fs::write(d.join("adoa.toml"), CONFIG.replace("variant = \"mdoa\"", "variant = \"adoa\"")).unwrap();
    ok_json(&doalab(d, &["simulate", "--config", "exp.toml"]));
    ok_json(&doalab(d, &["train", "--config", "exp.toml"]));
    let e = err_json(&doalab(d, &["eval", "--config", "adoa.toml", "--checkpoint", "run/best.ckpt", "--out", "ev"]));
    assert_eq!(e["kind"], "validation");
    assert!(!d.join("ev").exists());
}
