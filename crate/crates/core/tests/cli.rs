mod common;

use std::path::Path;
use std::process::Command;

use common::tiny_config;

fn run(workdir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_posegate"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn posegate");
    assert!(
        out.status.success(),
        "posegate {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    let cfg_path = w.join("tiny.json");
    tiny_config().save(&cfg_path).unwrap();
    let cfg = cfg_path.to_str().unwrap();

    run(w, &["--config", cfg, "make-dataset", "--write-poses"]);
    for split in ["train", "val_in_context", "val_out_of_context"] {
        assert!(w.join("manifests").join(format!("{split}.jsonl")).exists());
    }
    // later commands pick up the saved config.json
    let poses = std::fs::read_dir(w.join("poses"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "ndjson"))
        .unwrap();
    let clip = w.join("clip.ptc");
    let out = run(w, &["encode", poses.to_str().unwrap(), "--out", clip.to_str().unwrap()]);
    assert!(out.contains("(16, 37, 8, 8)"), "{out}");

    run(w, &["train-stream", "--kind", "appearance"]);
    run(w, &["train-stream", "--kind", "pose"]);
    run(w, &["train-integrator", "--lambda", "1.5", "--gate-source", "both"]);
    assert!(w.join("checkpoints/integrator.iack").exists());
    let out = run(w, &["evaluate", "--split", "out"]);
    assert!(out.contains("val_out_of_context: top1"), "{out}");
    run(w, &["evaluate", "--split", "in", "--clips", "1"]);
    let out = run(w, &["gate-stats", "--histogram"]);
    assert!(out.contains("val_in_context: gate mean"), "{out}");
    for f in ["integral_val_in_context.json", "integral_val_out_of_context.csv", "gates.csv", "gates.png"] {
        assert!(w.join("reports").join(f).exists(), "{f}");
    }
    let gates = std::fs::read_to_string(w.join("reports/gates.csv")).unwrap();
    assert_eq!(gates.lines().count(), 1 + 2 * 4);

    let out = run(w, &["ablate"]);
    for row in ["integral_lambda0.0", "integral_lambda1.0", "integral_lambda1.5", "integral_lambda5.0", "oracle"] {
        assert!(out.contains(row), "{row} missing:\n{out}");
    }
    assert!(w.join("reports/ablation.json").exists());

    run(w, &["train-integrator", "--no-freeze", "--no-pretrain", "--out", w.join("scratch.iack").to_str().unwrap()]);
}

#[test]
fn missing_prerequisites_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_posegate"))
        .arg("--workdir")
        .arg(dir.path())
        .args(["train-stream", "--kind", "pose"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("make-dataset"));
}
