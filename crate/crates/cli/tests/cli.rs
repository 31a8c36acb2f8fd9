//! End-to-end CLI tests against the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn zsad() -> Command {
    Command::new(env!("CARGO_BIN_EXE_zsad"))
}

fn run(args: &[&str]) -> Output {
    zsad().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Shared fixture: a small model and synthetic dataset, built once.
struct Fixture {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    model: PathBuf,
    data: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("model.ntc");
        let data = dir.path().join("data");
        assert_ok(&run(&[
            "init-model",
            "--out",
            model.to_str().unwrap(),
            "--image-size",
            "64",
            "--patch-size",
            "8",
            "--width",
            "32",
            "--heads",
            "4",
            "--layers",
            "4",
            "--stages",
            "2",
            "--embed-dim",
            "16",
            "--seed",
            "7",
        ]));
        assert_ok(&run(&[
            "gen-synth",
            "--out",
            data.to_str().unwrap(),
            "--seed",
            "0",
            "--train",
            "10",
            "--test",
            "8",
            "--image-size",
            "64",
            "--defect-min",
            "60",
            "--defect-max",
            "400",
        ]));
        Fixture { dir, model, data }
    })
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    // config.json records the run (including absolute paths) and is
    // excluded from content comparisons.
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().map(|n| n != "config.json").unwrap_or(true) {
                files.push((p.clone(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn detect_writes_scores_heatmaps_and_config_without_mutating_inputs() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let before = snapshot(&f.data);
    let result = run(&[
        "detect",
        "--model",
        f.model.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--category",
        "texture_b",
        "--out",
        out.path().to_str().unwrap(),
        "--temperature",
        "1.0",
        "--jobs",
        "2",
    ]);
    assert_ok(&result);
    assert_eq!(snapshot(&f.data), before, "detect mutated its inputs");

    let scores = std::fs::read_to_string(out.path().join("scores.txt")).unwrap();
    assert_eq!(scores.lines().count(), 8, "one score per image");
    let heatmaps: Vec<_> = std::fs::read_dir(out.path().join("heatmaps"))
        .unwrap()
        .collect();
    assert_eq!(heatmaps.len(), 8, "one heatmap per image");
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("config.json")).unwrap())
            .unwrap();
    assert_eq!(config["subcommand"], "detect");
    assert_eq!(config["temperature"], 1.0);
}

#[test]
fn evaluate_is_byte_identical_across_runs_and_job_counts() {
    let f = fixture();
    let out1 = tempfile::tempdir().unwrap();
    let out2 = tempfile::tempdir().unwrap();
    for (out, jobs) in [(&out1, "1"), (&out2, "3")] {
        assert_ok(&run(&[
            "evaluate",
            "--model",
            f.model.to_str().unwrap(),
            "--data",
            f.data.to_str().unwrap(),
            "--category",
            "texture_b",
            "--out",
            out.path().to_str().unwrap(),
            "--temperature",
            "1.0",
            "--jobs",
            jobs,
        ]));
    }
    let a = std::fs::read(out1.path().join("report.txt")).unwrap();
    let b = std::fs::read(out2.path().join("report.txt")).unwrap();
    assert_eq!(a, b, "reports differ across runs/job counts");
    let sa = std::fs::read(out1.path().join("scores.txt")).unwrap();
    let sb = std::fs::read(out2.path().join("scores.txt")).unwrap();
    assert_eq!(sa, sb);
}

#[test]
fn train_with_zero_rate_keeps_initialization() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    assert_ok(&run(&[
        "train",
        "--model",
        f.model.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--category",
        "texture_a",
        "--out",
        out.path().to_str().unwrap(),
        "--temperature",
        "1.0",
        "--lr",
        "0",
        "--epochs",
        "2",
        "--init-seed",
        "11",
    ]));
    let init = std::fs::read(out.path().join("projections_init.ntc")).unwrap();
    let trained = std::fs::read(out.path().join("projections.ntc")).unwrap();
    assert_eq!(init, trained, "zero learning rate changed the projections");
    let history = std::fs::read_to_string(out.path().join("loss_history.txt")).unwrap();
    assert_eq!(history.lines().count(), 2);
}

#[test]
fn trained_projections_feed_evaluation() {
    let f = fixture();
    let tr = tempfile::tempdir().unwrap();
    assert_ok(&run(&[
        "train",
        "--model",
        f.model.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--category",
        "texture_a",
        "--out",
        tr.path().to_str().unwrap(),
        "--temperature",
        "1.0",
        "--epochs",
        "1",
    ]));
    let ev = tempfile::tempdir().unwrap();
    let projections = tr.path().join("projections.ntc");
    assert_ok(&run(&[
        "evaluate",
        "--model",
        f.model.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--category",
        "texture_b",
        "--out",
        ev.path().to_str().unwrap(),
        "--temperature",
        "1.0",
        "--projections",
        projections.to_str().unwrap(),
    ]));
    let report = std::fs::read_to_string(ev.path().join("report.txt")).unwrap();
    assert!(report.contains("image.auroc"));
    assert!(report.contains("pixel.pro"));
}

#[test]
fn rerun_from_emitted_config_reproduces_report() {
    let f = fixture();
    let out1 = tempfile::tempdir().unwrap();
    assert_ok(&run(&[
        "evaluate",
        "--model",
        f.model.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--category",
        "texture_b",
        "--out",
        out1.path().to_str().unwrap(),
        "--temperature",
        "0.5",
        "--method",
        "kde",
    ]));
    let out2 = tempfile::tempdir().unwrap();
    // Same run driven purely by the emitted config (only paths restated).
    assert_ok(&run(&[
        "--config",
        out1.path().join("config.json").to_str().unwrap(),
        "evaluate",
        "--model",
        f.model.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--category",
        "texture_b",
        "--out",
        out2.path().to_str().unwrap(),
    ]));
    let a = std::fs::read(out1.path().join("report.txt")).unwrap();
    let b = std::fs::read(out2.path().join("report.txt")).unwrap();
    assert_eq!(a, b, "config-driven rerun diverged");
}

#[test]
fn select_and_embedding_table_roundtrip_workflow() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("table.ntc");
    assert_ok(&run(&[
        "embed-prompts",
        "--out",
        table.to_str().unwrap(),
        "--object",
        "texture",
        "--text-dim",
        "16",
        "--text-seed",
        "0",
    ]));
    // Selecting from the exported table matches selecting synthetically.
    let pair_syn = dir.path().join("pair_syn.ntc");
    let pair_tab = dir.path().join("pair_tab.ntc");
    assert_ok(&run(&[
        "select",
        "--out",
        pair_syn.to_str().unwrap(),
        "--object",
        "texture",
        "--text-dim",
        "16",
        "--text-seed",
        "0",
        "--method",
        "mean",
    ]));
    assert_ok(&run(&[
        "select",
        "--out",
        pair_tab.to_str().unwrap(),
        "--object",
        "texture",
        "--embeddings",
        table.to_str().unwrap(),
        "--method",
        "mean",
    ]));
    let a = std::fs::read(&pair_syn).unwrap();
    let b = std::fs::read(&pair_tab).unwrap();
    assert_eq!(a, b, "imported table diverges from synthetic features");

    // Detect with the imported table.
    let out = tempfile::tempdir().unwrap();
    assert_ok(&run(&[
        "detect",
        "--model",
        f.model.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--category",
        "texture_b",
        "--out",
        out.path().to_str().unwrap(),
        "--object",
        "texture",
        "--embeddings",
        table.to_str().unwrap(),
        "--temperature",
        "1.0",
    ]));
}

#[test]
fn render_blends_saved_maps() {
    let f = fixture();
    let det = tempfile::tempdir().unwrap();
    assert_ok(&run(&[
        "detect",
        "--model",
        f.model.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--category",
        "texture_b",
        "--out",
        det.path().to_str().unwrap(),
        "--temperature",
        "1.0",
        "--save-maps",
    ]));
    let map = det.path().join("maps/defect_000.ntc");
    let image = f.data.join("texture_b/test/defect/000.png");
    let out = det.path().join("overlay.png");
    assert_ok(&run(&[
        "render",
        "--map",
        map.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    assert!(out.is_file());
}

#[test]
fn exit_codes_follow_error_classes() {
    // Unknown flag: usage error, exit 1.
    let out = run(&["detect", "--definitely-not-a-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("Usage") || stderr.contains("usage"),
        "no usage text: {stderr}"
    );

    // Unknown subcommand: exit 1.
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));

    // Missing model file: I/O error, exit 2.
    let f = fixture();
    let out_dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "detect",
        "--model",
        "/nonexistent/model.ntc",
        "--data",
        f.data.to_str().unwrap(),
        "--category",
        "texture_b",
        "--out",
        out_dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // Validation error (bad selector): exit 1.
    let out = run(&[
        "select",
        "--out",
        out_dir.path().join("pair.ntc").to_str().unwrap(),
        "--object",
        "texture",
        "--method",
        "centaur",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_synth_is_reproducible_via_cli() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        assert_ok(&run(&[
            "gen-synth",
            "--out",
            dir.path().to_str().unwrap(),
            "--seed",
            "12",
            "--train",
            "4",
            "--test",
            "4",
            "--image-size",
            "48",
            "--defect-min",
            "40",
            "--defect-max",
            "300",
        ]));
    }
    let fa = snapshot(a.path());
    let fb = snapshot(b.path());
    assert_eq!(fa.len(), fb.len());
    for ((pa, ba), (pb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(
            pa.strip_prefix(a.path()).unwrap(),
            pb.strip_prefix(b.path()).unwrap()
        );
        assert_eq!(ba, bb, "file {} differs", pa.display());
    }
}
