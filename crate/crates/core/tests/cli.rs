//! End-to-end runs of the `osvit` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use osvit::cli::{RunManifest, RunStatus};
use osvit::vit_model::ModelConfig;
use osvit::volume::{read_rvol, write_rvol, Dims, Volume};

fn osvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osvit"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env_remove("OSVIT_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn manifest(path: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Full input resolution, much smaller network.
fn small_model(dir: &Path) -> String {
    let cfg = ModelConfig {
        patch_dims: Dims::new(10, 16, 16),
        embed_dim: 16,
        num_layers: 1,
        num_heads: 2,
        head_dim: 8,
        mlp_dim: 32,
        ..ModelConfig::default()
    };
    let path = dir.join("small.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_fans_out_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = osvit(&["synth", "--subjects", "6", "--seed", "1", "--out", p(dir)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".rvol")).count(), 24);
    let csv = fs::read_to_string(a.join("metadata.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7, "header plus six rows");
    // The manifest records the output path, so only the data files must match.
    for name in names.iter().filter(|n| *n != "run_manifest.json") {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs"
        );
    }
    let m = manifest(&a.join("run_manifest.json"));
    assert_eq!(m.status, RunStatus::Succeeded);
    assert_eq!(m.started_at, "2023-11-14T22:13:20Z");
}

#[test]
fn synth_needs_three_subjects() {
    let tmp = tempfile::tempdir().unwrap();
    let out = osvit(&["synth", "--subjects", "2", "--out", p(tmp.path())]);
    assert_eq!(code(&out), 1);
    let m = manifest(&tmp.path().join("run_manifest.json"));
    assert_eq!(m.status, RunStatus::Failed);
    assert_eq!(m.exit_code, Some(1));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&osvit(&["train", "--data", "x"])), 1);
    assert_eq!(code(&osvit(&["bogus"])), 1);
    assert_eq!(code(&osvit(&["--help"])), 0);
}

#[test]
fn preprocess_reports_dims_and_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let (src, dst) = (tmp.path().join("raw"), tmp.path().join("pre"));
    fs::create_dir_all(&src).unwrap();

    let empty = osvit(&["preprocess", "--in", p(&src), "--out", p(&dst)]);
    assert_eq!(code(&empty), 1);
    assert!(stderr(&empty).contains("no volumes found"));

    let raw = Volume::from_fn_f32(Dims::new(60, 80, 70), |d, h, w| (d + h + w) as f32);
    write_rvol(&raw, src.join("S1_t1.rvol")).unwrap();
    let flat = Volume::from_fn_f32(Dims::new(50, 64, 64), |_, _, _| 7.5);
    write_rvol(&flat, src.join("S1_t2.rvol")).unwrap();
    let out = osvit(&["preprocess", "--in", p(&src), "--out", p(&dst)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = read_rvol(dst.join("S1_t1.rvol")).unwrap();
    assert_eq!(v.dims(), Dims::new(50, 64, 64));
    assert!(read_rvol(dst.join("S1_t2.rvol"))
        .unwrap()
        .as_u8()
        .unwrap()
        .iter()
        .all(|&x| x == 0));

    fs::write(src.join("S1_flair.rvol"), b"RVOL garbage").unwrap();
    let out = osvit(&["preprocess", "--in", p(&src), "--out", p(&dst)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("S1_flair.rvol"));
    assert!(
        dst.join("S1_t1.rvol").exists(),
        "healthy files are still written"
    );
}

#[test]
fn train_eval_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let model_cfg = small_model(tmp.path());
    assert_eq!(
        code(&osvit(&[
            "synth",
            "--subjects",
            "12",
            "--seed",
            "3",
            "--out",
            p(&data)
        ])),
        0
    );
    let csv = data.join("metadata.csv");

    let out = osvit(&[
        "train",
        "--data",
        p(&data),
        "--csv",
        p(&csv),
        "--out",
        p(&run),
        "--max-epochs",
        "2",
        "--lr",
        "1e-5",
        "--model-config",
        &model_cfg,
        "--deterministic",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("learning rate: 0.00001"));
    for f in [
        "best.osvt",
        "last.osvt",
        "metrics.json",
        "split.csv",
        "train_log.jsonl",
        "run_manifest.json",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let m = manifest(&run.join("run_manifest.json"));
    assert_eq!(m.status, RunStatus::Succeeded);
    assert_eq!(m.config["train"]["learning_rate"], 1e-5);
    assert!(m.argv.iter().any(|a| a == "1e-5"));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["train"]["samples"], 36);
    assert_eq!(metrics["test"]["samples"], 12);
    assert_eq!(
        fs::read_to_string(run.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let model = run.join("best.osvt");
    let eval = |extra: &[&str]| {
        let mut args = vec![
            "eval",
            "--model",
            p(&model),
            "--data",
            p(&data),
            "--csv",
            p(&csv),
        ];
        args.extend_from_slice(extra);
        osvit(&args)
    };
    let split = run.join("split.csv");
    let first = eval(&["--split", p(&split)]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let text = String::from_utf8(first.stdout.clone()).unwrap();
    assert!(
        text.contains("confusion matrix") && text.contains("accuracy:"),
        "{text}"
    );
    assert!(text.contains("samples: 12 (test)"));
    assert_eq!(eval(&["--split", p(&split)]).stdout, first.stdout);
    let all = eval(&["--all", "--format", "json"]);
    assert_eq!(code(&all), 0);
    let doc: serde_json::Value = serde_json::from_slice(&all.stdout).unwrap();
    assert_eq!(doc["samples"], 48);
    assert_eq!(code(&eval(&[])), 1, "selection is required");
    assert!(run.join("eval_manifest.json").exists());

    let vol = data.join("SYN000_t1.rvol");
    let out = osvit(&[
        "predict",
        "--model",
        p(&model),
        "--volume",
        p(&vol),
        "--age",
        "61",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let line = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<&str> = line.split_whitespace().collect();
    assert_eq!(fields.len(), 5, "{line}");
    assert!(["0", "1", "2"].contains(&fields[0]));
    let total: f64 = fields[2..].iter().map(|f| f.parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-5);

    assert_eq!(
        code(&osvit(&[
            "predict",
            "--model",
            p(&model),
            "--volume",
            p(&vol),
            "--age",
            "0"
        ])),
        1
    );
    assert_eq!(
        code(&osvit(&[
            "predict",
            "--model",
            p(&model),
            "--volume",
            p(&vol),
            "--age",
            "-4"
        ])),
        1
    );
    let big = tmp.path().join("big.rvol");
    write_rvol(
        &Volume::from_u8(Dims::new(155, 240, 240), vec![0; 155 * 240 * 240]).unwrap(),
        &big,
    )
    .unwrap();
    let out = osvit(&[
        "predict",
        "--model",
        p(&model),
        "--volume",
        p(&big),
        "--age",
        "61",
    ]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(
        err.contains("50x64x64") && err.contains("osvit preprocess"),
        "{err}"
    );

    let missing = osvit(&[
        "eval",
        "--model",
        p(&tmp.path().join("nope.osvt")),
        "--data",
        p(&data),
        "--csv",
        p(&csv),
        "--all",
    ]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn train_rejects_tiny_cohorts_and_bad_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(
        code(&osvit(&["synth", "--subjects", "3", "--out", p(&data)])),
        0
    );
    let csv = data.join("metadata.csv");
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.truncate(2);
    let one = tmp.path().join("one.csv");
    fs::write(&one, lines.join("\n") + "\n").unwrap();
    let out = osvit(&[
        "train",
        "--data",
        p(&data),
        "--csv",
        p(&one),
        "--out",
        p(&tmp.path().join("r")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("at least 2"), "{}", stderr(&out));

    let out = Command::new(env!("CARGO_BIN_EXE_osvit"))
        .args([
            "synth",
            "--subjects",
            "3",
            "--out",
            p(&tmp.path().join("t")),
        ])
        .env("OSVIT_THREADS", "zero")
        .output()
        .unwrap();
    // synth is always single-threaded, so the variable is not consulted.
    assert_eq!(code(&out), 0);
    let out = Command::new(env!("CARGO_BIN_EXE_osvit"))
        .args(["eval", "--model", "m", "--data", "d", "--csv", "c", "--all"])
        .env("OSVIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}
