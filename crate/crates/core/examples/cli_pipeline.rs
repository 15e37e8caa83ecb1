//! Drives every subcommand the `osvit` binary offers, in process: synth,
//! preprocess, train, eval and predict, with a reduced network so the whole
//! pipeline finishes in about a minute.
//!
//! Run with `cargo run --release --example cli_pipeline -- [work_dir]`.

use std::path::PathBuf;

fn osvit(args: &[&str]) -> Result<(), String> {
    println!("$ osvit {}", args.join(" "));
    match osvit::cli::run(std::iter::once("osvit").chain(args.iter().copied())) {
        0 => Ok(()),
        code => Err(format!("exit code {code}")),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let work = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "osvit_pipeline".into()),
    );
    std::fs::create_dir_all(&work)?;
    let path = |name: &str| work.join(name).to_string_lossy().into_owned();

    let model = serde_json::json!({
        "input_dims": {"depth": 50, "height": 64, "width": 64},
        "patch_dims": {"depth": 10, "height": 16, "width": 16},
        "embed_dim": 32, "num_layers": 1, "num_heads": 4, "head_dim": 8, "mlp_dim": 64,
        "num_classes": 3, "age_scale_divisor": 10.0, "dropout": 0.0
    });
    std::fs::write(
        work.join("model.json"),
        serde_json::to_string_pretty(&model)?,
    )?;

    osvit(&[
        "synth",
        "--subjects",
        "12",
        "--seed",
        "1",
        "--out",
        &path("data"),
    ])?;
    osvit(&["preprocess", "--in", &path("data"), "--out", &path("pre")])?;
    std::fs::copy(
        work.join("data/metadata.csv"),
        work.join("pre/metadata.csv"),
    )?;
    osvit(&[
        "train",
        "--data",
        &path("pre"),
        "--csv",
        &path("pre/metadata.csv"),
        "--out",
        &path("run"),
        "--model-config",
        &path("model.json"),
        "--lr",
        "1e-3",
        "--max-epochs",
        "15",
        "--deterministic",
    ])?;
    osvit(&[
        "eval",
        "--model",
        &path("run/best.osvt"),
        "--data",
        &path("pre"),
        "--csv",
        &path("pre/metadata.csv"),
        "--split",
        &path("run/split.csv"),
    ])?;
    osvit(&[
        "predict",
        "--model",
        &path("run/best.osvt"),
        "--volume",
        &path("pre/SYN000_t1.rvol"),
        "--age",
        "57",
        "--format",
        "json",
    ])?;
    println!("artifacts in {}", work.display());
    Ok(())
}
