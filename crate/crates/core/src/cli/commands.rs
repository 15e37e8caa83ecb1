use std::collections::HashMap;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use super::{
    CliError, EvalArgs, ManifestWriter, PredictArgs, PreprocessArgs, SynthArgs, TrainArgs,
};
use crate::dataset::{
    build_samples, filter_cohort, read_split_manifest, render_split_manifest, split_by_subject,
    synth_generate_with, Partition, PhantomConfig, Sample, Sequence,
};
use crate::evaluation::{confusion, metrics, render_report, MetricsReport, ReportFormat};
use crate::preprocess::{preprocess_volume, PreprocessConfig, SplineOrder};
use crate::training::{predict, train, AdamConfig, Prediction, TrainConfig, TrainError};
use crate::vit_model::{
    infer_logits, init_params, load_checkpoint, save_checkpoint, CheckpointError, ModelConfig,
    ModelError,
};
use crate::volume::{
    read_metadata_csv, read_nifti_subset, read_rvol, write_metadata_csv, write_rvol, Volume,
    VolumeError,
};

fn volume_err(e: VolumeError) -> CliError {
    match e {
        VolumeError::Invalid(m) => CliError::Invalid(m),
        other => CliError::Io(other.to_string()),
    }
}

fn checkpoint_err(e: CheckpointError) -> CliError {
    match e {
        CheckpointError::ConfigConflict { .. } | CheckpointError::Model(_) => {
            CliError::Invalid(e.to_string())
        }
        other => CliError::Io(other.to_string()),
    }
}

fn invalid(e: impl ToString) -> CliError {
    CliError::Invalid(e.to_string())
}

/// Runs `body`, then stamps the manifest with its outcome.
fn finish<T>(manifest: ManifestWriter, result: Result<T, CliError>) -> Result<T, CliError> {
    match result {
        Ok(v) => {
            manifest.finish(None)?;
            Ok(v)
        }
        Err(e) => {
            manifest.finish(Some(&e))?;
            Err(e)
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// `<subject>_<sequence>.rvol`, e.g. `SYN001_t1ce.rvol`.
pub fn volume_file_name(subject: &str, sequence: Sequence) -> String {
    format!("{subject}_{}.rvol", sequence.token())
}

fn read_any_volume(path: &Path) -> Result<Volume, CliError> {
    let is_nifti = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("nii"));
    if is_nifti {
        read_nifti_subset(path).map_err(volume_err)
    } else {
        read_rvol(path).map_err(volume_err)
    }
}

pub fn cmd_synth(a: &SynthArgs, argv: &[String]) -> Result<(), CliError> {
    create_dir(&a.out)?;
    let mut m = ManifestWriter::start(a.out.join("run_manifest.json"), "synth", argv, 1)?;
    let phantom = PhantomConfig::default();
    m.manifest.config = json!({ "subjects": a.subjects, "seed": a.seed, "phantom": phantom });
    m.manifest.seed = Some(a.seed);
    m.write()?;
    let result = (|| {
        let cohort =
            synth_generate_with(a.subjects, a.seed, &phantom).map_err(CliError::Invalid)?;
        for (subject, seq, volume) in &cohort.volumes {
            write_rvol(volume, a.out.join(volume_file_name(subject, *seq))).map_err(volume_err)?;
        }
        let csv = a.out.join("metadata.csv");
        write_metadata_csv(&cohort.records, &csv).map_err(volume_err)?;
        m.output("metadata", &csv);
        m.output("volumes", &a.out);
        Ok(())
    })();
    finish(m, result)
}

pub fn cmd_preprocess(a: &PreprocessArgs, argv: &[String], threads: usize) -> Result<(), CliError> {
    let cfg = PreprocessConfig {
        target_dims: a.target,
        spline_order: SplineOrder::try_from(a.order).map_err(invalid)?,
    };
    cfg.validate().map_err(invalid)?;
    let entries = fs::read_dir(&a.input).map_err(|e| CliError::io(&a.input, e))?;
    let mut inputs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("rvol") || e.eq_ignore_ascii_case("nii"))
        })
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        return Err(CliError::Invalid(format!(
            "no volumes found in {}",
            a.input.display()
        )));
    }
    create_dir(&a.out)?;
    let mut m =
        ManifestWriter::start(a.out.join("run_manifest.json"), "preprocess", argv, threads)?;
    m.manifest.config = json!({ "preprocess": cfg, "deterministic": a.deterministic });
    m.input("volumes", &a.input);
    m.output("volumes", &a.out);
    m.write()?;

    let process = |src: &PathBuf| -> Result<(), CliError> {
        let volume = read_any_volume(src)?;
        let out = preprocess_volume(&volume, &cfg).map_err(invalid)?;
        let stem = src
            .file_stem()
            .expect("filtered on extension")
            .to_string_lossy();
        write_rvol(&out, a.out.join(format!("{stem}.rvol"))).map_err(volume_err)
    };
    let results: Vec<Result<(), CliError>> = if threads > 1 {
        inputs.par_iter().map(process).collect()
    } else {
        inputs.iter().map(process).collect()
    };
    let failed: Vec<String> = inputs
        .iter()
        .zip(results)
        .filter_map(|(src, r)| r.err().map(|e| format!("{}: {e}", src.display())))
        .collect();
    for f in &failed {
        eprintln!("error: {f}");
    }
    let result = if failed.is_empty() {
        eprintln!(
            "preprocessed {} volumes into {}",
            inputs.len(),
            a.out.display()
        );
        Ok(())
    } else {
        Err(CliError::Io(format!(
            "{} of {} volumes failed",
            failed.len(),
            inputs.len()
        )))
    };
    finish(m, result)
}

/// Labelled GTR samples with all four sequences, read from `data`.
pub fn load_cohort(data: &Path, csv: &Path) -> Result<Vec<Sample>, CliError> {
    let records = filter_cohort(&read_metadata_csv(csv).map_err(volume_err)?);
    if records.len() < 2 {
        return Err(CliError::Invalid(format!(
            "cohort has {} labelled GTR subjects; at least 2 are needed",
            records.len()
        )));
    }
    let mut volumes = HashMap::new();
    for r in &records {
        for seq in Sequence::ALL {
            let path = data.join(volume_file_name(&r.subject_id, seq));
            if path.exists() {
                volumes.insert(
                    (r.subject_id.clone(), seq),
                    read_rvol(&path).map_err(volume_err)?,
                );
            }
        }
    }
    build_samples(&records, |id, seq| volumes.remove(&(id.to_string(), seq))).map_err(|e| {
        CliError::Io(format!(
            "{e} (expected files like {} in {})",
            volume_file_name("<subject>", Sequence::T1),
            data.display()
        ))
    })
}

fn read_model_config(path: Option<&Path>) -> Result<ModelConfig, CliError> {
    let cfg = match path {
        None => ModelConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?
        }
    };
    cfg.validate().map_err(invalid)?;
    Ok(cfg)
}

fn score(
    params: &crate::vit_model::ModelParams<f32>,
    cfg: &ModelConfig,
    samples: &[&Sample],
    partition: Option<Partition>,
) -> Result<MetricsReport, CliError> {
    let preds = predict(params, cfg, samples).map_err(invalid)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label.code()).collect();
    let predicted: Vec<usize> = preds.iter().map(|p| p.class.code()).collect();
    let cm = confusion(&truth, &predicted).map_err(invalid)?;
    metrics(&cm, partition).map_err(invalid)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn cmd_train(a: &TrainArgs, argv: &[String], threads: usize) -> Result<(), CliError> {
    let tc = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        max_epochs: a.max_epochs,
        early_stop_patience: a.patience,
        early_stop_min_delta: a.min_delta,
        val_fraction: a.val_fraction,
        seed: a.seed,
        deterministic: a.deterministic,
        ignore_index: a.ignore_index,
        adam: AdamConfig {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.adam_eps,
        },
        micro_batch: a.micro_batch,
    };
    tc.validate().map_err(invalid)?;
    if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
        return Err(CliError::Invalid(format!(
            "train fraction {} must lie strictly between 0 and 1",
            a.train_fraction
        )));
    }
    let model_cfg = read_model_config(a.model_config.as_deref())?;

    create_dir(&a.out)?;
    let mut m = ManifestWriter::start(a.out.join("run_manifest.json"), "train", argv, threads)?;
    m.manifest.config =
        json!({ "train": tc, "model": model_cfg, "train_fraction": a.train_fraction });
    m.manifest.seed = Some(a.seed);
    m.input("data", &a.data);
    m.input("csv", &a.csv);
    if let Some(p) = &a.model_config {
        m.input("model_config", p);
    }
    m.write()?;
    eprintln!("learning rate: {}", a.lr);

    let result = train_body(a, &tc, &model_cfg, &mut m);
    finish(m, result)
}

fn train_body(
    a: &TrainArgs,
    tc: &TrainConfig,
    model_cfg: &ModelConfig,
    m: &mut ManifestWriter,
) -> Result<(), CliError> {
    let out = |name: &str| a.out.join(name);
    let samples = load_cohort(&a.data, &a.csv)?;
    let split = split_by_subject(&samples, a.train_fraction, a.seed).map_err(invalid)?;
    write_file(&out("split.csv"), render_split_manifest(&split))?;
    m.output("split", &out("split.csv"));
    eprintln!(
        "{} subjects: {} train samples, {} test samples",
        split.train_subjects().len() + split.test_subjects().len(),
        split.train.len(),
        split.test.len()
    );

    let init = init_params(model_cfg, a.seed).map_err(invalid)?;
    let outcome = train(model_cfg, init, &split.train, tc, |r| {
        match r.val_loss {
            Some(v) => eprintln!(
                "epoch {:>3}  train loss {:.4}  acc {:.3}  val loss {v:.4}",
                r.epoch, r.train_loss, r.train_acc
            ),
            None => eprintln!(
                "epoch {:>3}  train loss {:.4}  acc {:.3}",
                r.epoch, r.train_loss, r.train_acc
            ),
        }
        ControlFlow::Continue(())
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(TrainError::Divergence {
            epoch,
            reason,
            last_good,
        }) => {
            save_checkpoint(&last_good, model_cfg, out("best.osvt")).map_err(checkpoint_err)?;
            m.output("best", &out("best.osvt"));
            return Err(CliError::Divergence(format!(
                "training diverged in epoch {epoch}: {reason}; last good parameters saved to {}",
                out("best.osvt").display()
            )));
        }
        Err(e) => return Err(invalid(e)),
    };

    save_checkpoint(&outcome.best, model_cfg, out("best.osvt")).map_err(checkpoint_err)?;
    save_checkpoint(&outcome.last, model_cfg, out("last.osvt")).map_err(checkpoint_err)?;
    write_file(&out("train_log.jsonl"), outcome.log.to_jsonl())?;
    for (k, f) in [
        ("best", "best.osvt"),
        ("last", "last.osvt"),
        ("train_log", "train_log.jsonl"),
    ] {
        m.output(k, &out(f));
    }

    let train_refs: Vec<&Sample> = split.train.iter().collect();
    let test_refs: Vec<&Sample> = split.test.iter().collect();
    let train_report = score(
        &outcome.best,
        model_cfg,
        &train_refs,
        Some(Partition::Train),
    )?;
    let test_report = score(&outcome.best, model_cfg, &test_refs, Some(Partition::Test))?;
    let doc = json!({ "train": train_report, "test": test_report });
    write_file(
        &out("metrics.json"),
        serde_json::to_string_pretty(&doc).expect("serializes") + "\n",
    )?;
    m.output("metrics", &out("metrics.json"));
    m.manifest.config["best_epoch"] = json!(outcome.log.best_epoch);
    m.manifest.config["stop_reason"] = json!(outcome.log.stop_reason);
    print!("{}", render_report(&test_report, ReportFormat::Text));
    Ok(())
}

fn sibling_manifest(model: &Path, command: &str) -> PathBuf {
    model
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(format!("{command}_manifest.json"))
}

/// Rendered report plus the metrics behind it.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub rendered: String,
}

pub fn cmd_eval(a: &EvalArgs, argv: &[String], threads: usize) -> Result<EvalOutput, CliError> {
    let partition: Partition = a.partition.parse().map_err(CliError::Invalid)?;
    let manifest_path = a
        .manifest
        .clone()
        .unwrap_or_else(|| sibling_manifest(&a.model, "eval"));
    let mut m = ManifestWriter::start(manifest_path, "eval", argv, threads)?;
    m.manifest.config = json!({
        "selection": if a.all { "all".to_string() } else { partition.to_string() },
        "format": format!("{:?}", a.format).to_lowercase(),
    });
    m.input("model", &a.model);
    m.input("data", &a.data);
    m.input("csv", &a.csv);
    if let Some(s) = &a.split {
        m.input("split", s);
    }
    m.write()?;
    let result = (|| {
        let (params, cfg) = load_checkpoint(&a.model).map_err(checkpoint_err)?;
        let samples = load_cohort(&a.data, &a.csv)?;
        let (selected, tag): (Vec<&Sample>, Option<Partition>) = match &a.split {
            Some(path) if !a.all => {
                let parts = read_split_manifest(path)
                    .map_err(|e| CliError::io(path, e))?
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                let chosen = samples
                    .iter()
                    .filter(|s| parts.get(&s.subject_id) == Some(&partition))
                    .collect();
                (chosen, Some(partition))
            }
            _ => (samples.iter().collect(), None),
        };
        if selected.is_empty() {
            return Err(CliError::Invalid(format!(
                "no samples belong to the {partition} partition"
            )));
        }
        let report = score(&params, &cfg, &selected, tag)?;
        let rendered = render_report(&report, a.format);
        Ok(EvalOutput { report, rendered })
    })();
    finish(m, result)
}

/// Prints `code name p0 p1 p2` (or a JSON object) for one volume.
pub fn cmd_predict(a: &PredictArgs, argv: &[String], threads: usize) -> Result<String, CliError> {
    if !(a.age.is_finite() && a.age > 0.0) {
        return Err(CliError::Invalid(format!(
            "age {} must be a positive number of years",
            a.age
        )));
    }
    let manifest_path = a
        .manifest
        .clone()
        .unwrap_or_else(|| sibling_manifest(&a.model, "predict"));
    let mut m = ManifestWriter::start(manifest_path, "predict", argv, threads)?;
    m.manifest.config = json!({ "age": a.age, "format": format!("{:?}", a.format).to_lowercase() });
    m.input("model", &a.model);
    m.input("volume", &a.volume);
    m.write()?;
    let result = (|| {
        let (params, cfg) = load_checkpoint(&a.model).map_err(checkpoint_err)?;
        let volume = read_any_volume(&a.volume)?;
        let logits = infer_logits(&params, &cfg, &[&volume], &[a.age]).map_err(|e| match e {
            ModelError::Input(msg) => {
                CliError::Invalid(msg.replace("the preprocess step", "`osvit preprocess`"))
            }
            other => invalid(other),
        })?;
        let p = Prediction::from_logits(logits.data());
        Ok(match a.format {
            ReportFormat::Text => {
                let probs: Vec<String> =
                    p.probabilities.iter().map(|x| format!("{x:.6}")).collect();
                format!("{} {} {}\n", p.class.code(), p.class, probs.join(" "))
            }
            ReportFormat::Json => {
                let doc = json!({ "code": p.class.code(), "class": p.class.name(), "probabilities": p.probabilities });
                serde_json::to_string(&doc).expect("serializes") + "\n"
            }
        })
    })();
    finish(m, result)
}
