//! Trains a reduced network on a synthetic cohort with a subject-level split,
//! early stopping on a validation carve-out, then scores the held-out
//! subjects and shows per-sample probabilities.
//!
//! Run with `cargo run --release --example train_and_evaluate`.

use std::ops::ControlFlow;

use osvit::dataset::{build_samples, split_by_subject, synth_generate};
use osvit::evaluation::{confusion, metrics, render_report, ReportFormat};
use osvit::training::{predict, train, TrainConfig};
use osvit::vit_model::{init_params, ModelConfig};
use osvit::volume::Dims;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cohort = synth_generate(15, 7);
    let samples = build_samples(&cohort.records, |id, seq| cohort.volume(id, seq).cloned())?;
    let split = split_by_subject(&samples, 0.8, 7)?;
    println!(
        "{} train samples ({} subjects), {} test samples ({} subjects)",
        split.train.len(),
        split.train_subjects().len(),
        split.test.len(),
        split.test_subjects().len()
    );

    let model = ModelConfig {
        patch_dims: Dims::new(10, 16, 16),
        embed_dim: 32,
        num_layers: 1,
        num_heads: 4,
        head_dim: 8,
        mlp_dim: 64,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        max_epochs: 40,
        early_stop_patience: 8,
        val_fraction: 0.2,
        seed: 7,
        ..TrainConfig::default()
    };
    let out = train(&model, init_params(&model, 7)?, &split.train, &cfg, |r| {
        println!(
            "epoch {:>2}  train loss {:.4}  acc {:.3}  val loss {}",
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.val_loss.map_or("-".into(), |v| format!("{v:.4}"))
        );
        ControlFlow::Continue(())
    })?;
    println!(
        "stopped: {:?}, best epoch {}, validation subjects {:?}",
        out.log.stop_reason, out.log.best_epoch, out.log.val_subjects
    );

    let test: Vec<_> = split.test.iter().collect();
    let predictions = predict(&out.best, &model, &test)?;
    for (s, p) in test.iter().zip(&predictions).take(4) {
        println!(
            "{} {:?}: true {:?}, predicted {:?}, p = {:.3?}",
            s.subject_id, s.sequence, s.label, p.class, p.probabilities
        );
    }
    let truth: Vec<usize> = test.iter().map(|s| s.label.code()).collect();
    let predicted: Vec<usize> = predictions.iter().map(|p| p.class.code()).collect();
    let report = metrics(&confusion(&truth, &predicted)?, None)?;
    print!("{}", render_report(&report, ReportFormat::Text));
    Ok(())
}
