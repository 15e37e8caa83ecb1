//! Generates a small synthetic cohort and writes it as RVOL volumes plus
//! `metadata.csv`, the same layout `osvit synth` produces.
//!
//! Run with `cargo run --release --example synth_cohort -- [out_dir] [subjects]`.

use std::path::PathBuf;

use osvit::cli::volume_file_name;
use osvit::dataset::{build_samples, label_record, subject_class_counts, synth_generate};
use osvit::volume::{write_metadata_csv, write_rvol};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synth_cohort".into()));
    let subjects: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(6);

    let cohort = synth_generate(subjects, 42);
    std::fs::create_dir_all(&out)?;
    for (subject, seq, volume) in &cohort.volumes {
        write_rvol(volume, out.join(volume_file_name(subject, *seq)))?;
    }
    write_metadata_csv(&cohort.records, out.join("metadata.csv"))?;

    for (record, radius) in cohort.records.iter().zip(&cohort.radii) {
        println!(
            "{}  age {:>4.1}  {:>4} days  {:?}  lesion radius {radius:.2}",
            record.subject_id,
            record.age,
            record.survival_days.unwrap_or(0),
            label_record(record)?
        );
    }
    let samples = build_samples(&cohort.records, |id, seq| cohort.volume(id, seq).cloned())?;
    println!(
        "{} samples, subjects per class (long, medium, short) = {:?}, written to {}",
        samples.len(),
        subject_class_counts(&samples),
        out.display()
    );
    Ok(())
}
