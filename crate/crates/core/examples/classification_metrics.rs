//! Scores a set of predictions and prints both report formats.
//!
//! Run with `cargo run --example classification_metrics`.

use osvit::dataset::{Partition, SurvivalClass};
use osvit::evaluation::{confusion_from_classes, metrics, render_report, ReportFormat};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    use SurvivalClass::{Long, Medium, Short};
    let truth = [
        Long, Long, Long, Medium, Medium, Medium, Short, Short, Short,
    ];
    let predicted = [
        Long, Long, Medium, Medium, Medium, Short, Long, Short, Short,
    ];

    let cm = confusion_from_classes(&truth, &predicted)?;
    let report = metrics(&cm, Some(Partition::Test))?;
    print!("{}", render_report(&report, ReportFormat::Text));
    println!();
    println!("{}", render_report(&report, ReportFormat::Json));
    Ok(())
}
