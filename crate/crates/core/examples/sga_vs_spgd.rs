//! The limited-sample comparison: a perturbation crafted on cnn-small from
//! 500 training images, scored on 2,000 held-out images against the
//! surrogate and two unseen architectures. Trains the zoo first (a few
//! minutes on one core); pass a cache directory to reuse the weights.
//!
//! ```text
//! cargo run --example sga_vs_spgd -- [cache_dir]
//! ```

use std::path::PathBuf;

use uap_sga::experiments::study::{run_study, Arm, StudyReport, StudySettings};

pub fn run_example(settings: &StudySettings) -> uap_sga::Result<StudyReport> {
    let report = run_study(settings)?;
    for (m, acc) in report.models.iter().zip(&report.heldout_accuracy) {
        println!("{m:<10} held-out accuracy {acc:.4}");
    }
    print!("{}", report.table());
    println!("{:<11}{:>12}{:>12}", "arm", "median wb", "median tr");
    for &arm in &settings.arms {
        println!("{:<11}{:>12.4}{:>12.4}", arm.id(), report.median_white_box(arm), report.median_transfer(arm));
    }
    Ok(report)
}

fn main() -> uap_sga::Result<()> {
    let settings = StudySettings {
        cache_dir: std::env::args().nth(1).map(PathBuf::from),
        arms: Arm::ALL.to_vec(),
        ..StudySettings::default()
    };
    run_example(&settings).map(drop)
}
