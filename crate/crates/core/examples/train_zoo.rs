//! Trains the three architectures on the procedural digit corpus and saves
//! their weights.
//!
//! ```text
//! cargo run --example train_zoo -- [out_dir] [n_train]
//! ```

use std::path::{Path, PathBuf};

use uap_sga::data::{synth_digits, GlyphStyle};
use uap_sga::models::{self, Architecture, Network, TrainOptions};

pub fn run_example(out: &Path, n_train: usize, size: usize) -> uap_sga::Result<Vec<(Architecture, f32)>> {
    let style = GlyphStyle { size, ..GlyphStyle::default() };
    let train = synth_digits(n_train, &style, 7)?;
    let heldout = synth_digits(n_train / 4, &style, 8)?;
    std::fs::create_dir_all(out).map_err(|e| uap_sga::Error::io(out, e))?;
    let mut accuracies = Vec::new();
    for arch in Architecture::ALL {
        let mut net = Network::build(arch, train.image_shape(), train.num_classes(), 1)?;
        let opts = TrainOptions { epochs: 2, ..TrainOptions::default() };
        let report = models::train(&mut net, &train, Some(&heldout), &opts)?;
        let path = out.join(format!("{}.uapw", arch.id()));
        models::save(&net, &path)?;
        println!(
            "{:<10} {:>7} params  train loss {:.3}  held-out acc {:.4}  -> {}",
            arch.id(),
            net.num_parameters(),
            report.final_loss,
            report.final_eval_accuracy,
            path.display()
        );
        accuracies.push((arch, report.final_eval_accuracy));
    }
    Ok(accuracies)
}

fn main() -> uap_sga::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| PathBuf::from("zoo"), PathBuf::from);
    let n = args.next().and_then(|s| s.parse().ok()).unwrap_or(4000);
    run_example(&out, n, 28).map(drop)
}
