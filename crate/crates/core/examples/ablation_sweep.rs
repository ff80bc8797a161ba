//! Gradient versus perturbation aggregation, then sweeps over the inner
//! batch size (0 meaning plain SPGD) and the traversal factor K.
//!
//! ```text
//! cargo run --example ablation_sweep
//! ```

use uap_sga::attack::{run_attack, AttackConfig, ModelObjective, Variant};
use uap_sga::data::{make_splits, synth_digits, GlyphStyle, InnerIterations};
use uap_sga::diagnostics::fooling_ratio;
use uap_sga::losses::LossSpec;
use uap_sga::models::{self, Architecture, Network, TrainOptions};

/// `(setting, held-out fooling ratio)` per run.
pub fn run_example(size: usize, n_train: usize, n_attack: usize) -> uap_sga::Result<Vec<(String, f32)>> {
    let style = GlyphStyle { size, ..GlyphStyle::default() };
    let train = synth_digits(n_train, &style, 7)?;
    let pool = synth_digits(1000, &style, 8)?;
    let mut net = Network::build(Architecture::CnnSmall, train.image_shape(), train.num_classes(), 1)?;
    models::train(&mut net, &train, None, &TrainOptions { epochs: 2, ..TrainOptions::default() })?;
    let attack = train.subset(&make_splits(train.labels(), n_attack, 0, 0)?.attack)?;
    let mut eval = pool.subset(&make_splits(pool.labels(), 0, 500, 0)?.eval)?;
    eval.cache_predictions("cnn-small", &net)?;
    let spec = LossSpec::single(Default::default(), &net)?;
    let source = ModelObjective::new(spec, attack.images())?;
    let large = n_attack.min(250);

    let mut grid: Vec<(String, AttackConfig)> = Vec::new();
    let base = AttackConfig { large_batch: large, ..AttackConfig::default() };
    grid.push(("gradient aggregation".into(), base.clone()));
    grid.push((
        "perturbation aggregation".into(),
        AttackConfig { variant: Variant::SgaPerturbationAggregation, ..base.clone() },
    ));
    for sb in [0, 2, 5, 10, 25] {
        let c = match sb {
            0 => AttackConfig { variant: Variant::Spgd, ..base.clone() },
            _ => AttackConfig { small_batch: sb, ..base.clone() },
        };
        grid.push((format!("|x^SB| = {sb}"), c));
    }
    for k in [1, 2, 4, 8] {
        grid.push((format!("K = {k}"), AttackConfig { inner: InnerIterations::Traversals(k), ..base.clone() }));
    }

    let mut rows = Vec::new();
    for (label, config) in grid {
        let out = run_attack(&config, &source, &mut ())?;
        let fr = fooling_ratio(&net, "cnn-small", &eval, &out.state.delta)?.fooling_ratio;
        println!("{label:<26} FR {fr:.4}  outer signs {:>4}  inner signs {:>5}", out.outer_sign_count, out.inner_sign_count);
        rows.push((label, fr));
    }
    Ok(rows)
}

fn main() -> uap_sga::Result<()> {
    run_example(28, 4000, 500).map(drop)
}
