//! Momentum and Nesterov wrappers around SPGD and SGA, plus a two-model
//! ensemble, all at the default hyper-parameters on a small digit task.
//!
//! ```text
//! cargo run --example momentum_variants
//! ```

use uap_sga::attack::{run_attack, AttackConfig, Momentum, ModelObjective, Variant};
use uap_sga::data::{make_splits, synth_digits, GlyphStyle};
use uap_sga::diagnostics::fooling_ratio;
use uap_sga::losses::LossSpec;
use uap_sga::models::{self, Architecture, Network, TrainOptions};

/// `(label, fooling ratio on each model)` per run.
pub fn run_example(size: usize, n_train: usize, n_attack: usize) -> uap_sga::Result<Vec<(String, Vec<f32>)>> {
    let style = GlyphStyle { size, ..GlyphStyle::default() };
    let train = synth_digits(n_train, &style, 7)?;
    let pool = synth_digits(1000, &style, 8)?;
    let mut nets = Vec::new();
    for arch in [Architecture::CnnSmall, Architecture::Mlp2] {
        let mut net = Network::build(arch, train.image_shape(), train.num_classes(), 1)?;
        models::train(&mut net, &train, None, &TrainOptions { epochs: 2, ..TrainOptions::default() })?;
        nets.push(net);
    }
    let ids = ["cnn-small", "mlp-2"];
    let attack = train.subset(&make_splits(train.labels(), n_attack, 0, 0)?.attack)?;
    let mut eval = pool.subset(&make_splits(pool.labels(), 0, 500, 0)?.eval)?;
    for (id, net) in ids.iter().zip(&nets) {
        eval.cache_predictions(id, net)?;
    }

    let runs = [
        ("SPGD", Variant::Spgd, Momentum::None, 1),
        ("M-SPGD", Variant::Spgd, Momentum::Momentum, 1),
        ("N-SPGD", Variant::Spgd, Momentum::Nesterov, 1),
        ("SGA", Variant::Sga, Momentum::None, 1),
        ("M-SGA", Variant::Sga, Momentum::Momentum, 1),
        ("N-SGA", Variant::Sga, Momentum::Nesterov, 1),
        ("SGA ensemble", Variant::Sga, Momentum::None, 2),
    ];
    println!("{:<14}{:>11}{:>9}{:>8}", "attack", "cnn-small", "mlp-2", "signs");
    let mut rows = Vec::new();
    for (label, variant, momentum, members) in runs {
        let config = AttackConfig { variant, momentum, ..AttackConfig::default() };
        let spec = LossSpec::new(config.loss, nets.iter().take(members).collect())?;
        let source = ModelObjective::new(spec, attack.images())?;
        let out = run_attack(&config, &source, &mut ())?;
        let frs = ids
            .iter()
            .zip(&nets)
            .map(|(id, net)| Ok(fooling_ratio(net, id, &eval, &out.state.delta)?.fooling_ratio))
            .collect::<uap_sga::Result<Vec<f32>>>()?;
        println!("{label:<14}{:>11.4}{:>9.4}{:>8}", frs[0], frs[1], out.outer_sign_count);
        rows.push((label.to_string(), frs));
    }
    Ok(rows)
}

fn main() -> uap_sga::Result<()> {
    run_example(28, 4000, 500).map(drop)
}
