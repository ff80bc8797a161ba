//! Limited-sample generalization study: one surrogate, two transfer
//! targets, every attack variant over a list of seeds.
//!
//! The attack set is drawn from the surrogates' training data and the
//! fooling ratio is measured on held-out images, so the numbers reflect
//! generalization to unseen samples and unseen models.

use std::path::PathBuf;

use serde::Serialize;

use crate::attack::{run_attack, AttackConfig, ModelObjective, Variant};
use crate::data::{make_splits, synth_digits, Dataset, GlyphStyle};
use crate::diagnostics::fooling_ratio;
use crate::error::Result;
use crate::losses::LossSpec;
use crate::models::{self, Architecture, Network, TrainOptions};

/// Baselines and variants compared by the study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Arm {
    /// SPGD with batch size `|x^LB|`: same number of δ updates as SGA.
    Spgd,
    /// SPGD with batch size `|x^SB|`: the small-batch baseline.
    SpgdSmall,
    Sga,
    SgaPerturbationAggregation,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Spgd, Arm::SpgdSmall, Arm::Sga, Arm::SgaPerturbationAggregation];

    pub fn id(self) -> &'static str {
        match self {
            Arm::Spgd => "spgd",
            Arm::SpgdSmall => "spgd-small",
            Arm::Sga => "sga",
            Arm::SgaPerturbationAggregation => "sga-pa",
        }
    }

    pub fn config(self, base: &AttackConfig) -> AttackConfig {
        match self {
            Arm::Spgd => AttackConfig { variant: Variant::Spgd, ..base.clone() },
            Arm::SpgdSmall => AttackConfig {
                variant: Variant::Spgd,
                large_batch: base.small_batch,
                ..base.clone()
            },
            Arm::Sga => AttackConfig { variant: Variant::Sga, ..base.clone() },
            Arm::SgaPerturbationAggregation => AttackConfig {
                variant: Variant::SgaPerturbationAggregation,
                ..base.clone()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct StudySettings {
    pub style: GlyphStyle,
    pub data_seed: u64,
    pub train_n: usize,
    pub heldout_n: usize,
    /// Surrogate first, then transfer targets.
    pub models: Vec<(Architecture, usize)>,
    pub learning_rate: f32,
    pub n_attack: usize,
    pub n_eval: usize,
    pub split_seed: u64,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    pub attack: AttackConfig,
    /// Trained weights are cached here when set.
    pub cache_dir: Option<PathBuf>,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            style: GlyphStyle::default(),
            data_seed: 7,
            train_n: 8000,
            heldout_n: 3000,
            models: vec![
                (Architecture::CnnSmall, 2),
                (Architecture::Mlp2, 6),
                (Architecture::CnnWide, 2),
            ],
            learning_rate: 0.05,
            n_attack: 500,
            n_eval: 2000,
            split_seed: 0,
            seeds: (0..5).collect(),
            arms: Arm::ALL.to_vec(),
            attack: AttackConfig::default(),
            cache_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StudyRow {
    pub arm: Arm,
    pub seed: u64,
    pub white_box_fr: f32,
    pub transfer_fr: Vec<f32>,
    pub transfer_mean: f32,
    pub mean_cosine: Option<f32>,
    pub outer_sign_count: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StudyReport {
    pub models: Vec<String>,
    pub heldout_accuracy: Vec<f32>,
    pub rows: Vec<StudyRow>,
}

pub fn median(values: &[f32]) -> f32 {
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    match v.len() {
        0 => f32::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

impl StudyReport {
    pub fn arm(&self, arm: Arm) -> impl Iterator<Item = &StudyRow> {
        self.rows.iter().filter(move |r| r.arm == arm)
    }

    pub fn median_white_box(&self, arm: Arm) -> f32 {
        median(&self.arm(arm).map(|r| r.white_box_fr).collect::<Vec<_>>())
    }

    pub fn median_transfer(&self, arm: Arm) -> f32 {
        median(&self.arm(arm).map(|r| r.transfer_mean).collect::<Vec<_>>())
    }

    /// Row for an arm and seed.
    pub fn get(&self, arm: Arm, seed: u64) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.arm == arm && r.seed == seed)
    }

    /// Fixed-width table, one row per arm × seed.
    pub fn table(&self) -> String {
        use std::fmt::Write;
        let mut out = format!("{:<11}{:>5}{:>10}{:>11}{:>9}{:>8}\n", "arm", "seed", "white-box", "transfer", "cosine", "signs");
        for r in &self.rows {
            let cos = r.mean_cosine.map_or("-".into(), |c| format!("{c:.3}"));
            writeln!(
                out,
                "{:<11}{:>5}{:>10.4}{:>11.4}{:>9}{:>8}",
                r.arm.id(),
                r.seed,
                r.white_box_fr,
                r.transfer_mean,
                cos,
                r.outer_sign_count
            )
            .unwrap();
        }
        out
    }
}

fn train_or_load(settings: &StudySettings, arch: Architecture, epochs: usize, train: &Dataset) -> Result<Network> {
    let path = settings.cache_dir.as_ref().map(|d| {
        d.join(format!(
            "{arch}-e{epochs}-n{}-d{}-{:08x}.uapw",
            settings.train_n,
            settings.data_seed,
            style_fingerprint(&settings.style)
        ))
    });
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        return models::load(p);
    }
    let mut net = Network::build(arch, train.image_shape(), train.num_classes(), 1)?;
    let opts = TrainOptions {
        epochs,
        learning_rate: settings.learning_rate,
        ..TrainOptions::default()
    };
    models::train(&mut net, train, None, &opts)?;
    if let Some(p) = path {
        models::save(&net, &p)?;
    }
    Ok(net)
}

fn style_fingerprint(s: &GlyphStyle) -> u32 {
    let text = format!("{s:?}");
    text.bytes().fold(0x811c9dc5u32, |h, b| (h ^ b as u32).wrapping_mul(0x01000193))
}

pub fn run_study(settings: &StudySettings) -> Result<StudyReport> {
    let all = synth_digits(settings.train_n + settings.heldout_n, &settings.style, settings.data_seed)?;
    let train = all.subset(&(0..settings.train_n).collect::<Vec<_>>())?;
    let heldout = all.subset(&(settings.train_n..all.len()).collect::<Vec<_>>())?;

    let nets = settings
        .models
        .iter()
        .map(|&(arch, epochs)| train_or_load(settings, arch, epochs, &train))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = settings.models.iter().map(|(a, _)| a.id().to_string()).collect();

    // attack samples come from the training data, evaluation from held-out
    let attack_idx = make_splits(train.labels(), settings.n_attack, 0, settings.split_seed)?.attack;
    let eval_idx = make_splits(heldout.labels(), 0, settings.n_eval, settings.split_seed)?.eval;
    let attack = train.subset(&attack_idx)?;
    let mut eval = heldout.subset(&eval_idx)?;
    let mut heldout_accuracy = Vec::new();
    for (id, net) in ids.iter().zip(&nets) {
        eval.cache_predictions(id, net)?;
        heldout_accuracy.push(net.accuracy(&eval)?);
    }

    let surrogate = &nets[0];
    let spec = LossSpec::single(settings.attack.loss, surrogate)?;
    let source = ModelObjective::new(spec, attack.images())?;
    let mut rows = Vec::new();
    for &seed in &settings.seeds {
        for &arm in &settings.arms {
            let config = AttackConfig { seed, ..arm.config(&settings.attack) };
            let outcome = run_attack(&config, &source, &mut ())?;
            let frs = ids
                .iter()
                .zip(&nets)
                .map(|(id, net)| Ok(fooling_ratio(net, id, &eval, &outcome.state.delta)?.fooling_ratio))
                .collect::<Result<Vec<f32>>>()?;
            let transfer = frs[1..].to_vec();
            rows.push(StudyRow {
                arm,
                seed,
                white_box_fr: frs[0],
                transfer_mean: if transfer.is_empty() { f32::NAN } else { transfer.iter().sum::<f32>() / transfer.len() as f32 },
                transfer_fr: transfer,
                mean_cosine: outcome.mean_cosine(),
                outer_sign_count: outcome.outer_sign_count,
            });
        }
    }
    Ok(StudyReport {
        models: ids,
        heldout_accuracy,
        rows,
    })
}
