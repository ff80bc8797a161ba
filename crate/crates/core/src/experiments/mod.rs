//! Config-driven pipeline: train surrogates, craft perturbations, evaluate
//! them and sweep hyper-parameters. Every command writes a JSON manifest
//! listing the artifacts it produced.

mod config;
pub mod study;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    parse_fraction, AttackSection, ConfigDoc, DataConfig, DataSource, ExperimentConfig, SplitConfig, SweepAxis,
    SweepSection, TrainSection,
};

use crate::attack::{load_uap, run_attack, save_uap, write_pgm, AttackConfig, ModelObjective, Variant};
use crate::data::{load_idx, make_splits, split_manifest_csv, synth_blobs, synth_digits, Dataset, GlyphStyle, InnerIterations};
use crate::diagnostics::{eval_csv, fooling_ratio, metrics_csv, vanishing_demo, EvalReport, VanishingReport};
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::models::{self, Network, TrainOptions};

/// Environment variable holding the worker-slot count.
pub const WORKERS_ENV: &str = "UAP_WORKERS";

/// Sizes the global thread pool from [`WORKERS_ENV`]; unset or invalid
/// leaves the default. Call once, before any parallel work.
pub fn init_workers() -> Result<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got `{v}`")))?;
    // a pool that is already built keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: String,
    pub seed: u64,
    pub weights: String,
    pub train_accuracy: f32,
    pub heldout_accuracy: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub variant: Variant,
    pub seed: u64,
    /// Grid value for sweep runs.
    pub axis_value: Option<String>,
    pub delta: String,
    pub metrics: String,
    pub eval: String,
    pub fooling_ratios: BTreeMap<String, f32>,
    /// Mean fooling ratio over the surrogate models.
    pub white_box_fr: f32,
    /// Mean fooling ratio over the remaining models, if any.
    pub transfer_fr: Option<f32>,
    pub mean_cosine: Option<f32>,
    pub outer_sign_count: u64,
    pub inner_sign_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub trained: Vec<TrainSummary>,
    pub runs: Vec<RunSummary>,
    pub wall_time_s: f64,
}

impl RunManifest {
    fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            config_hash: cfg.hash(),
            artifacts: Vec::new(),
            trained: Vec::new(),
            runs: Vec::new(),
            wall_time_s: 0.0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Checks that every listed artifact exists and that weight and
/// perturbation files parse.
pub fn verify_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    for a in &manifest.artifacts {
        let p = out.join(a);
        match p.extension().and_then(|e| e.to_str()) {
            Some("uapw") => drop(models::load(&p)?),
            Some("uap") => drop(load_uap(&p)?),
            _ => {
                fs::metadata(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    Ok(())
}

fn manifest_path(cfg: &ExperimentConfig, command: &str) -> PathBuf {
    cfg.out.join(format!("{command}.json"))
}

fn guard_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn write(out: &Path, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let p = out.join(rel);
    if let Some(parent) = p.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&p, contents).map_err(|e| Error::io(&p, e))
}

fn finish(cfg: &ExperimentConfig, mut manifest: RunManifest, started: Instant) -> Result<RunManifest> {
    manifest.wall_time_s = started.elapsed().as_secs_f64();
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&cfg.out, &format!("{}.json", manifest.command), json)?;
    Ok(manifest)
}

/// Training part and held-out pool of the configured source.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Idx => {
            let path = |p: &Option<String>| cfg.resolve(p.as_deref().expect("validated"));
            let train = load_idx(&path(&d.train_images), &path(&d.train_labels))?;
            let test = load_idx(&path(&d.test_images), &path(&d.test_labels))?;
            Ok((train, test))
        }
        DataSource::SynthDigits | DataSource::SynthBlobs => {
            let n = d.train_n + d.pool_n;
            let all = if d.source == DataSource::SynthDigits {
                let defaults = GlyphStyle::default();
                let style = GlyphStyle {
                    size: d.size,
                    noise: d.noise.unwrap_or(defaults.noise),
                    ..defaults
                };
                synth_digits(n, &style, d.seed)?
            } else {
                synth_blobs(d.classes, n.div_ceil(d.classes.max(1)), [1, d.size, d.size], d.seed)?
            };
            let train = all.subset(&(0..d.train_n).collect::<Vec<_>>())?;
            let pool = all.subset(&(d.train_n..n).collect::<Vec<_>>())?;
            Ok((train, pool))
        }
    }
}

pub fn cmd_train(cfg: &ExperimentConfig, force: bool) -> Result<RunManifest> {
    let started = Instant::now();
    guard_overwrite(&manifest_path(cfg, "train"), force)?;
    let (train, pool) = load_data(cfg)?;
    let [c, h, w] = train.image_shape();
    let jobs: Vec<_> = cfg
        .train
        .models
        .iter()
        .flat_map(|&a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let trained = jobs
        .par_iter()
        .map(|&(arch, seed)| -> Result<(Network, TrainSummary)> {
            let mut net = Network::build(arch, [c, h, w], train.num_classes(), seed)?;
            let opts = TrainOptions {
                epochs: cfg.train.epochs,
                learning_rate: cfg.train.learning_rate,
                batch_size: cfg.train.batch_size,
                seed,
            };
            let report = models::train(&mut net, &train, Some(&pool), &opts)?;
            let summary = TrainSummary {
                model: arch.id().to_string(),
                seed,
                weights: format!("models/{arch}-s{seed}.uapw"),
                train_accuracy: report.final_train_accuracy,
                heldout_accuracy: report.final_eval_accuracy,
            };
            Ok((net, summary))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = RunManifest::new("train", cfg);
    for (net, summary) in trained {
        models::save(&net, &cfg.out.join(&summary.weights))?;
        manifest.artifacts.push(summary.weights.clone());
        manifest.trained.push(summary);
    }
    finish(cfg, manifest, started)
}

/// A loaded model and whether perturbations are crafted on it.
struct Member {
    id: String,
    path: PathBuf,
    net: Network,
    white_box: bool,
}

fn model_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn load_members(cfg: &ExperimentConfig, extra: &[PathBuf]) -> Result<Vec<Member>> {
    if cfg.attack.models.is_empty() {
        return Err(Error::Config("attack.models lists no surrogate weights".into()));
    }
    let white: Vec<PathBuf> = cfg.attack.models.iter().map(|p| cfg.resolve(p)).collect();
    let others = cfg.eval_models.iter().map(|p| cfg.resolve(p)).chain(extra.iter().cloned());
    let mut members: Vec<Member> = Vec::new();
    for path in white.iter().cloned().chain(others) {
        if members.iter().any(|m| m.path == path) {
            continue;
        }
        members.push(Member {
            id: model_id(&path),
            net: models::load(&path)?,
            white_box: white.contains(&path),
            path,
        });
    }
    Ok(members)
}

struct AttackData {
    attack: Dataset,
    eval: Dataset,
    split_csv: String,
}

fn prepare(cfg: &ExperimentConfig, members: &[Member], n_attack: usize) -> Result<AttackData> {
    let (_, pool) = load_data(cfg)?;
    let shape = pool.image_shape();
    for m in members {
        if m.net.input_shape() != shape {
            return Err(Error::shape("model input vs data", &m.net.input_shape(), &shape));
        }
    }
    let splits = make_splits(pool.labels(), n_attack, cfg.splits.eval, cfg.splits.seed)?;
    let mut attack = pool.subset(&splits.attack)?;
    let mut eval = pool.subset(&splits.eval)?;
    for m in members {
        attack.cache_predictions(&m.id, &m.net)?;
        eval.cache_predictions(&m.id, &m.net)?;
    }
    Ok(AttackData {
        attack,
        eval,
        split_csv: split_manifest_csv(&splits),
    })
}

/// One attack run: craft, save, evaluate.
fn execute(
    cfg: &ExperimentConfig,
    members: &[Member],
    data: &AttackData,
    n_attack: usize,
    config: &AttackConfig,
    run_id: String,
    axis_value: Option<String>,
) -> Result<RunSummary> {
    let surrogates: Vec<&Member> = members.iter().filter(|m| m.white_box).collect();
    let spec = LossSpec::new(config.loss, surrogates.iter().map(|m| &m.net).collect())?;
    let rows: Vec<usize> = (0..n_attack).collect();
    let attack = data.attack.subset(&rows)?;
    let labels = surrogates
        .iter()
        .map(|m| attack.predictions(&m.id).expect("cached").to_vec())
        .collect();
    let source = ModelObjective::with_labels(spec, attack.images(), labels)?;
    let outcome = run_attack(config, &source, &mut ())?;

    let reports = members
        .iter()
        .map(|m| {
            let mut r = fooling_ratio(&m.net, &m.id, &data.eval, &outcome.state.delta)?;
            r.white_box = m.white_box;
            Ok(r)
        })
        .collect::<Result<Vec<EvalReport>>>()?;
    let delta = format!("uaps/{run_id}.uap");
    let metrics = format!("metrics/{run_id}.csv");
    let eval = format!("eval/{run_id}.csv");
    save_uap(&outcome.state, &cfg.out.join(&delta))?;
    write_pgm(&outcome.state, &cfg.out.join(format!("uaps/{run_id}.pgm")))?;
    write(&cfg.out, &metrics, metrics_csv(&outcome.metrics))?;
    write(&cfg.out, &eval, eval_csv(&reports))?;

    let mean = |it: &mut dyn Iterator<Item = f32>| {
        let v: Vec<f32> = it.collect();
        (!v.is_empty()).then(|| v.iter().sum::<f32>() / v.len() as f32)
    };
    Ok(RunSummary {
        run_id,
        variant: config.variant,
        seed: config.seed,
        axis_value,
        delta,
        metrics,
        eval,
        fooling_ratios: reports.iter().map(|r| (r.model_id.clone(), r.fooling_ratio)).collect(),
        white_box_fr: mean(&mut reports.iter().filter(|r| r.white_box).map(|r| r.fooling_ratio)).unwrap_or(0.0),
        transfer_fr: mean(&mut reports.iter().filter(|r| !r.white_box).map(|r| r.fooling_ratio)),
        mean_cosine: outcome.mean_cosine(),
        outer_sign_count: outcome.outer_sign_count,
        inner_sign_count: outcome.inner_sign_count,
    })
}

fn push_run(manifest: &mut RunManifest, run: RunSummary) {
    let stem = run.delta.trim_end_matches(".uap");
    manifest.artifacts.extend([
        run.delta.clone(),
        format!("{stem}.pgm"),
        run.metrics.clone(),
        run.eval.clone(),
    ]);
    manifest.runs.push(run);
}

/// Runs every configured variant × seed on the surrogate(s).
pub fn cmd_attack(cfg: &ExperimentConfig, force: bool) -> Result<RunManifest> {
    let started = Instant::now();
    guard_overwrite(&manifest_path(cfg, "attack"), force)?;
    let members = load_members(cfg, &[])?;
    let n = cfg.splits.attack;
    let data = prepare(cfg, &members, n)?;
    let jobs: Vec<AttackConfig> = cfg
        .attack
        .variants
        .iter()
        .flat_map(|&variant| {
            cfg.seeds.iter().map(move |&seed| AttackConfig {
                variant,
                seed,
                ..cfg.attack.base.clone()
            })
        })
        .collect();
    let runs = jobs
        .par_iter()
        .map(|c| execute(cfg, &members, &data, n, c, c.run_label(), None))
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = RunManifest::new("attack", cfg);
    write(&cfg.out, "splits.csv", &data.split_csv)?;
    manifest.artifacts.push("splits.csv".into());
    for run in runs {
        push_run(&mut manifest, run);
    }
    finish(cfg, manifest, started)
}

/// Evaluates a stored perturbation on the configured and extra models.
/// Surrogates listed in `attack.models` are flagged white-box.
pub fn cmd_eval(cfg: &ExperimentConfig, uap: &Path, extra_models: &[PathBuf], force: bool) -> Result<Vec<EvalReport>> {
    let state = load_uap(uap)?;
    let mut members = if cfg.attack.models.is_empty() {
        Vec::new()
    } else {
        load_members(cfg, extra_models)?
    };
    if members.is_empty() {
        for p in extra_models {
            members.push(Member {
                id: model_id(p),
                net: models::load(p)?,
                white_box: false,
                path: p.clone(),
            });
        }
    }
    if members.is_empty() {
        return Err(Error::Usage("no models to evaluate: pass --model or set attack.models/eval.models".into()));
    }
    let data = prepare(cfg, &members, cfg.splits.attack)?;
    let rel = format!("eval/{}.csv", model_id(uap));
    guard_overwrite(&cfg.out.join(&rel), force)?;
    let reports = members
        .iter()
        .map(|m| {
            let mut r = fooling_ratio(&m.net, &m.id, &data.eval, &state.delta)?;
            r.white_box = m.white_box;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    write(&cfg.out, &rel, eval_csv(&reports))?;
    Ok(reports)
}

pub const SWEEP_CSV_HEADER: &str =
    "axis,value,variant,seed,run_id,white_box_fr,transfer_fr,mean_cosine,outer_sign_count,inner_sign_count";

fn sweep_csv(axis: SweepAxis, runs: &[RunSummary]) -> String {
    use std::fmt::Write;
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    let opt = |v: Option<f32>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in runs {
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{},{},{},{}",
            axis.id(),
            r.axis_value.as_deref().unwrap_or(""),
            r.variant,
            r.seed,
            r.run_id,
            r.white_box_fr,
            opt(r.transfer_fr),
            opt(r.mean_cosine),
            r.outer_sign_count,
            r.inner_sign_count
        )
        .unwrap();
    }
    out
}

/// Applies one grid value to a base config. Returns the config and the
/// attack-sample count.
fn grid_point(axis: SweepAxis, value: &str, base: &AttackConfig, n_attack: usize) -> Result<(AttackConfig, usize)> {
    let num = || -> Result<usize> {
        value
            .parse()
            .map_err(|_| Error::Config(format!("sweep value `{value}` is not an integer")))
    };
    let mut c = base.clone();
    let mut n = n_attack;
    match axis {
        SweepAxis::InnerBatch => match num()? {
            0 => c.variant = Variant::Spgd,
            sb => c.small_batch = sb,
        },
        SweepAxis::K => c.inner = InnerIterations::Traversals(num()?),
        SweepAxis::NTrain => n = num()?,
        SweepAxis::Variant => c.variant = value.parse()?,
    }
    c.validate()?;
    if n == 0 {
        return Err(Error::Config("n-train grid values must be positive".into()));
    }
    Ok((c, n))
}

/// Grid × seeds (× variants, unless the axis is the variant) with shared
/// seeds and a fixed evaluation split.
pub fn cmd_sweep(cfg: &ExperimentConfig, force: bool) -> Result<RunManifest> {
    let started = Instant::now();
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep.axis and sweep.values are required".into()))?;
    guard_overwrite(&manifest_path(cfg, "sweep"), force)?;
    let variants = match sweep.axis {
        SweepAxis::Variant | SweepAxis::InnerBatch => vec![Variant::Sga],
        _ => cfg.attack.variants.clone(),
    };
    let mut jobs = Vec::new();
    for value in &sweep.values {
        for &variant in &variants {
            let base = AttackConfig { variant, ..cfg.attack.base.clone() };
            let (c, n) = grid_point(sweep.axis, value, &base, cfg.splits.attack)?;
            for &seed in &cfg.seeds {
                jobs.push((AttackConfig { seed, ..c.clone() }, n, value.clone()));
            }
        }
    }
    if jobs.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let max_n = jobs.iter().map(|j| j.1).max().unwrap_or(0);
    let members = load_members(cfg, &[])?;
    // prefixes of a stratified split stay stratified, so every grid point
    // shares one evaluation set
    let data = prepare(cfg, &members, max_n)?;
    let runs = jobs
        .par_iter()
        .map(|(c, n, v)| {
            let id = format!("{}-{v}-{}", sweep.axis.id(), c.run_label());
            execute(cfg, &members, &data, *n, c, id, Some(v.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = RunManifest::new("sweep", cfg);
    write(&cfg.out, "splits.csv", &data.split_csv)?;
    write(&cfg.out, "sweep.csv", sweep_csv(sweep.axis, &runs))?;
    manifest.artifacts.extend(["splits.csv".to_string(), "sweep.csv".to_string()]);
    for run in runs {
        push_run(&mut manifest, run);
    }
    finish(cfg, manifest, started)
}

/// Runs the vanishing demonstration; writes `vanishing.csv` under `out`
/// when given.
pub fn cmd_demo_vanishing(out: Option<&Path>) -> Result<VanishingReport> {
    let report = vanishing_demo()?;
    if let Some(dir) = out {
        write(dir, "vanishing.csv", report.to_csv())?;
    }
    Ok(report)
}
