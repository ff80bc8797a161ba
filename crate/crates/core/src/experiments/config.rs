//! Flat `key=value` experiment configs.
//!
//! ```text
//! # comments start with '#'
//! seeds=0,1,2
//! attack.variant=spgd,sga
//! attack.epsilon=10/255
//! ```
//!
//! Keys are dotted, unknown keys are rejected with their line number, and
//! numeric values accept `a/b` fraction literals.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attack::{AttackConfig, Momentum, MomentumPlacement, Variant};
use crate::data::InnerIterations;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::models::Architecture;

const KEYS: &[&str] = &[
    "out",
    "seeds",
    "data.source",
    "data.train_images",
    "data.train_labels",
    "data.test_images",
    "data.test_labels",
    "data.train_n",
    "data.pool_n",
    "data.seed",
    "data.noise",
    "data.size",
    "data.classes",
    "splits.attack",
    "splits.eval",
    "splits.seed",
    "train.models",
    "train.epochs",
    "train.learning_rate",
    "train.batch_size",
    "attack.models",
    "attack.variant",
    "attack.momentum",
    "attack.placement",
    "attack.decay",
    "attack.epsilon",
    "attack.alpha",
    "attack.epochs",
    "attack.large_batch",
    "attack.small_batch",
    "attack.k",
    "attack.m",
    "attack.loss",
    "attack.beta",
    "eval.models",
    "sweep.axis",
    "sweep.values",
];

/// Raw parsed document: key → (value, line).
#[derive(Clone, Debug)]
pub struct ConfigDoc {
    path: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl ConfigDoc {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| Error::ConfigLine {
                path: path.to_string(),
                line,
                msg,
            };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if entries.insert(key.to_string(), (value.to_string(), line)).is_some() {
                return Err(err(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self {
            path: path.to_string(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    fn error(&self, key: &str, msg: String) -> Error {
        Error::ConfigLine {
            path: self.path.clone(),
            line: self.entries.get(key).map_or(0, |e| e.1),
            msg: format!("{key}: {msg}"),
        }
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| self.error(key, format!("cannot parse `{v}`"))),
        }
    }

    fn float(&self, key: &str, default: f32) -> Result<f32> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => parse_fraction(v).ok_or_else(|| self.error(key, format!("not a number or fraction: `{v}`"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| self.error(key, format!("bad list item `{s}`"))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn opt_string(&self, key: &str) -> Option<String> {
        self.raw(key).map(str::to_string)
    }
}

/// Parses `0.04`, `10/255` or `-1/2`.
pub fn parse_fraction(s: &str) -> Option<f32> {
    match s.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
            (b != 0.0).then(|| (a / b) as f32)
        }
        None => s.parse().ok(),
    }
    .filter(|v: &f32| v.is_finite())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum DataSource {
    SynthDigits,
    SynthBlobs,
    Idx,
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth-digits" => Ok(DataSource::SynthDigits),
            "synth-blobs" => Ok(DataSource::SynthBlobs),
            "idx" => Ok(DataSource::Idx),
            _ => Err(Error::Config(format!("unknown data source `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_images: Option<String>,
    pub train_labels: Option<String>,
    pub test_images: Option<String>,
    pub test_labels: Option<String>,
    /// Synthetic sources: samples in the training part.
    pub train_n: usize,
    /// Synthetic sources: samples in the held-out pool that splits draw from.
    pub pool_n: usize,
    pub seed: u64,
    pub noise: Option<f32>,
    pub size: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitConfig {
    pub attack: usize,
    pub eval: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSection {
    pub models: Vec<Architecture>,
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackSection {
    /// Surrogate weight files; more than one forms an ensemble.
    pub models: Vec<String>,
    pub variants: Vec<Variant>,
    /// Shared hyper-parameters; variant and seed are set per run.
    pub base: AttackConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SweepAxis {
    /// Inner small-batch size; 0 runs SPGD.
    InnerBatch,
    /// Traversal factor K.
    K,
    /// Number of attack training samples.
    NTrain,
    /// Variant by index: 0 = spgd, 1 = sga, 2 = sga-pa.
    Variant,
}

impl SweepAxis {
    pub fn id(self) -> &'static str {
        match self {
            SweepAxis::InnerBatch => "inner-batch",
            SweepAxis::K => "K",
            SweepAxis::NTrain => "n-train",
            SweepAxis::Variant => "variant",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inner-batch" => Ok(SweepAxis::InnerBatch),
            "K" | "k" => Ok(SweepAxis::K),
            "n-train" | "n-train-samples" => Ok(SweepAxis::NTrain),
            "variant" => Ok(SweepAxis::Variant),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}`"))),
        }
    }
}

/// Grid values. For the variant axis, entries are variant ids.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
    #[serde(skip)]
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub splits: SplitConfig,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub eval_models: Vec<String>,
    pub sweep: Option<SweepSection>,
}

impl ExperimentConfig {
    pub fn from_doc(doc: &ConfigDoc, base_dir: &Path) -> Result<Self> {
        let defaults = AttackConfig::default();
        let inner = match (doc.raw("attack.k"), doc.raw("attack.m")) {
            (Some(_), Some(_)) => return Err(doc.error("attack.m", "set either attack.k or attack.m, not both".into())),
            (_, Some(_)) => InnerIterations::Count(doc.get("attack.m", 0)?),
            _ => match defaults.inner {
                InnerIterations::Traversals(k) => InnerIterations::Traversals(doc.get("attack.k", k)?),
                other => other,
            },
        };
        let mut loss: LossKind = doc.get("attack.loss", LossKind::default())?;
        if doc.raw("attack.beta").is_some() {
            match loss {
                LossKind::ClippedCe { .. } => loss = LossKind::ClippedCe { beta: doc.float("attack.beta", 0.0)? },
                LossKind::Logit => return Err(doc.error("attack.beta", "β only applies to the clipped cross-entropy".into())),
            }
        }
        let base = AttackConfig {
            variant: Variant::Sga,
            momentum: doc.get::<Momentum>("attack.momentum", defaults.momentum)?,
            placement: doc.get::<MomentumPlacement>("attack.placement", defaults.placement)?,
            decay: doc.float("attack.decay", defaults.decay)?,
            epsilon: doc.float("attack.epsilon", defaults.epsilon)?,
            alpha: doc.float("attack.alpha", defaults.alpha)?,
            epochs: doc.get("attack.epochs", defaults.epochs)?,
            large_batch: doc.get("attack.large_batch", defaults.large_batch)?,
            small_batch: doc.get("attack.small_batch", defaults.small_batch)?,
            inner,
            loss,
            seed: 0,
        };
        let sweep = match doc.raw("sweep.axis") {
            None => None,
            Some(_) => {
                let values: Vec<String> = doc.list("sweep.values")?.unwrap_or_default();
                if values.is_empty() {
                    return Err(doc.error("sweep.values", "empty grid".into()));
                }
                Some(SweepSection {
                    axis: doc.get("sweep.axis", SweepAxis::Variant)?,
                    values,
                })
            }
        };
        let cfg = Self {
            base_dir: base_dir.to_path_buf(),
            out: base_dir.join(doc.raw("out").unwrap_or("out")),
            seeds: doc.list("seeds")?.unwrap_or_else(|| vec![0]),
            data: DataConfig {
                source: doc.get("data.source", DataSource::SynthDigits)?,
                train_images: doc.opt_string("data.train_images"),
                train_labels: doc.opt_string("data.train_labels"),
                test_images: doc.opt_string("data.test_images"),
                test_labels: doc.opt_string("data.test_labels"),
                train_n: doc.get("data.train_n", 8000)?,
                pool_n: doc.get("data.pool_n", 3000)?,
                seed: doc.get("data.seed", 7)?,
                noise: doc.raw("data.noise").map(|_| doc.float("data.noise", 0.0)).transpose()?,
                size: doc.get("data.size", 28)?,
                classes: doc.get("data.classes", 10)?,
            },
            splits: SplitConfig {
                attack: doc.get("splits.attack", 500)?,
                eval: doc.get("splits.eval", 2000)?,
                seed: doc.get("splits.seed", 0)?,
            },
            train: TrainSection {
                models: doc.list("train.models")?.unwrap_or_else(|| vec![Architecture::CnnSmall]),
                epochs: doc.get("train.epochs", 2)?,
                learning_rate: doc.float("train.learning_rate", 0.05)?,
                batch_size: doc.get("train.batch_size", 32)?,
            },
            attack: AttackSection {
                models: doc.list("attack.models")?.unwrap_or_default(),
                variants: doc.list("attack.variant")?.unwrap_or_else(|| vec![Variant::Sga]),
                base,
            },
            eval_models: doc.list("eval.models")?.unwrap_or_default(),
            sweep,
        };
        cfg.validate(doc)?;
        Ok(cfg)
    }

    fn validate(&self, doc: &ConfigDoc) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(doc.error("seeds", "no seeds".into()));
        }
        if self.attack.variants.is_empty() {
            return Err(doc.error("attack.variant", "no variants".into()));
        }
        if self.data.source == DataSource::Idx {
            for key in ["data.train_images", "data.train_labels", "data.test_images", "data.test_labels"] {
                if doc.raw(key).is_none() {
                    return Err(doc.error(key, "required when data.source=idx".into()));
                }
            }
        }
        for variant in &self.attack.variants {
            AttackConfig { variant: *variant, ..self.attack.base.clone() }
                .validate()
                .map_err(|e| Error::Config(format!("{}: {e}", doc.path)))?;
        }
        Ok(())
    }

    /// Loads and resolves a config file, applying a seed override.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let doc = ConfigDoc::load(path)?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut cfg = Self::from_doc(&doc, base)?;
        if let Some(s) = seed_override {
            cfg.seeds = vec![s];
        }
        Ok(cfg)
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        self.base_dir.join(p)
    }

    /// sha256 over the canonical JSON of the resolved settings. Fraction
    /// literals, defaults and key order do not affect it; the output
    /// directory is excluded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
