//! Universal perturbation engines.
//!
//! Three update rules share one driver, [`run_attack`]:
//!
//! * **SPGD**: for each batch, step `δ` by `α·sign(ḡ)` where `ḡ` is the
//!   batch-mean gradient, then project onto the `ε` box.
//! * **SGA**: for each large batch, run `M` inner small-batch sign steps on
//!   a scratch copy `δ_inner` starting from `δ`, summing the raw inner
//!   gradients into `g_aggs`; then apply a single `α·sign(g_aggs)` step to
//!   `δ`.
//! * **SGA with perturbation aggregation**: the same inner loop, but `δ` is
//!   replaced by the final `δ_inner`.
//!
//! Momentum and Nesterov look-ahead wrap the outer update by default; the
//! inner placement is available through [`MomentumPlacement::Inner`].

mod artifact;
mod ops;

use std::fmt;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use artifact::{load_uap, save_uap, uap_from_bytes, uap_to_bytes, write_pgm, UAP_MAGIC, UAP_VERSION};
pub use ops::{clip_box, momentum_wrap, sign};

use crate::data::{plan_batches, InnerIterations};
use crate::diagnostics::{cosine_similarity, MetricsRecord};
use crate::error::{Error, Result};
use crate::losses::{loss_and_grad, LossKind, LossSpec};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f32 = 10.0 / 255.0;
pub const DEFAULT_ALPHA: f32 = 1.0 / 255.0;
pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_LARGE_BATCH: usize = 250;
pub const DEFAULT_SMALL_BATCH: usize = 10;
pub const DEFAULT_TRAVERSALS: usize = 4;
pub const DEFAULT_DECAY: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Spgd,
    Sga,
    /// SGA inner loop with `δ ← δ_inner` as the outer update.
    SgaPerturbationAggregation,
}

impl Variant {
    pub fn id(self) -> &'static str {
        match self {
            Variant::Spgd => "spgd",
            Variant::Sga => "sga",
            Variant::SgaPerturbationAggregation => "sga-pa",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spgd" => Ok(Variant::Spgd),
            "sga" => Ok(Variant::Sga),
            "sga-pa" | "sga-perturbation-aggregation" => Ok(Variant::SgaPerturbationAggregation),
            _ => Err(Error::Config(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Momentum {
    #[default]
    None,
    Momentum,
    /// Momentum with the gradient taken at `δ + α·μ·v` (projected).
    Nesterov,
}

impl Momentum {
    pub fn id(self) -> &'static str {
        match self {
            Momentum::None => "none",
            Momentum::Momentum => "momentum",
            Momentum::Nesterov => "nesterov",
        }
    }
}

impl FromStr for Momentum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Momentum::None),
            "momentum" => Ok(Momentum::Momentum),
            "nesterov" => Ok(Momentum::Nesterov),
            _ => Err(Error::Config(format!("unknown momentum `{s}`"))),
        }
    }
}

/// Where the momentum buffer wraps the gradient for SGA variants. SPGD has
/// a single update site and ignores this.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MomentumPlacement {
    /// Wrap `g_aggs` at the outer update.
    #[default]
    Outer,
    /// Wrap each inner gradient; the outer update uses the raw aggregate.
    Inner,
}

impl FromStr for MomentumPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "outer" => Ok(MomentumPlacement::Outer),
            "inner" => Ok(MomentumPlacement::Inner),
            _ => Err(Error::Config(format!("unknown momentum placement `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub variant: Variant,
    pub momentum: Momentum,
    pub placement: MomentumPlacement,
    pub decay: f32,
    pub epsilon: f32,
    pub alpha: f32,
    pub epochs: usize,
    /// Batch size for SPGD, outer batch size for SGA.
    pub large_batch: usize,
    pub small_batch: usize,
    pub inner: InnerIterations,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Sga,
            momentum: Momentum::None,
            placement: MomentumPlacement::Outer,
            decay: DEFAULT_DECAY,
            epsilon: DEFAULT_EPSILON,
            alpha: DEFAULT_ALPHA,
            epochs: DEFAULT_EPOCHS,
            large_batch: DEFAULT_LARGE_BATCH,
            small_batch: DEFAULT_SMALL_BATCH,
            inner: InnerIterations::Traversals(DEFAULT_TRAVERSALS),
            loss: LossKind::default(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("ε must be positive, got {}", self.epsilon));
        }
        // α = 0 is allowed: it freezes δ, which is a useful control run
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("α must be non-negative, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return bad(format!("decay must be in [0, 1), got {}", self.decay));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.large_batch == 0 {
            return bad("large batch must be positive".into());
        }
        if self.variant != Variant::Spgd {
            if self.small_batch == 0 || self.small_batch > self.large_batch {
                return bad(format!(
                    "small batch {} must be in 1..={}",
                    self.small_batch, self.large_batch
                ));
            }
            if !self.large_batch.is_multiple_of(self.small_batch) {
                return bad(format!(
                    "small batch {} must divide large batch {}",
                    self.small_batch, self.large_batch
                ));
            }
            if matches!(self.inner, InnerIterations::Traversals(0) | InnerIterations::Count(0)) {
                return bad("inner iterations must be at least 1".into());
            }
        }
        self.loss.validate()
    }

    /// Short run name, e.g. `sga-s3` or `n-spgd-s0`.
    pub fn run_label(&self) -> String {
        let prefix = match self.momentum {
            Momentum::None => "",
            Momentum::Momentum => "m-",
            Momentum::Nesterov => "n-",
        };
        format!("{prefix}{}-s{}", self.variant, self.seed)
    }

    fn momentum_on_inner(&self) -> bool {
        self.momentum != Momentum::None
            && (self.placement == MomentumPlacement::Inner || self.variant == Variant::SgaPerturbationAggregation)
    }

    fn momentum_on_outer(&self) -> bool {
        self.momentum != Momentum::None && !self.momentum_on_inner()
    }
}

/// The perturbation and its budget.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationState {
    pub delta: Tensor,
    pub epsilon: f32,
    pub alpha: f32,
}

impl PerturbationState {
    pub fn zeros(shape: &[usize], epsilon: f32, alpha: f32) -> Self {
        Self {
            delta: Tensor::zeros(shape),
            epsilon,
            alpha,
        }
    }

    /// `δ ← clip(δ + α·sign(direction))`.
    pub fn step(&mut self, direction: &Tensor) -> Result<()> {
        self.delta = signed_step(&self.delta, direction, self.alpha, self.epsilon)?;
        Ok(())
    }
}

fn signed_step(delta: &Tensor, direction: &Tensor, alpha: f32, epsilon: f32) -> Result<Tensor> {
    let mut next = delta.clone();
    next.add_scaled(&sign(direction)?, alpha)?;
    Ok(clip_box(&next, epsilon))
}

/// Working state of one outer step's inner loop.
#[derive(Clone, Debug)]
pub struct InnerState {
    pub delta_inner: Tensor,
    /// Running sum of the raw inner gradients.
    pub g_aggs: Tensor,
    /// Inner steps taken so far.
    pub m: usize,
}

/// Evaluates the batch objective. Indices refer to the attack set.
pub trait GradientSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn delta_shape(&self) -> &[usize];

    /// Mean loss and `∇_δ` over the samples in `indices`.
    fn loss_and_grad(&self, indices: &[usize], delta: &Tensor) -> Result<(f32, Tensor)>;
}

/// A [`LossSpec`] over a fixed image set, with each model's clean
/// predictions as labels. Batches are evaluated in ascending index order, so
/// the gradient of a batch depends only on which samples it holds.
pub struct ModelObjective<'a> {
    spec: LossSpec<'a>,
    images: &'a Tensor,
    labels: Vec<Vec<usize>>,
    shape: Vec<usize>,
}

impl<'a> ModelObjective<'a> {
    /// Labels each image with every ensemble member's own prediction.
    pub fn new(spec: LossSpec<'a>, images: &'a Tensor) -> Result<Self> {
        let labels = spec
            .models()
            .iter()
            .map(|net| net.predict_labels(images))
            .collect::<Result<Vec<_>>>()?;
        Self::with_labels(spec, images, labels)
    }

    pub fn with_labels(spec: LossSpec<'a>, images: &'a Tensor, labels: Vec<Vec<usize>>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Data(format!("attack images must be (n, c, h, w), got {:?}", images.shape())));
        }
        if labels.len() != spec.models().len() || labels.iter().any(|l| l.len() != images.rows()) {
            return Err(Error::Usage("one clean label per image per model is required".into()));
        }
        Ok(Self {
            shape: images.shape()[1..].to_vec(),
            spec,
            images,
            labels,
        })
    }

    pub fn labels(&self) -> &[Vec<usize>] {
        &self.labels
    }
}

impl GradientSource for ModelObjective<'_> {
    fn len(&self) -> usize {
        self.images.rows()
    }

    fn delta_shape(&self) -> &[usize] {
        &self.shape
    }

    fn loss_and_grad(&self, indices: &[usize], delta: &Tensor) -> Result<(f32, Tensor)> {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        let batch = self.images.select_rows(&idx)?;
        let labels: Vec<Vec<usize>> = self
            .labels
            .iter()
            .map(|l| idx.iter().map(|&i| l[i]).collect())
            .collect();
        loss_and_grad(&self.spec, &batch, &labels, delta)
    }
}

/// Hooks into a running attack; all methods default to no-ops.
pub trait AttackObserver {
    /// After each inner step, with the gradient that step used.
    fn inner_step(&mut self, _state: &InnerState, _gradient: &Tensor) {}

    /// After each outer update of δ, with the update gradient (batch mean for
    /// SPGD, `g_aggs` otherwise).
    fn outer_step(&mut self, _step: usize, _delta: &Tensor, _update_gradient: &Tensor) {}
}

impl AttackObserver for () {}

/// Records δ and the update gradient after every outer step.
#[derive(Clone, Debug, Default)]
pub struct TraceRecorder {
    pub deltas: Vec<Tensor>,
    pub gradients: Vec<Tensor>,
}

impl AttackObserver for TraceRecorder {
    fn outer_step(&mut self, _step: usize, delta: &Tensor, update_gradient: &Tensor) {
        self.deltas.push(delta.clone());
        self.gradients.push(update_gradient.clone());
    }
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub state: PerturbationState,
    pub metrics: Vec<MetricsRecord>,
    /// Sign-quantized updates applied to δ itself.
    pub outer_sign_count: u64,
    /// Sign-quantized updates applied to `δ_inner`.
    pub inner_sign_count: u64,
}

impl AttackOutcome {
    /// Mean consecutive-gradient cosine over the run.
    pub fn mean_cosine(&self) -> Option<f32> {
        let c: Vec<f32> = self.metrics.iter().filter_map(|m| m.cosine_sim).collect();
        (!c.is_empty()).then(|| c.iter().sum::<f32>() / c.len() as f32)
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn look_ahead(delta: &Tensor, velocity: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    let mut p = delta.clone();
    p.add_scaled(velocity, cfg.alpha * cfg.decay)?;
    Ok(clip_box(&p, cfg.epsilon))
}

/// Runs the configured variant from `δ = 0`.
pub fn run_attack(config: &AttackConfig, source: &dyn GradientSource, observer: &mut dyn AttackObserver) -> Result<AttackOutcome> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::Data("attack set is empty".into()));
    }
    let plan = plan_batches(source.len(), config)?;
    let shape = source.delta_shape().to_vec();
    let run_id = config.run_label();
    let nesterov = config.momentum == Momentum::Nesterov;

    let mut state = PerturbationState::zeros(&shape, config.epsilon, config.alpha);
    let mut velocity = Tensor::zeros(&shape);
    let mut prev_update: Option<Tensor> = None;
    let mut metrics = Vec::new();
    let (mut outer_signs, mut inner_signs) = (0u64, 0u64);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        for (outer, batch) in plan.epoch_batches(epoch).iter().enumerate() {
            let (loss, update) = match config.variant {
                Variant::Spgd => {
                    let at = if nesterov {
                        look_ahead(&state.delta, &velocity, config)?
                    } else {
                        state.delta.clone()
                    };
                    let (loss, g) = source.loss_and_grad(batch, &at)?;
                    if config.momentum == Momentum::None {
                        state.step(&g)?;
                    } else {
                        let (dir, v) = momentum_wrap(&g, &velocity, config.decay)?;
                        velocity = v;
                        state.step(&dir)?;
                    }
                    outer_signs += 1;
                    (loss, g)
                }
                Variant::Sga | Variant::SgaPerturbationAggregation => {
                    let start = if nesterov && config.momentum_on_outer() {
                        look_ahead(&state.delta, &velocity, config)?
                    } else {
                        state.delta.clone()
                    };
                    let mut inner = InnerState {
                        delta_inner: start,
                        g_aggs: Tensor::zeros(&shape),
                        m: 0,
                    };
                    let mut loss_sum = 0.0f32;
                    for chunk in plan.inner_batches(epoch, outer, batch) {
                        let at = if nesterov && config.momentum_on_inner() {
                            look_ahead(&inner.delta_inner, &velocity, config)?
                        } else {
                            inner.delta_inner.clone()
                        };
                        let (l, g) = source.loss_and_grad(&chunk, &at)?;
                        let dir = if config.momentum_on_inner() {
                            let (dir, v) = momentum_wrap(&g, &velocity, config.decay)?;
                            velocity = v;
                            dir
                        } else {
                            g.clone()
                        };
                        inner.delta_inner = signed_step(&inner.delta_inner, &dir, config.alpha, config.epsilon)?;
                        inner.g_aggs.add_assign(&g)?;
                        inner.m += 1;
                        inner_signs += 1;
                        loss_sum += l;
                        observer.inner_step(&inner, &g);
                    }
                    if config.variant == Variant::Sga {
                        if config.momentum_on_outer() {
                            let (dir, v) = momentum_wrap(&inner.g_aggs, &velocity, config.decay)?;
                            velocity = v;
                            state.step(&dir)?;
                        } else {
                            state.step(&inner.g_aggs)?;
                        }
                        outer_signs += 1;
                    } else {
                        state.delta = inner.delta_inner;
                    }
                    (loss_sum / inner.m.max(1) as f32, inner.g_aggs)
                }
            };
            if !loss.is_finite() || !update.all_finite() {
                return Err(Error::Numeric(format!("non-finite loss or gradient at step {step}")));
            }
            let cosine_sim = prev_update
                .as_ref()
                .map(|p| cosine_similarity(p, &update))
                .transpose()?;
            metrics.push(MetricsRecord {
                run_id: run_id.clone(),
                step,
                loss,
                outer_sign_count: outer_signs,
                cosine_sim,
                timestamp_ms: now_ms(),
            });
            observer.outer_step(step, &state.delta, &update);
            prev_update = Some(update);
            step += 1;
        }
    }
    Ok(AttackOutcome {
        state,
        metrics,
        outer_sign_count: outer_signs,
        inner_sign_count: inner_signs,
    })
}

fn require(config: &AttackConfig, variant: Variant) -> Result<()> {
    if config.variant != variant {
        return Err(Error::Config(format!(
            "expected variant {variant}, config has {}",
            config.variant
        )));
    }
    Ok(())
}

pub fn spgd_attack(config: &AttackConfig, source: &dyn GradientSource) -> Result<AttackOutcome> {
    require(config, Variant::Spgd)?;
    run_attack(config, source, &mut ())
}

pub fn sga_attack(config: &AttackConfig, source: &dyn GradientSource) -> Result<AttackOutcome> {
    require(config, Variant::Sga)?;
    run_attack(config, source, &mut ())
}

pub fn perturbation_aggregation_attack(config: &AttackConfig, source: &dyn GradientSource) -> Result<AttackOutcome> {
    require(config, Variant::SgaPerturbationAggregation)?;
    run_attack(config, source, &mut ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{ScriptedGradients, VANISHING_GRADIENTS};

    fn wide_box(variant: Variant) -> AttackConfig {
        AttackConfig {
            variant,
            epsilon: 10.0,
            alpha: 1.0,
            epochs: 1,
            large_batch: 1,
            small_batch: 1,
            inner: InnerIterations::Traversals(1),
            ..AttackConfig::default()
        }
    }

    fn toy_source() -> ScriptedGradients {
        ScriptedGradients::new(VANISHING_GRADIENTS.iter().map(|g| Tensor::vector(g)).collect()).unwrap()
    }

    #[test]
    fn spgd_sequential_signs_cancel() {
        let out = spgd_attack(&wide_box(Variant::Spgd), &toy_source()).unwrap();
        assert_eq!(out.state.delta.data(), &[0.0, 2.0, 2.0, 0.0]);
        assert_eq!(out.outer_sign_count, 2);
    }

    #[test]
    fn sga_aggregates_before_quantizing() {
        struct Aggs(Vec<Tensor>);
        impl AttackObserver for Aggs {
            fn inner_step(&mut self, s: &InnerState, _g: &Tensor) {
                self.0.push(s.g_aggs.clone());
            }
        }
        let cfg = AttackConfig { large_batch: 2, ..wide_box(Variant::Sga) };
        let mut obs = Aggs(Vec::new());
        let out = run_attack(&cfg, &toy_source(), &mut obs).unwrap();
        let aggs = obs.0.last().unwrap();
        for (a, e) in aggs.data().iter().zip([0.99, 0.12, 0.35, 0.69]) {
            assert!((a - e).abs() < 1e-6);
        }
        assert_eq!(out.state.delta.data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(out.outer_sign_count, 1);
        assert_eq!(out.inner_sign_count, 2);
    }

    #[test]
    fn perturbation_aggregation_uses_no_outer_signs() {
        let cfg = AttackConfig { large_batch: 2, ..wide_box(Variant::SgaPerturbationAggregation) };
        let out = perturbation_aggregation_attack(&cfg, &toy_source()).unwrap();
        assert_eq!(out.outer_sign_count, 0);
        assert_eq!(out.inner_sign_count, 2);
        assert_eq!(out.state.delta.data(), &[0.0, 2.0, 2.0, 0.0]);
    }

    #[test]
    fn zero_step_keeps_delta_zero() {
        let cfg = AttackConfig { alpha: 0.0, ..wide_box(Variant::Spgd) };
        let out = spgd_attack(&cfg, &toy_source()).unwrap();
        assert_eq!(out.state.delta, Tensor::zeros(&[4]));
    }

    #[test]
    fn single_step_closed_form() {
        let g = Tensor::vector(&[0.3, -2.0, 0.0, 5.0]);
        let src = ScriptedGradients::new(vec![g.clone()]).unwrap();
        let cfg = AttackConfig {
            variant: Variant::Spgd,
            epochs: 1,
            large_batch: 4,
            ..AttackConfig::default()
        };
        let out = spgd_attack(&cfg, &src).unwrap();
        let expected = clip_box(&sign(&g).unwrap().scale(cfg.alpha), cfg.epsilon);
        assert_eq!(out.state.delta, expected);
    }

    #[test]
    fn wrong_variant_rejected() {
        let cfg = wide_box(Variant::Sga);
        assert!(matches!(spgd_attack(&cfg, &toy_source()), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        let ok = AttackConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            AttackConfig { epsilon: 0.0, ..ok.clone() },
            AttackConfig { decay: 1.0, ..ok.clone() },
            AttackConfig { epochs: 0, ..ok.clone() },
            AttackConfig { small_batch: 300, ..ok.clone() },
            AttackConfig { small_batch: 7, ..ok.clone() },
            AttackConfig { inner: InnerIterations::Count(0), ..ok.clone() },
            AttackConfig { loss: LossKind::ClippedCe { beta: -1.0 }, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
        // SPGD does not look at the inner settings
        let spgd = AttackConfig { variant: Variant::Spgd, small_batch: 7, ..ok };
        assert!(spgd.validate().is_ok());
    }

    #[test]
    fn labels() {
        let c = AttackConfig { momentum: Momentum::Nesterov, seed: 4, ..AttackConfig::default() };
        assert_eq!(c.run_label(), "n-sga-s4");
        let c = AttackConfig { variant: Variant::Spgd, ..AttackConfig::default() };
        assert_eq!(c.run_label(), "spgd-s0");
    }
}
