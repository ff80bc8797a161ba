//! Measurement instruments: fooling ratio, gradient stability, sign-op
//! accounting and the sign-quantization vanishing demonstration.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, GradientSource, Variant};
use crate::data::{Dataset, InnerIterations};
use crate::error::{Error, Result};
use crate::models::Network;
use crate::tensor::Tensor;

pub const METRICS_CSV_HEADER: &str = "run_id,step,loss,outer_sign_count,cosine_sim";
pub const EVAL_CSV_HEADER: &str = "model,fr,clean_acc,n";

/// One row per outer update of δ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub step: usize,
    pub loss: f32,
    /// Cumulative count of sign-quantized updates applied to δ.
    pub outer_sign_count: u64,
    /// Cosine between this and the previous update gradient; absent at step 0.
    pub cosine_sim: Option<f32>,
    /// Milliseconds since the Unix epoch. Not written to CSV.
    pub timestamp_ms: u64,
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let cos = r.cosine_sim.map(|c| format!("{c:.7}")).unwrap_or_default();
        writeln!(out, "{},{},{:.7},{},{}", r.run_id, r.step, r.loss, r.outer_sign_count, cos).unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub fooling_ratio: f32,
    pub n_eval: usize,
    pub clean_accuracy: f32,
    /// Model the perturbation was crafted on.
    pub white_box: bool,
}

/// `model,fr,clean_acc,n`; white-box rows get a trailing `*` on the model.
pub fn eval_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let star = if r.white_box { "*" } else { "" };
        writeln!(
            out,
            "{}{},{:.6},{:.6},{}",
            r.model_id, star, r.fooling_ratio, r.clean_accuracy, r.n_eval
        )
        .unwrap();
    }
    out
}

/// Adds `δ` to every image and clamps to valid pixels.
pub fn apply_perturbation(images: &Tensor, delta: &Tensor) -> Result<Tensor> {
    if images.shape()[1..] != *delta.shape() {
        return Err(Error::shape("apply_perturbation", &images.shape()[1..], delta.shape()));
    }
    let d = delta.data();
    let mut out = images.clone();
    for row in out.data_mut().chunks_mut(d.len().max(1)) {
        for (v, &p) in row.iter_mut().zip(d) {
            *v = (*v + p).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Fraction of samples whose predicted label changes under `δ`. Labels on
/// both sides are model predictions; ground truth only feeds
/// `clean_accuracy`.
pub fn fooling_ratio(net: &Network, model_id: &str, eval: &Dataset, delta: &Tensor) -> Result<EvalReport> {
    if eval.is_empty() {
        return Err(Error::Data("fooling ratio over an empty evaluation set".into()));
    }
    let clean = match eval.predictions(model_id) {
        Some(p) => p.to_vec(),
        None => net.predict_labels(eval.images())?,
    };
    let adv = net.predict_labels(&apply_perturbation(eval.images(), delta)?)?;
    let flipped = clean.iter().zip(&adv).filter(|(a, b)| a != b).count();
    let correct = clean.iter().zip(eval.labels()).filter(|(a, b)| a == b).count();
    let n = eval.len();
    Ok(EvalReport {
        model_id: model_id.to_string(),
        fooling_ratio: flipped as f32 / n as f32,
        n_eval: n,
        clean_accuracy: correct as f32 / n as f32,
        white_box: false,
    })
}

/// Cosine of the angle between two gradients; 0 when either is zero.
pub fn cosine_similarity(prev: &Tensor, curr: &Tensor) -> Result<f32> {
    if prev.shape() != curr.shape() {
        return Err(Error::shape("cosine_similarity", prev.shape(), curr.shape()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in prev.data().iter().zip(curr.data()) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) as f32)
}

/// Cosine similarity of each consecutive pair of update gradients.
pub fn stability_probe(trace: &[Tensor]) -> Result<Vec<f32>> {
    if trace.len() < 2 {
        return Err(Error::Usage(format!(
            "stability probe needs at least 2 gradients, got {}",
            trace.len()
        )));
    }
    trace.windows(2).map(|w| cosine_similarity(&w[0], &w[1])).collect()
}

pub fn mean(values: &[f32]) -> f32 {
    if values.is_empty() {
        return f32::NAN;
    }
    values.iter().sum::<f32>() / values.len() as f32
}

/// The two unstable gradients of the vanishing example, restricted to the
/// four coordinates it shows.
pub const VANISHING_GRADIENTS: [[f32; 4]; 2] = [[-0.01, 0.10, 0.05, 0.70], [1.00, 0.02, 0.30, -0.01]];

#[derive(Clone, Debug, PartialEq)]
pub struct VanishingReport {
    pub gradients: [[f32; 4]; 2],
    /// δ after quantizing each gradient separately, in units of α.
    pub sequential: [i32; 4],
    /// Sum of the two gradients before quantization.
    pub aggregate: [f32; 4],
    /// δ after one quantized step on the aggregate, in units of α.
    pub aggregated: [i32; 4],
    pub vanished_sequential: usize,
    pub vanished_aggregated: usize,
}

impl VanishingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("coordinate,g_m,g_m1,sequential,aggregate,aggregated\n");
        for i in 0..4 {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                i,
                self.gradients[0][i],
                self.gradients[1][i],
                self.sequential[i],
                self.aggregate[i],
                self.aggregated[i]
            )
            .unwrap();
        }
        out
    }
}

/// Replays a fixed list of per-sample gradients regardless of δ. The
/// gradient of a batch is the mean of its samples' entries.
pub struct ScriptedGradients {
    gradients: Vec<Tensor>,
    shape: Vec<usize>,
}

impl ScriptedGradients {
    pub fn new(gradients: Vec<Tensor>) -> Result<Self> {
        let shape = gradients
            .first()
            .ok_or_else(|| Error::Usage("no scripted gradients".into()))?
            .shape()
            .to_vec();
        if gradients.iter().any(|g| g.shape() != shape.as_slice()) {
            return Err(Error::Usage("scripted gradients differ in shape".into()));
        }
        Ok(Self { gradients, shape })
    }
}

impl GradientSource for ScriptedGradients {
    fn len(&self) -> usize {
        self.gradients.len()
    }

    fn delta_shape(&self) -> &[usize] {
        &self.shape
    }

    fn loss_and_grad(&self, indices: &[usize], _delta: &Tensor) -> Result<(f32, Tensor)> {
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        let mut g = Tensor::zeros(&self.shape);
        for i in sorted {
            g.add_assign(&self.gradients[i])?;
        }
        Ok((0.0, g.scale(1.0 / indices.len() as f32)))
    }
}

/// Runs the two unstable gradients through the real SPGD and SGA engines
/// with `α = 1` and a box wide enough never to clip.
pub fn vanishing_demo() -> Result<VanishingReport> {
    let grads: Vec<Tensor> = VANISHING_GRADIENTS.iter().map(|g| Tensor::vector(g)).collect();
    let source = ScriptedGradients::new(grads)?;
    let base = AttackConfig {
        epsilon: 10.0,
        alpha: 1.0,
        epochs: 1,
        large_batch: 1,
        small_batch: 1,
        inner: InnerIterations::Traversals(1),
        seed: 0,
        ..AttackConfig::default()
    };

    let spgd = AttackConfig { variant: Variant::Spgd, ..base.clone() };
    let sequential = run_attack(&spgd, &source, &mut ())?;

    // one outer step whose two inner steps see one gradient each
    let sga = AttackConfig { variant: Variant::Sga, large_batch: 2, ..base };
    let aggregated = run_attack(&sga, &source, &mut ())?;

    let to_units = |t: &Tensor| -> [i32; 4] { std::array::from_fn(|i| t.data()[i].round() as i32) };
    let sequential = to_units(&sequential.state.delta);
    let aggregated = to_units(&aggregated.state.delta);
    let aggregate = std::array::from_fn(|i| VANISHING_GRADIENTS[0][i] + VANISHING_GRADIENTS[1][i]);
    Ok(VanishingReport {
        gradients: VANISHING_GRADIENTS,
        sequential,
        aggregate,
        aggregated,
        vanished_sequential: sequential.iter().filter(|&&v| v == 0).count(),
        vanished_aggregated: aggregated.iter().filter(|&&v| v == 0).count(),
    })
}
