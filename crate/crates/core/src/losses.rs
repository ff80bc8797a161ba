//! Adversarial objectives maximized by the attack engine.
//!
//! Every objective is a batch mean of a per-sample term evaluated at
//! `x_i + δ`, and averaged with equal weights over an ensemble of models.
//! Gradients are taken with respect to `δ` only.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::kernels;
use crate::models::Network;
use crate::tensor::Tensor;

/// Default clipping threshold for cross-entropy, in nats.
pub const DEFAULT_BETA: f32 = 9.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    /// `min(CE, β)`; samples at or above β contribute no gradient.
    /// `β = ∞` gives plain cross-entropy.
    ClippedCe { beta: f32 },
    /// `−z_y`: the negated logit of the clean-predicted class.
    Logit,
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::ClippedCe { beta: DEFAULT_BETA }
    }
}

impl LossKind {
    pub fn id(&self) -> &'static str {
        match self {
            LossKind::ClippedCe { .. } => "clipped-ce",
            LossKind::Logit => "logit",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::ClippedCe { beta } if beta.is_nan() || beta <= 0.0 => {
                Err(Error::Config(format!("clipping threshold β must be positive, got {beta}")))
            }
            _ => Ok(()),
        }
    }

    /// Per-sample objective and its gradient with respect to the logits.
    fn per_sample(&self, logits: &[f32], label: usize) -> (f32, Vec<f32>) {
        match *self {
            LossKind::ClippedCe { beta } => {
                let (loss, probs) = kernels::softmax_cross_entropy(logits, logits.len(), &[label]);
                let ce = loss[0];
                if ce >= beta {
                    (beta, vec![0.0; logits.len()])
                } else {
                    let mut g = probs;
                    g[label] -= 1.0;
                    (ce, g)
                }
            }
            LossKind::Logit => {
                let mut g = vec![0.0; logits.len()];
                g[label] = -1.0;
                (-logits[label], g)
            }
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    /// Accepts `clipped-ce`, `ce` (β = ∞) and `logit`; the clipped form
    /// starts at the default β.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clipped-ce" => Ok(LossKind::default()),
            "ce" => Ok(LossKind::ClippedCe { beta: f32::INFINITY }),
            "logit" => Ok(LossKind::Logit),
            _ => Err(Error::Config(format!("unknown loss `{s}`"))),
        }
    }
}

/// An objective bound to the models it is evaluated on.
#[derive(Clone, Debug)]
pub struct LossSpec<'a> {
    kind: LossKind,
    ensemble: Vec<&'a Network>,
}

impl<'a> LossSpec<'a> {
    pub fn new(kind: LossKind, ensemble: Vec<&'a Network>) -> Result<Self> {
        kind.validate()?;
        let first = ensemble
            .first()
            .ok_or_else(|| Error::Config("loss needs at least one model".into()))?;
        for net in &ensemble[1..] {
            if net.input_shape() != first.input_shape() {
                return Err(Error::shape(
                    "ensemble input",
                    &first.input_shape(),
                    &net.input_shape(),
                ));
            }
        }
        Ok(Self { kind, ensemble })
    }

    pub fn single(kind: LossKind, net: &'a Network) -> Result<Self> {
        Self::new(kind, vec![net])
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn models(&self) -> &[&'a Network] {
        &self.ensemble
    }
}

/// Batch-mean loss and `∇_δ` for one model. Per-sample passes run in
/// parallel; their gradients are summed in sample order.
fn model_loss_and_grad(kind: LossKind, net: &Network, inputs: &Tensor, labels: &[usize], delta: &Tensor) -> Result<(f32, Tensor)> {
    let n = inputs.rows();
    let parts = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(f32, Tensor)> {
            let mut tape = Tape::new();
            let x = tape.leaf(inputs.select_rows(&[i])?, false);
            let d = tape.leaf(delta.clone(), true);
            let adv = tape.add_broadcast(x, d)?;
            let traced = net.trace(&mut tape, adv, false)?;
            let logits = tape.value(traced.logits);
            let label = labels[i];
            if label >= logits.len() {
                return Err(Error::Data(format!("label {label} out of range for {} classes", logits.len())));
            }
            let (loss, seed) = kind.per_sample(logits.data(), label);
            let seed = Tensor::new(logits.shape().to_vec(), seed)?;
            let mut grads = tape.backward(traced.logits, &seed)?;
            Ok((loss, grads.take(d).expect("δ is differentiable")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut loss = 0.0f32;
    let mut grad = Tensor::zeros(delta.shape());
    for (l, g) in &parts {
        loss += l;
        grad.add_assign(g)?;
    }
    let inv = 1.0 / n as f32;
    Ok((loss * inv, grad.scale(inv)))
}

/// Loss and gradient with respect to `δ` for a batch `inputs` of shape
/// `(n, c, h, w)`. `labels[k]` holds the clean predictions of the k-th
/// ensemble member for the batch rows. Ensemble members are averaged with
/// equal weights.
pub fn loss_and_grad(spec: &LossSpec<'_>, inputs: &Tensor, labels: &[Vec<usize>], delta: &Tensor) -> Result<(f32, Tensor)> {
    let n = inputs.rows();
    if n == 0 || inputs.rank() != 4 {
        return Err(Error::Usage("loss over an empty batch".into()));
    }
    if labels.len() != spec.ensemble.len() {
        return Err(Error::Usage(format!(
            "{} label lists for {} models",
            labels.len(),
            spec.ensemble.len()
        )));
    }
    if delta.shape() != &inputs.shape()[1..] {
        return Err(Error::shape("perturbation", &inputs.shape()[1..], delta.shape()));
    }
    let mut total_loss = 0.0f32;
    let mut total_grad = Tensor::zeros(delta.shape());
    for (net, lab) in spec.ensemble.iter().zip(labels) {
        if lab.len() != n {
            return Err(Error::Usage(format!("{} labels for a batch of {n}", lab.len())));
        }
        net.check_input(inputs)?;
        let (l, g) = model_loss_and_grad(spec.kind, net, inputs, lab, delta)?;
        total_loss += l;
        total_grad.add_assign(&g)?;
    }
    let k = spec.ensemble.len() as f32;
    Ok((total_loss / k, total_grad.scale(1.0 / k)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Architecture;

    fn setup() -> (Network, Network, Tensor, Tensor) {
        let a = Network::build(Architecture::CnnSmall, [1, 6, 6], 4, 1).unwrap();
        let b = Network::build(Architecture::Mlp2, [1, 6, 6], 4, 2).unwrap();
        let x = Tensor::from_fn(&[3, 1, 6, 6], |i| ((i * 13) % 17) as f32 / 17.0);
        let d = Tensor::from_fn(&[1, 6, 6], |i| ((i % 5) as f32 - 2.0) * 0.01);
        (a, b, x, d)
    }

    #[test]
    fn clip_saturates_with_zero_gradient() {
        // logits [12, 0]: CE of label 1 ≈ 12 nats
        let (loss, g) = LossKind::ClippedCe { beta: 9.0 }.per_sample(&[12.0, 0.0], 1);
        assert_eq!(loss, 9.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let (loss, _) = LossKind::ClippedCe { beta: 13.0 }.per_sample(&[12.0, 0.0], 1);
        assert!((loss - 12.0).abs() < 1e-4);
    }

    #[test]
    fn infinite_beta_matches_plain_cross_entropy() {
        let (net, _, x, d) = setup();
        let labels = vec![vec![0, 3, 1]];
        let spec = LossSpec::single(LossKind::ClippedCe { beta: f32::INFINITY }, &net).unwrap();
        let (loss, grad) = loss_and_grad(&spec, &x, &labels, &d).unwrap();

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let dv = tape.leaf(d.clone(), true);
        let adv = tape.add_broadcast(xv, dv).unwrap();
        let t = net.trace(&mut tape, adv, false).unwrap();
        let ce = tape.softmax_cross_entropy(t.logits, &labels[0]).unwrap();
        let plain_loss = tape.value(ce).data()[0];
        let plain = tape.backward(ce, &Tensor::full(&[], 1.0)).unwrap().take(dv).unwrap();
        assert!((loss - plain_loss).abs() < 1e-6);
        for (a, b) in grad.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ensemble_is_mean_of_members() {
        let (a, b, x, d) = setup();
        let la = a.predict_labels(&x).unwrap();
        let lb = b.predict_labels(&x).unwrap();
        let kind = LossKind::default();
        let (l1, g1) = loss_and_grad(&LossSpec::single(kind, &a).unwrap(), &x, std::slice::from_ref(&la), &d).unwrap();
        let (l2, g2) = loss_and_grad(&LossSpec::single(kind, &b).unwrap(), &x, std::slice::from_ref(&lb), &d).unwrap();
        let both = LossSpec::new(kind, vec![&a, &b]).unwrap();
        let (l, g) = loss_and_grad(&both, &x, &[la, lb], &d).unwrap();
        assert!((l - (l1 + l2) / 2.0).abs() < 1e-6);
        for ((v, p), q) in g.data().iter().zip(g1.data()).zip(g2.data()) {
            assert!((v - (p + q) / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_member_ensemble_is_bit_identical() {
        let (a, _, x, d) = setup();
        let la = a.predict_labels(&x).unwrap();
        let spec = LossSpec::new(LossKind::Logit, vec![&a]).unwrap();
        let r1 = loss_and_grad(&spec, &x, std::slice::from_ref(&la), &d).unwrap();
        let r2 = model_loss_and_grad(LossKind::Logit, &a, &x, &la, &d).unwrap();
        assert_eq!(r1.0.to_bits(), r2.0.to_bits());
        assert_eq!(r1.1, r2.1);
    }

    #[test]
    fn logit_loss_at_zero_delta() {
        let (a, _, x, _) = setup();
        let z = a.logits(&x).unwrap();
        let labels = z.argmax_rows();
        let spec = LossSpec::single(LossKind::Logit, &a).unwrap();
        for i in 0..3 {
            let xi = x.select_rows(&[i]).unwrap();
            let (loss, _) = loss_and_grad(&spec, &xi, &[vec![labels[i]]], &Tensor::zeros(&[1, 6, 6])).unwrap();
            assert_eq!(loss, -z.row(i)[labels[i]]);
        }
    }

    #[test]
    fn errors() {
        let (a, _, x, d) = setup();
        let spec = LossSpec::single(LossKind::default(), &a).unwrap();
        let empty = Tensor::zeros(&[0, 1, 6, 6]);
        assert!(matches!(loss_and_grad(&spec, &empty, &[vec![]], &d), Err(Error::Usage(_))));
        let bad_delta = Tensor::zeros(&[1, 5, 6]);
        assert!(matches!(
            loss_and_grad(&spec, &x, &[vec![0, 0, 0]], &bad_delta),
            Err(Error::Shape { .. })
        ));
        assert!(LossSpec::new(LossKind::ClippedCe { beta: 0.0 }, vec![&a]).is_err());
        assert!(LossSpec::new(LossKind::Logit, vec![]).is_err());
    }
}
