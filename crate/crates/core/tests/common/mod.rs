//! Independent f64 reference forward passes and a finite-difference gradient
//! checker shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uap_sga::attack::{AttackObserver, GradientSource, InnerState};
use uap_sga::autodiff::Tape;
use uap_sga::models::{Architecture, Network};
use uap_sga::Tensor;

/// ReLU signs and pool winners seen during a forward pass.
type Pattern = Vec<u32>;

/// One output channel of a 3×3 same-padded convolution, pre-activation.
fn conv_channel(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], b: &[f64], o: usize) -> Vec<f64> {
    let mut out = vec![b[o]; h * w];
    for i in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let k = wt[((o * cin + i) * 3 + ky) * 3 + kx];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy as usize >= h {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && (sx as usize) < w {
                            out[y * w + xx] += k * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], b: &[f64]) -> Vec<f64> {
    (0..b.len()).flat_map(|o| conv_channel(x, cin, h, w, wt, b, o)).collect()
}

/// ReLU then 2×2 max-pool; records signs and pool winners.
fn relu_pool(z: &[f64], c: usize, h: usize, w: usize, pat: &mut Pattern) -> Vec<f64> {
    pat.extend(z.iter().map(|v| (*v > 0.0) as u32));
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for k in 0..4 {
                    let v = z[(ch * h + 2 * y + k / 2) * w + 2 * xx + k % 2].max(0.0);
                    if v > best {
                        best = v;
                        arg = k;
                    }
                }
                pat.push(arg as u32);
                out[(ch * oh + y) * ow + xx] = best;
            }
        }
    }
    out
}

fn dense(x: &[f64], wt: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * wt[i * out + j]).sum::<f64>())
        .collect()
}

fn cross_entropy(z: &[f64], label: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[label]
}

/// Intermediate values of the reference CNN forward.
#[derive(Clone)]
struct CnnTrace {
    /// Second conv pre-activation.
    z2: Vec<f64>,
    /// Pattern of the first block.
    pat1: Pattern,
}

struct Reference<'a> {
    arch: Architecture,
    shape: [usize; 3],
    classes: usize,
    label: usize,
    x: &'a [f64],
}

impl Reference<'_> {
    fn cnn_head(&self, p: &[&[f64]], input: &[f64]) -> CnnTrace {
        let [c, h, w] = self.shape;
        let mut pat1 = Vec::new();
        let z1 = conv(input, c, h, w, p[0], p[1]);
        let a1 = relu_pool(&z1, p[1].len(), h, w, &mut pat1);
        let z2 = conv(&a1, p[1].len(), h / 2, w / 2, p[2], p[3]);
        CnnTrace { z2, pat1 }
    }

    fn cnn_a1(&self, p: &[&[f64]], input: &[f64]) -> Vec<f64> {
        let [c, h, w] = self.shape;
        let z1 = conv(input, c, h, w, p[0], p[1]);
        relu_pool(&z1, p[1].len(), h, w, &mut Vec::new())
    }

    fn cnn_tail(&self, p: &[&[f64]], t: &CnnTrace) -> (f64, Pattern) {
        let [_, h, w] = self.shape;
        let mut pat = t.pat1.clone();
        let a2 = relu_pool(&t.z2, p[3].len(), h / 2, w / 2, &mut pat);
        (cross_entropy(&dense(&a2, p[4], p[5], self.classes), self.label), pat)
    }

    fn loss(&self, p: &[&[f64]], delta: &[f64]) -> (f64, Pattern) {
        let input: Vec<f64> = self.x.iter().zip(delta).map(|(a, b)| a + b).collect();
        match self.arch {
            Architecture::Mlp2 => {
                let hid = dense(&input, p[0], p[1], p[1].len());
                let pat: Pattern = hid.iter().map(|v| (*v > 0.0) as u32).collect();
                let hid: Vec<f64> = hid.into_iter().map(|v| v.max(0.0)).collect();
                (cross_entropy(&dense(&hid, p[2], p[3], self.classes), self.label), pat)
            }
            _ => self.cnn_tail(p, &self.cnn_head(p, &input)),
        }
    }
}

/// Cross-entropy of `label` for one image `x + δ`, plus the activation
/// pattern.
pub fn reference_loss(arch: Architecture, shape: [usize; 3], classes: usize, p: &[Vec<f64>], x: &[f64], delta: &[f64], label: usize) -> (f64, Pattern) {
    let p: Vec<&[f64]> = p.iter().map(Vec::as_slice).collect();
    Reference { arch, shape, classes, label, x }.loss(&p, delta)
}

#[derive(Debug, Default)]
pub struct CheckReport {
    pub components: usize,
    /// Largest |analytic − numeric| / tolerance seen (≤ 1 passes).
    pub worst_ratio: f64,
    pub worst_at: String,
    /// Components whose step had to shrink because a ReLU or pool winner
    /// flipped inside ±h.
    pub kink_retries: usize,
    pub failures: usize,
}

impl CheckReport {
    pub fn merge(&mut self, o: CheckReport) {
        self.components += o.components;
        if o.worst_ratio > self.worst_ratio {
            self.worst_ratio = o.worst_ratio;
            self.worst_at = o.worst_at;
        }
        self.kink_retries += o.kink_retries;
        self.failures += o.failures;
    }
}

pub fn tolerance(numeric: f64) -> f64 {
    (1e-3 * numeric.abs()).max(1e-5)
}

/// Central difference of `f` at coordinate `i` of `v`, shrinking the step
/// until the activation pattern is the same on both sides.
fn central(f: &dyn Fn(&[f64], usize) -> (f64, Pattern), v: &[f64], i: usize, base: &Pattern, retries: &mut usize) -> f64 {
    let mut h = 1e-3;
    let mut probe = v.to_vec();
    loop {
        probe[i] = v[i] + h;
        let (fp, pp) = f(&probe, i);
        probe[i] = v[i] - h;
        let (fm, pm) = f(&probe, i);
        if (pp == *base && pm == *base) || h < 1e-8 {
            return (fp - fm) / (2.0 * h);
        }
        *retries += 1;
        h /= 10.0;
    }
}

/// A seeded network with non-zero biases, one input, one δ and a label.
pub fn seeded_pair(arch: Architecture, shape: [usize; 3], classes: usize, seed: u64) -> (Network, Tensor, Tensor, usize) {
    let mut net = Network::build(arch, shape, classes, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = net
        .weights()
        .iter()
        .map(|w| {
            if w.rank() == 1 {
                Tensor::from_fn(w.shape(), |_| rng.random_range(-0.1..0.1))
            } else {
                w.clone()
            }
        })
        .collect();
    net.set_weights(weights).unwrap();
    let n: usize = shape.iter().product();
    let mut s = vec![1];
    s.extend_from_slice(&shape);
    let x = Tensor::from_fn(&s, |_| rng.random_range(0.0..1.0));
    let d = Tensor::from_fn(&shape, |_| rng.random_range(-0.04..0.04));
    assert_eq!(d.len(), n);
    (net, x, d, rng.random_range(0..classes))
}

/// Compares tape gradients of the cross-entropy against central finite
/// differences of the f64 reference, for δ and every weight.
pub fn check_pair(arch: Architecture, shape: [usize; 3], classes: usize, seed: u64) -> CheckReport {
    let (net, x, d, label) = seeded_pair(arch, shape, classes, seed);

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let dv = tape.leaf(d.clone(), true);
    let adv = tape.add_broadcast(xv, dv).unwrap();
    let traced = net.trace(&mut tape, adv, true).unwrap();
    let loss = tape.softmax_cross_entropy(traced.logits, &[label]).unwrap();
    let mut grads = tape.backward(loss, &Tensor::full(&[], 1.0)).unwrap();
    let g_delta = grads.take(dv).unwrap();
    let g_weights: Vec<Tensor> = traced.weights.iter().map(|w| grads.take(*w).unwrap()).collect();

    let to64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let owned: Vec<Vec<f64>> = net.weights().iter().map(to64).collect();
    let params: Vec<&[f64]> = owned.iter().map(Vec::as_slice).collect();
    let x64 = to64(&x);
    let d64 = to64(&d);
    let r = Reference { arch, shape, classes, label, x: &x64 };
    let (_, base) = r.loss(&params, &d64);

    let mut report = CheckReport::default();
    let compare = |analytic: &[f32], f: &dyn Fn(&[f64], usize) -> (f64, Pattern), v: &[f64], what: &str, report: &mut CheckReport| {
        for i in 0..v.len() {
            let numeric = central(f, v, i, &base, &mut report.kink_retries);
            let err = (analytic[i] as f64 - numeric).abs();
            let ratio = err / tolerance(numeric);
            report.components += 1;
            if ratio > 1.0 {
                report.failures += 1;
            }
            if ratio > report.worst_ratio {
                report.worst_ratio = ratio;
                report.worst_at = format!("{arch} seed {seed} {what}[{i}]: analytic {} numeric {numeric}", analytic[i]);
            }
        }
    };

    let f_delta = |dd: &[f64], _: usize| r.loss(&params, dd);
    compare(g_delta.data(), &f_delta, &d64, "delta", &mut report);

    // CNN weights past the first conv reuse cached activations: a second-conv
    // weight only touches its own output channel
    let cnn = arch != Architecture::Mlp2;
    let input: Vec<f64> = x64.iter().zip(&d64).map(|(a, b)| a + b).collect();
    let (trace, a1) = if cnn {
        (Some(r.cnn_head(&params, &input)), r.cnn_a1(&params, &input))
    } else {
        (None, Vec::new())
    };
    for (k, gw) in g_weights.iter().enumerate() {
        let f_w = |wk: &[f64], i: usize| {
            let mut p = params.clone();
            p[k] = wk;
            match (k, &trace) {
                (2 | 3, Some(t)) => {
                    let [_, h, w] = shape;
                    let c1 = p[1].len();
                    let o = if k == 2 { i / (c1 * 9) } else { i };
                    let plane = (h / 2) * (w / 2);
                    let mut t = t.clone();
                    t.z2[o * plane..(o + 1) * plane].copy_from_slice(&conv_channel(&a1, c1, h / 2, w / 2, p[2], p[3], o));
                    r.cnn_tail(&p, &t)
                }
                (4 | 5, Some(t)) => r.cnn_tail(&p, t),
                _ => r.loss(&p, &d64),
            }
        };
        compare(gw.data(), &f_w, params[k], &format!("w{k}"), &mut report);
    }
    report
}

/// The (architecture, input shape, classes, seed) pairs used for the
/// gradient check: at least 20 across all three architectures.
pub fn gradient_check_pairs() -> Vec<(Architecture, [usize; 3], usize, u64)> {
    let mut pairs = Vec::new();
    for s in 0..8 {
        pairs.push((Architecture::Mlp2, [1, 4, 4], 3, s));
    }
    for s in 0..7 {
        pairs.push((Architecture::CnnSmall, [1, 8, 8], 3, 100 + s));
    }
    for s in 0..6 {
        pairs.push((Architecture::CnnWide, [2, 4, 4], 3, 200 + s));
    }
    pairs
}

/// Pseudo-random heavy-tailed gradients keyed by batch and δ.
pub struct NoiseSource {
    pub n: usize,
    pub shape: Vec<usize>,
    pub seed: u64,
}

impl GradientSource for NoiseSource {
    fn len(&self) -> usize {
        self.n
    }

    fn delta_shape(&self) -> &[usize] {
        &self.shape
    }

    fn loss_and_grad(&self, indices: &[usize], delta: &Tensor) -> uap_sga::Result<(f32, Tensor)> {
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        let mut key = self.seed;
        for &i in &sorted {
            key = key.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
        }
        for v in delta.data() {
            key = key.rotate_left(7) ^ v.to_bits() as u64;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let g = Tensor::from_fn(&self.shape, |_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => rng.random_range(-1e6..1e6),
            _ => rng.random_range(-1.0..1.0),
        });
        Ok((0.0, g))
    }
}

/// Records the largest |δ| / ε excess seen at any inner or outer step.
#[derive(Default)]
pub struct BoxWatch {
    pub epsilon: f32,
    pub violations: usize,
    pub checks: usize,
}

impl BoxWatch {
    pub fn new(epsilon: f32) -> Self {
        Self { epsilon, ..Self::default() }
    }
}

impl AttackObserver for BoxWatch {
    fn inner_step(&mut self, state: &InnerState, _: &Tensor) {
        self.checks += 1;
        if state.delta_inner.max_abs() > self.epsilon {
            self.violations += 1;
        }
    }

    fn outer_step(&mut self, _: usize, delta: &Tensor, _: &Tensor) {
        self.checks += 1;
        if delta.max_abs() > self.epsilon {
            self.violations += 1;
        }
    }
}
