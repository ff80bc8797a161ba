//! Compares the tape's gradient with respect to δ against central finite
//! differences of the attack loss along random directions, for each
//! architecture.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uap_sga::losses::{loss_and_grad, LossKind, LossSpec};
use uap_sga::models::{Architecture, Network};
use uap_sga::Tensor;

/// Median relative error per architecture over `probes` random directions.
pub fn run_example(probes: usize) -> uap_sga::Result<Vec<(Architecture, f32)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = [1, 8, 8];
    let mut medians = Vec::new();
    for arch in Architecture::ALL {
        let net = Network::build(arch, shape, 4, 1)?;
        let x = Tensor::from_fn(&[3, 1, 8, 8], |_| rng.random_range(0.0..1.0));
        let labels = vec![net.predict_labels(&x)?];
        // unclipped cross-entropy: no flat region to hide a wrong gradient
        let spec = LossSpec::single(LossKind::ClippedCe { beta: f32::INFINITY }, &net)?;
        let delta = Tensor::from_fn(&shape, |_| rng.random_range(-0.03..0.03));
        let (_, g) = loss_and_grad(&spec, &x, &labels, &delta)?;
        // directional derivatives: f32 differences of single coordinates
        // drown in rounding, a whole random direction does not. A step that
        // crosses a ReLU kink still skews the odd probe, so report the median.
        let h = 1e-3f32;
        let mut errs = Vec::with_capacity(probes);
        for _ in 0..probes {
            let v = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
            let plus = delta.add(&v.scale(h))?;
            let minus = delta.sub(&v.scale(h))?;
            let numeric = (loss_and_grad(&spec, &x, &labels, &plus)?.0 - loss_and_grad(&spec, &x, &labels, &minus)?.0) / (2.0 * h);
            let analytic = g.dot(&v)?;
            errs.push((numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-3));
        }
        errs.sort_by(f32::total_cmp);
        let (median, max) = (errs[errs.len() / 2], errs[errs.len() - 1]);
        println!("{:<10} relative error over {probes} directions: median {median:.2e}, worst {max:.2e}", arch.id());
        medians.push((arch, median));
    }
    Ok(medians)
}

fn main() -> uap_sga::Result<()> {
    run_example(32).map(drop)
}
