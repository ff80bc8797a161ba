//! Two unstable per-sample gradients, quantized one at a time versus summed
//! first. Sequential sign steps cancel on coordinates whose gradient flips
//! sign; the aggregated step moves every coordinate.
//!
//! ```text
//! cargo run --example vanishing_demo
//! ```

use uap_sga::diagnostics::{vanishing_demo, VanishingReport};

pub fn run_example() -> uap_sga::Result<VanishingReport> {
    let r = vanishing_demo()?;
    println!("{:>5} {:>8} {:>8} {:>11} {:>10} {:>11}", "coord", "g_m", "g_m+1", "sequential", "sum", "aggregated");
    for i in 0..4 {
        println!(
            "{:>5} {:>8.2} {:>8.2} {:>11} {:>10.2} {:>11}",
            i, r.gradients[0][i], r.gradients[1][i], r.sequential[i], r.aggregate[i], r.aggregated[i]
        );
    }
    println!(
        "coordinates left at zero: sequential {}, aggregated {}",
        r.vanished_sequential, r.vanished_aggregated
    );
    Ok(r)
}

fn main() -> uap_sga::Result<()> {
    run_example().map(drop)
}
