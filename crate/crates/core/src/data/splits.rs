use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Disjoint, class-stratified index sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub attack: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Deals indices round-robin across classes (each class pool shuffled by
/// `seed`) so per-class counts in each split differ by at most one whenever
/// the classes have enough samples.
pub fn make_splits(labels: &[usize], n_attack: usize, n_eval: usize, seed: u64) -> Result<Splits> {
    if n_attack + n_eval > labels.len() {
        return Err(Error::Data(format!(
            "split needs {} samples ({} attack + {} eval), dataset has {}",
            n_attack + n_eval,
            n_attack,
            n_eval,
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        pools[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for pool in &mut pools {
        pool.shuffle(&mut rng);
        // pop() takes from the back
        pool.reverse();
    }
    let attack = deal(&mut pools, n_attack);
    let eval = deal(&mut pools, n_eval);
    Ok(Splits { attack, eval })
}

fn deal(pools: &mut [Vec<usize>], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        for pool in pools.iter_mut() {
            if out.len() == n {
                break;
            }
            if let Some(i) = pool.pop() {
                out.push(i);
            }
        }
    }
    out
}

/// `index,split` rows for every assigned index, ascending.
pub fn split_manifest_csv(splits: &Splits) -> String {
    let mut rows: Vec<(usize, &str)> = splits
        .attack
        .iter()
        .map(|&i| (i, "attack"))
        .chain(splits.eval.iter().map(|&i| (i, "eval")))
        .collect();
    rows.sort_unstable();
    let mut out = String::from("index,split\n");
    for (i, s) in rows {
        writeln!(out, "{i},{s}").unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(labels: &[usize], idx: &[usize], classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &i in idx {
            c[labels[i]] += 1;
        }
        c
    }

    #[test]
    fn disjoint_stratified_deterministic() {
        let labels: Vec<usize> = (0..300).map(|i| (i * 7) % 10).collect();
        let s = make_splits(&labels, 55, 101, 3).unwrap();
        assert_eq!(s.attack.len(), 55);
        assert_eq!(s.eval.len(), 101);
        assert!(s.attack.iter().all(|i| !s.eval.contains(i)));
        for set in [&s.attack, &s.eval] {
            let c = counts(&labels, set, 10);
            assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1, "{c:?}");
        }
        assert_eq!(s, make_splits(&labels, 55, 101, 3).unwrap());
        assert_ne!(s, make_splits(&labels, 55, 101, 4).unwrap());
    }

    #[test]
    fn insufficient_samples() {
        let labels = vec![0, 1, 0, 1];
        assert!(matches!(make_splits(&labels, 3, 2, 0), Err(Error::Data(_))));
    }

    #[test]
    fn manifest_lists_every_index() {
        let s = Splits { attack: vec![4, 1], eval: vec![0] };
        assert_eq!(split_manifest_csv(&s), "index,split\n0,eval\n1,attack\n4,attack\n");
    }
}
