use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Percentages of the low-data study.
pub const FRACTIONS: [u32; 5] = [10, 25, 50, 75, 100];

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Disjoint seeded split of `0..n`; `floor(train_fraction * n)` indices go to
/// training. Both halves are returned in ascending order.
pub fn split(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Invalid(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Invalid(format!(
            "splitting {n} samples at {train_fraction} leaves an empty side"
        )));
    }
    let perm = permutation(n, seed);
    let mut train = perm[..n_train].to_vec();
    let mut test = perm[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Keeps `floor(percent / 100 * len)` of `train`, preserving its order.
/// For a fixed seed the kept sets are nested in `percent`, and 100 keeps
/// everything.
pub fn subsample(train: &[usize], percent: u32, seed: u64) -> Result<Vec<usize>> {
    if !(1..=100).contains(&percent) {
        return Err(Error::Invalid(format!("fraction {percent}% outside 1..=100")));
    }
    let k = percent as usize * train.len() / 100;
    if k == 0 {
        return Err(Error::Invalid(format!("{percent}% of {} samples is empty", train.len())));
    }
    let mut keep = permutation(train.len(), seed)[..k].to_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| train[i]).collect())
}
