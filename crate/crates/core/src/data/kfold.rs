use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded shuffle, then contiguous partition into `k` folds (the first
/// `n % k` folds get one extra id). Returns `(train, val)` for `fold`.
pub fn kfold_split<T: Clone>(ids: &[T], k: usize, fold: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if k < 2 {
        return Err(Error::Parameter(format!("k must be >= 2, got {k}")));
    }
    if fold >= k {
        return Err(Error::Parameter(format!("fold {fold} out of range for k = {k}")));
    }
    if ids.len() < k {
        return Err(Error::Parameter(format!("{} ids cannot fill {k} folds", ids.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = ids.len() / k;
    let extra = ids.len() % k;
    let start = fold * base + fold.min(extra);
    let len = base + usize::from(fold < extra);
    let mut train = Vec::with_capacity(ids.len() - len);
    let mut val = Vec::with_capacity(len);
    for (pos, &i) in order.iter().enumerate() {
        if (start..start + len).contains(&pos) {
            val.push(ids[i].clone());
        } else {
            train.push(ids[i].clone());
        }
    }
    Ok((train, val))
}
