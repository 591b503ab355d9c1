use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub k: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Subject-level k-fold split. Test folds are consecutive chunks of
/// `subject_ids` (the first `N mod k` folds get one extra subject);
/// validation subjects are drawn from the rest by a shuffle keyed on
/// `(seed, fold)`; everything else trains.
pub fn kfold_split(subject_ids: &[String], k: usize, n_val: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    let n = subject_ids.len();
    if k < 2 || n_val < 1 {
        return Err(Error::invalid("kfold_split", format!("need k >= 2 and n_val >= 1, got k={k}, n_val={n_val}")));
    }
    let largest_test = n.div_ceil(k);
    if k > n || largest_test + n_val >= n {
        return Err(Error::invalid(
            "kfold_split",
            format!("{n} subjects cannot fill {k} test folds, {n_val} validation subjects and a training set"),
        ));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = subject_ids.iter().find(|s| !seen.insert(s.as_str())) {
        return Err(Error::invalid("kfold_split", format!("duplicate subject id `{dup}`")));
    }
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let test = subject_ids[start..start + size].to_vec();
        let mut rest: Vec<String> = subject_ids[..start].iter().chain(&subject_ids[start + size..]).cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fold as u64);
        rest.shuffle(&mut rng);
        let validation = rest[..n_val].to_vec();
        let mut train = rest[n_val..].to_vec();
        train.sort();
        let mut validation_sorted = validation;
        validation_sorted.sort();
        folds.push(FoldSplit {
            fold_index: fold,
            k,
            train,
            validation: validation_sorted,
            test,
        });
        start += size;
    }
    Ok(folds)
}
