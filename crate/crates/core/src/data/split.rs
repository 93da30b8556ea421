use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{ClassLabel, Slide};
use crate::error::{Error, Result};

/// Slide indices of a train/validation/test partition.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn select<'a>(slides: &'a [Slide], idx: &[usize]) -> Vec<&'a Slide> {
        idx.iter().map(|&i| &slides[i]).collect()
    }
}

fn by_class(slides: &[Slide], seed: u64) -> [Vec<usize>; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = [Vec::new(), Vec::new()];
    for (i, s) in slides.iter().enumerate() {
        groups[s.label.index()].push(i);
    }
    for g in groups.iter_mut() {
        g.shuffle(&mut rng);
    }
    groups
}

/// Slide-level partition stratified by class. Within each class the
/// validation and test shares are rounded and training takes the rest.
pub fn split_dataset(slides: &[Slide], fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    if slides.len() < 3 {
        return Err(Error::Data(format!("cannot split {} slides into three partitions", slides.len())));
    }
    let mut split = Split::default();
    for group in by_class(slides, seed) {
        let n = group.len() as f64;
        let n_val = (n * fv).round() as usize;
        let n_test = ((n * fs).round() as usize).min(group.len() - n_val);
        let n_train = group.len() - n_val - n_test;
        split.train.extend_from_slice(&group[..n_train]);
        split.val.extend_from_slice(&group[n_train..n_train + n_val]);
        split.test.extend_from_slice(&group[n_train + n_val..]);
    }
    for part in [&mut split.train, &mut split.val, &mut split.test] {
        part.sort_unstable();
    }
    Ok(split)
}

/// Stratified k-fold cross validation: `(train, test)` index pairs, one per fold.
pub fn k_fold(slides: &[Slide], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if slides.len() < k {
        return Err(Error::Data(format!("cannot make {k} folds from {} slides", slides.len())));
    }
    let mut folds = vec![Vec::new(); k];
    // Deal each class round-robin, continuing where the previous class stopped.
    let mut next = 0;
    for group in by_class(slides, seed) {
        for i in group {
            folds[next % k].push(i);
            next += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let mut test = folds[f].clone();
            test.sort_unstable();
            let mut train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            train.sort_unstable();
            (train, test)
        })
        .collect())
}

/// Counts of `(negative, positive)` slides among `idx`.
pub fn class_counts(slides: &[Slide], idx: &[usize]) -> (usize, usize) {
    let pos = idx.iter().filter(|&&i| slides[i].label == ClassLabel::Positive).count();
    (idx.len() - pos, pos)
}
