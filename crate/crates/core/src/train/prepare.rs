use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::data::{augment_slide, derive_seed, extract_bags, ClassLabel, Slide};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stream of parameter initialisation.
pub const STREAM_INIT: u64 = 1 << 32;
/// Stream of bag membership.
pub const STREAM_BAGS: u64 = 2 << 32;
/// Stream of visiting order and instance shuffling.
pub const STREAM_ORDER: u64 = 3 << 32;

const STREAM_PROBE: u64 = 5 << 32;

/// Generator of the domain probe at `scale`.
pub fn probe_rng(seed: u64, scale: usize) -> ChaCha8Rng {
    stream_rng(seed, STREAM_PROBE, scale as u64)
}

/// Generator for `stream`, sub-stream `sub` (the scale, or a model offset).
pub fn stream_rng(seed: u64, stream: u64, sub: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream + sub))
}

/// A bag ready for training: instance batches per scale and the domain
/// index of its slide within the training set.
#[derive(Clone, Debug)]
pub struct TrainingBag<T> {
    pub id: String,
    pub label: ClassLabel,
    pub domain: usize,
    pub batches: BTreeMap<usize, Tensor<T>>,
}

/// Builds the training bags of every slide, grouped by slide. Slide `i`
/// becomes domain `i`. `round` selects the bag sampling round, so resampling
/// draws new memberships per epoch.
pub fn training_bags<T: Scalar>(
    slides: &[&Slide],
    scales: &[usize],
    cfg: &TrainConfig,
    round: u64,
) -> Result<Vec<Vec<TrainingBag<T>>>> {
    if slides.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let bag_seed = derive_seed(cfg.seed, STREAM_BAGS + round);
    slides
        .iter()
        .enumerate()
        .map(|(domain, slide)| {
            let slide = augment_slide(slide, cfg.augment_threshold);
            extract_bags(&slide, cfg.bag_size, cfg.max_bags, bag_seed)?
                .into_iter()
                .map(|bag| {
                    let batches = scales
                        .iter()
                        .map(|&s| Ok((s, bag.batch::<T>(s)?)))
                        .collect::<Result<_>>()?;
                    Ok(TrainingBag {
                        id: bag.id,
                        label: bag.label,
                        domain,
                        batches,
                    })
                })
                .collect()
        })
        .collect()
}

/// Visiting order for one epoch: slides shuffled, then bags within each slide.
pub fn epoch_order<R: rand::Rng>(groups: &[Vec<impl Sized>], rng: &mut R) -> Vec<(usize, usize)> {
    let mut slides: Vec<usize> = (0..groups.len()).collect();
    slides.shuffle(rng);
    let mut order = Vec::new();
    for s in slides {
        let mut bags: Vec<usize> = (0..groups[s].len()).collect();
        bags.shuffle(rng);
        order.extend(bags.into_iter().map(|b| (s, b)));
    }
    order
}

/// Rows of `t` (viewed as `[n, rest]`) in the order `perm`.
pub fn permute_rows<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(t.len());
    for &i in perm {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(t.shape().to_vec(), data).expect("permutation keeps the shape")
}

pub fn shuffled_rows<T: Scalar, R: rand::Rng>(t: &Tensor<T>, rng: &mut R) -> Tensor<T> {
    let mut perm: Vec<usize> = (0..t.shape()[0]).collect();
    perm.shuffle(rng);
    permute_rows(t, &perm)
}

/// Mean of finite per-step values; NaN for no steps.
pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub(crate) fn check_finite(bag: &str, name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{name} is {value} in bag {bag}")))
    }
}
