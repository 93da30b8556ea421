use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{Bag, Instance, Slide};
use super::synth::derive_seed;
use crate::error::{Error, Result};

/// Cuts a slide into at most `max_bags` bags of `bag_size` regions.
///
/// Regions are drawn without replacement from one seeded permutation, so bags
/// of a slide are disjoint. Every instance keeps its patches at all scales,
/// which keeps the scales co-registered.
pub fn extract_bags(slide: &Slide, bag_size: usize, max_bags: usize, seed: u64) -> Result<Vec<Bag>> {
    if bag_size == 0 || max_bags == 0 {
        return Err(Error::Config("bag_size and max_bags must be positive".into()));
    }
    if slide.regions.len() < bag_size {
        return Err(Error::Data(format!(
            "slide {} has {} regions, fewer than the bag size {bag_size}",
            slide.id,
            slide.regions.len()
        )));
    }
    let count = (slide.regions.len() / bag_size).min(max_bags);
    let mut order: Vec<usize> = (0..slide.regions.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, slide.domain as u64));
    order.shuffle(&mut rng);

    Ok(order
        .chunks_exact(bag_size)
        .take(count)
        .enumerate()
        .map(|(b, chunk)| Bag {
            id: format!("{}/bag-{b:02}", slide.id),
            slide_id: slide.id.clone(),
            label: slide.label,
            domain: slide.domain,
            instances: chunk
                .iter()
                .map(|&r| {
                    let region = &slide.regions[r];
                    Instance {
                        region_id: region.id,
                        position: region.position,
                        signal: region.signal,
                        patches: region.patches.clone(),
                    }
                })
                .collect(),
        })
        .collect())
}
