use super::corpus::{Patch, Region, Slide};

/// Adds the 90, 180 and 270 degree rotations of every patch when there are
/// fewer than `threshold` patches; otherwise returns the input unchanged.
pub fn rotation_augment(patches: &[Patch], threshold: usize) -> Vec<Patch> {
    if patches.len() >= threshold {
        return patches.to_vec();
    }
    let mut out = patches.to_vec();
    for turn in 1..4 {
        out.extend(patches.iter().map(|p| rotate_times(p, turn)));
    }
    out
}

fn rotate_times(p: &Patch, turns: usize) -> Patch {
    (0..turns).fold(p.clone(), |acc, _| acc.rotate90())
}

/// Region-level rotation augmentation: each rotated copy is a new region
/// rotated identically at every scale, so scales stay co-registered.
/// The count compared with `threshold` is the number of patches over all scales.
pub fn augment_slide(slide: &Slide, threshold: usize) -> Slide {
    let total: usize = slide.regions.iter().map(|r| r.patches.len()).sum();
    if total >= threshold {
        return slide.clone();
    }
    let mut next_id = slide.regions.iter().map(|r| r.id + 1).max().unwrap_or(0);
    let mut regions = slide.regions.clone();
    for turn in 1..4 {
        for r in &slide.regions {
            regions.push(Region {
                id: next_id,
                position: r.position,
                signal: r.signal,
                patches: r.patches.iter().map(|(&s, p)| (s, rotate_times(p, turn))).collect(),
            });
            next_id += 1;
        }
    }
    Slide {
        regions,
        ..slide.clone()
    }
}
