use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{ClassLabel, Patch, Region, Slide};
use crate::error::{Error, Result};

/// Scale id of the coarse (downsampled, wide field of view) patches.
pub const COARSE_SCALE: usize = 1;
/// Scale id of the fine (full resolution, centre crop) patches.
pub const FINE_SCALE: usize = 2;

/// Parameters of the synthetic slide generator and of bag construction.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub slides_per_class: usize,
    /// Number of scales, 1 (coarse only) or 2 (coarse and fine).
    pub scales: usize,
    pub patch_size: usize,
    pub regions_per_slide: usize,
    pub bag_size: usize,
    pub max_bags: usize,
    /// Fraction of regions carrying class signal in positive slides.
    pub tumor_rate: f64,
    /// Half-width of the per-slide stain gain and bias ranges.
    pub shift_strength: f64,
    /// Positive slides carry signal at only one scale, alternating fine and coarse.
    pub scale_split: bool,
    /// Amplitude of the fine-scale stripe texture.
    pub fine_amplitude: f64,
    /// Darkening applied inside the coarse-scale blobs.
    pub coarse_amplitude: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            slides_per_class: 40,
            scales: 2,
            patch_size: 32,
            regions_per_slide: 100,
            bag_size: 20,
            max_bags: 10,
            tumor_rate: 0.2,
            shift_strength: 0.0,
            scale_split: false,
            fine_amplitude: 0.12,
            coarse_amplitude: 0.3,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("slides_per_class", self.slides_per_class),
            ("scales", self.scales),
            ("regions_per_slide", self.regions_per_slide),
            ("bag_size", self.bag_size),
            ("max_bags", self.max_bags),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.scales > 2 {
            return Err(Error::Config(format!(
                "the synthetic generator renders at most 2 scales, got {}",
                self.scales
            )));
        }
        if self.patch_size < 8 || self.patch_size % 4 != 0 {
            return Err(Error::Config(format!(
                "patch_size must be a multiple of 4 and at least 8, got {}",
                self.patch_size
            )));
        }
        if !(self.tumor_rate > 0.0 && self.tumor_rate < 1.0) {
            return Err(Error::Config(format!("tumor_rate must lie in (0, 1), got {}", self.tumor_rate)));
        }
        for (name, v) in [
            ("shift_strength", self.shift_strength),
            ("fine_amplitude", self.fine_amplitude),
            ("coarse_amplitude", self.coarse_amplitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    /// Scale ids rendered by the generator.
    pub fn scale_ids(&self) -> Vec<usize> {
        (1..=self.scales).collect()
    }

    /// Number of regions carrying signal in a positive slide.
    pub fn signal_regions(&self) -> usize {
        ((self.tumor_rate * self.regions_per_slide as f64).round() as usize).clamp(1, self.regions_per_slide)
    }
}

/// SplitMix64 finalizer applied to `master + stream·φ`; gives every slide an
/// independent seed so slides can be generated in any order.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Which scale carries class signal in a positive slide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalKind {
    Both,
    FineOnly,
    CoarseOnly,
}

/// Per-channel affine colour transform of one slide.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stain {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
}

impl Stain {
    pub const IDENTITY: Stain = Stain {
        gain: [1.0; 3],
        bias: [0.0; 3],
    };

    fn sample<R: Rng>(strength: f64, rng: &mut R) -> Stain {
        let mut s = Stain::IDENTITY;
        for c in 0..3 {
            s.gain[c] = 1.0 + strength * rng.gen_range(-1.0..=1.0);
            s.bias[c] = strength * rng.gen_range(-1.0..=1.0);
        }
        s
    }
}

/// Generator-side facts about a slide that the slide itself does not record.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideRecipe {
    pub label: ClassLabel,
    pub signal: Option<SignalKind>,
    pub stain: Stain,
    pub seed: u64,
}

/// Label, signal kind, stain and seed of slide `index`.
pub fn slide_recipe(cfg: &CorpusConfig, index: usize) -> SlideRecipe {
    let seed = derive_seed(cfg.seed, index as u64);
    let positive = index < cfg.slides_per_class;
    let label = if positive { ClassLabel::Positive } else { ClassLabel::Negative };
    let signal = positive.then(|| match (cfg.scale_split, index % 2) {
        (false, _) => SignalKind::Both,
        (true, 0) => SignalKind::FineOnly,
        (true, _) => SignalKind::CoarseOnly,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stain = Stain::sample(cfg.shift_strength, &mut rng);
    SlideRecipe {
        label,
        signal,
        stain,
        seed,
    }
}

/// Builds the full synthetic corpus: positives first, then negatives.
pub fn generate_synthetic_corpus(cfg: &CorpusConfig) -> Result<Vec<Slide>> {
    cfg.validate()?;
    (0..2 * cfg.slides_per_class).map(|i| generate_slide(cfg, i)).collect()
}

pub fn generate_slide(cfg: &CorpusConfig, index: usize) -> Result<Slide> {
    cfg.validate()?;
    let recipe = slide_recipe(cfg, index);
    // The stain draw is the first use of this stream; the rest continues from it.
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    Stain::sample(cfg.shift_strength, &mut rng);

    let n = cfg.regions_per_slide;
    let cols = (n as f64).sqrt().ceil() as usize;
    let positions: Vec<(usize, usize)> = (0..n).map(|i| (i / cols, i % cols)).collect();
    let signal = match recipe.signal {
        Some(_) => clustered_cells(&positions, cfg.signal_regions(), &mut rng),
        None => vec![false; n],
    };

    let mut canvas = Canvas::new(2 * cfg.patch_size);
    let regions = (0..n)
        .map(|id| {
            let kind = if signal[id] { recipe.signal } else { None };
            canvas.render(cfg, kind, &mut rng);
            canvas.apply_stain(&recipe.stain);
            let mut patches = BTreeMap::new();
            patches.insert(COARSE_SCALE, canvas.downsampled());
            if cfg.scales >= 2 {
                patches.insert(FINE_SCALE, canvas.centre_crop());
            }
            Region {
                id,
                position: Some(positions[id]),
                signal: Some(signal[id]),
                patches,
            }
        })
        .collect();

    Ok(Slide {
        id: format!("slide-{index:03}"),
        label: recipe.label,
        domain: index,
        regions,
    })
}

/// Marks the `count` cells nearest to a random seed cell.
fn clustered_cells<R: Rng>(positions: &[(usize, usize)], count: usize, rng: &mut R) -> Vec<bool> {
    let seed = positions[rng.gen_range(0..positions.len())];
    let mut order: Vec<usize> = (0..positions.len()).collect();
    let dist = |i: usize| {
        let (y, x) = positions[i];
        let dy = y as i64 - seed.0 as i64;
        let dx = x as i64 - seed.1 as i64;
        dy * dy + dx * dx
    };
    order.sort_by_key(|&i| (dist(i), i));
    let mut marks = vec![false; positions.len()];
    for &i in &order[..count] {
        marks[i] = true;
    }
    marks
}

const TISSUE: [f64; 3] = [0.80, 0.55, 0.70];
const SMOOTH_AMPLITUDE: f64 = 0.08;
const GRAIN_AMPLITUDE: f64 = 0.03;

/// Float RGB canvas of side 2p holding one region before it is cut into patches.
struct Canvas {
    side: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(side: usize) -> Self {
        Canvas {
            side,
            px: vec![[0.0; 3]; side * side],
        }
    }

    fn render<R: Rng>(&mut self, cfg: &CorpusConfig, signal: Option<SignalKind>, rng: &mut R) {
        let side = self.side;
        // Smooth background: bilinear interpolation of a 4x4 lattice of offsets.
        const LATTICE: usize = 4;
        let mut lattice = [[0.0f64; 3]; LATTICE * LATTICE];
        for cell in lattice.iter_mut() {
            for v in cell.iter_mut() {
                *v = SMOOTH_AMPLITUDE * rng.gen_range(-1.0..=1.0);
            }
        }
        let step = (side - 1) as f64 / (LATTICE - 1) as f64;
        for y in 0..side {
            let fy = y as f64 / step;
            let y0 = (fy as usize).min(LATTICE - 2);
            let ty = fy - y0 as f64;
            for x in 0..side {
                let fx = x as f64 / step;
                let x0 = (fx as usize).min(LATTICE - 2);
                let tx = fx - x0 as f64;
                let px = &mut self.px[y * side + x];
                for c in 0..3 {
                    let a = lattice[y0 * LATTICE + x0][c];
                    let b = lattice[y0 * LATTICE + x0 + 1][c];
                    let d = lattice[(y0 + 1) * LATTICE + x0][c];
                    let e = lattice[(y0 + 1) * LATTICE + x0 + 1][c];
                    let smooth = (a * (1.0 - tx) + b * tx) * (1.0 - ty) + (d * (1.0 - tx) + e * tx) * ty;
                    px[c] = TISSUE[c] + smooth + GRAIN_AMPLITUDE * rng.gen_range(-1.0..=1.0);
                }
            }
        }

        let (fine, coarse) = match signal {
            None => (false, false),
            Some(SignalKind::Both) => (true, true),
            Some(SignalKind::FineOnly) => (true, false),
            Some(SignalKind::CoarseOnly) => (false, true),
        };
        if fine {
            // Period-2 stripes: averaged away by the 2x box filter of the coarse scale.
            for (i, px) in self.px.iter_mut().enumerate() {
                let sign = if (i % side) % 2 == 0 { 1.0 } else { -1.0 };
                for v in px.iter_mut() {
                    *v += sign * cfg.fine_amplitude;
                }
            }
        }
        if coarse {
            // Dark discs in the four corners, all outside the centre crop.
            let r = side as f64 / 8.0;
            let centres = [r, side as f64 - r];
            for y in 0..side {
                for x in 0..side {
                    let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
                    let inside = centres
                        .iter()
                        .any(|&oy| centres.iter().any(|&ox| (cy - oy).powi(2) + (cx - ox).powi(2) < r * r));
                    if inside {
                        for v in self.px[y * side + x].iter_mut() {
                            *v -= cfg.coarse_amplitude;
                        }
                    }
                }
            }
        }
    }

    fn apply_stain(&mut self, stain: &Stain) {
        for px in self.px.iter_mut() {
            for c in 0..3 {
                px[c] = stain.gain[c] * px[c] + stain.bias[c];
            }
        }
    }

    fn centre_crop(&self) -> Patch {
        let p = self.side / 2;
        let off = p / 2;
        let mut rgb = Vec::with_capacity(p * p * 3);
        for y in 0..p {
            for x in 0..p {
                rgb.extend(self.px[(y + off) * self.side + x + off].map(quantize));
            }
        }
        Patch::new(p, rgb).expect("crop size")
    }

    fn downsampled(&self) -> Patch {
        let p = self.side / 2;
        let s = self.side;
        let mut rgb = Vec::with_capacity(p * p * 3);
        for y in 0..p {
            for x in 0..p {
                let at = |dy: usize, dx: usize| self.px[(2 * y + dy) * s + 2 * x + dx];
                let (a, b, c, d) = (at(0, 0), at(0, 1), at(1, 0), at(1, 1));
                for ch in 0..3 {
                    rgb.push(quantize(0.25 * (a[ch] + b[ch] + c[ch] + d[ch])));
                }
            }
        }
        Patch::new(p, rgb).expect("downsample size")
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
