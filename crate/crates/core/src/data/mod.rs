//! Slides, bags and the synthetic multi-scale corpus.

mod augment;
mod bags;
mod corpus;
mod manifest;
pub mod pnm;
mod split;
mod synth;

pub use augment::{augment_slide, rotation_augment};
pub use bags::extract_bags;
pub use corpus::{Bag, ClassLabel, Instance, Patch, Region, Slide};
pub use manifest::{export_corpus, ingest_patch_directory, patch_path, MANIFEST_FILE};
pub use split::{class_counts, k_fold, split_dataset, Split};
pub use synth::{
    derive_seed, generate_slide, generate_synthetic_corpus, slide_recipe, CorpusConfig, SignalKind,
    SlideRecipe, Stain, COARSE_SCALE, FINE_SCALE,
};
