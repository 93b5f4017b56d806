//! Synthetic paired-view data: generation, splitting, batching, caching.

pub mod cache;
mod generate;
mod split;

pub use generate::{generate, largest_remainder, rng_for, CueLayout, Dataset, GenSpec, Image, SamplePair};
pub use split::{
    attach_spacing_channel, batches, split, view_batch, DatasetSplit, SpacingNorm, SplitPart, View,
};
