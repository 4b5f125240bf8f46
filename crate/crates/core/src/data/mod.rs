//! Synthetic RGB-DSM scenes, their on-disk raster container and batching.

pub mod augment;
pub mod dataset;
pub mod raster;
pub mod synth;

pub use augment::{augment, Transform};
pub use dataset::{generate_splits, make_batch, read_split, split_sizes, write_split, Batch, Split, SplitData};
pub use raster::{Pixels, Raster};
pub use synth::{generate, generate_layers, GenSpec, GeneratedScene, Scene, CLASS_NAMES, NUM_CLASSES};
