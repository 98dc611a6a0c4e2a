//! Bi-temporal samples, the paired on-disk layout and the synthetic scene
//! generator.

mod dataset;
mod sample;
mod synth;

pub use dataset::{
    crop_sample, load_sample, read_rgb, scan_dataset, tile_origins, tile_sample, write_binary_png, write_dataset,
    DatasetManifest, Split, Triple,
};
pub use sample::{BiTemporalSample, ChangeLabel, LabelPolarity};
pub use synth::{synth_generate, write_synthetic, NuisanceSpec, SynthMeta};
