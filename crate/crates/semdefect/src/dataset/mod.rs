//! Manifest-driven ingestion, preprocessing geometry, wafer-aware splits,
//! few-shot sampling and the synthetic defect-image generator.

mod manifest;
mod raster;
mod split;
mod synth;

pub use manifest::{
    load_manifest, manifest_from_str, save_manifest, ClassSet, ImageRecord, Manifest, Split,
};
pub use raster::{bilinear_resize, preprocess_image, CropSpec, Raster};
pub use split::{sample_few_shot, wafer_aware_split, FewShotSample, SplitOutcome};
pub use synth::{generate_synthetic, Separation, SynthOutput, SynthSpec, MOTIF_COUNT};

pub(crate) use split::derive_seed;
