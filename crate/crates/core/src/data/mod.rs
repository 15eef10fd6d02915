//! Volume I/O, resolution simulation, normalisation, splitting and patching.

mod patches;
pub mod phantom;
mod resample;
mod split;
mod volume;

pub use patches::{
    aggregate_patches, crop, extract_patches, pad_to, random_origins, tile_origins, PatchSample, DEFAULT_OVERLAP,
    DEFAULT_PATCH,
};
pub use resample::{fourier_resample, simulate_lowres, sinc_upsample};
pub(crate) use resample::regridded;
pub use split::{split_dataset, SplitManifest};
pub use volume::{
    denormalize, load_series, normalize, normalize_with, read_bvals, read_bvecs, save_series, write_bvals, write_bvecs, DwiStudy,
    IntensityScale, Volume, B0_THRESHOLD,
};
