//! Synthetic angiogram data, degradation, resampling and registration.

mod dataset;
mod degrade;
mod image;
pub mod io;
mod phantom;
mod registration;
mod resize;

pub use dataset::{
    load_dataset, make_dataset, make_group, write_dataset, GroupSeeds, Manifest, ManifestEntry,
    SampleGroup, MANIFEST_NAME,
};
pub use degrade::{degrade, degrade_with, DegradeConfig};
pub use image::{Image, MIN_SIDE};
pub use phantom::generate_phantom;
pub use registration::{
    crop_overlap, overlap_rect, phase_correlate, register_crop, Shift, MIN_OVERLAP,
};
pub use resize::{bicubic_matrix, bicubic_plan, bicubic_resize, resize_plane, ScaleFactor};
