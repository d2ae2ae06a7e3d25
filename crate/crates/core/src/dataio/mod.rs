//! Raster, manifest and checkpoint I/O.

pub mod checkpoint;
pub mod manifest;
pub mod raster;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use manifest::{load_drive_layout, load_manifest, DatasetManifest, ManifestEntry, Split};
pub use raster::{load_image, load_mask, BinaryMask, FundusImage, DEFAULT_MASK_THRESHOLD};
