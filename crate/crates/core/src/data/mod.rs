//! Dataset ingestion, synthetic rendering, charsets, subsetting and batching.

mod batch;
mod charset;
mod image;
mod manifest;
mod render;

pub use batch::{make_batches, stack, BatchSampler, Dataset, LabeledBatch};
pub use charset::{Charset, Special};
pub use image::{bilinear, TextImage, INPUT_HEIGHT, INPUT_WIDTH};
pub use manifest::{
    split_validation, subset_labels, subset_size, Manifest, ManifestEntry, Subset, SubsetRecord, ValidationReport,
    LABELS_FILE,
};
pub use render::{available_fonts, render_synthetic, RenderSpec};
