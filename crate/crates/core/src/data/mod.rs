//! Dataset ingestion, synthetic defect-dataset generation, image codecs,
//! and heatmap rendering.

pub mod dataset;
pub mod images;
pub mod render;
pub mod synth;

pub use dataset::{scan_dataset, DatasetIndex, Label, Sample};
pub use images::{load_image, load_mask, save_gray, save_rgb};
pub use render::render_heatmap;
pub use synth::{generate_synthetic, DefectFamily, SyntheticSpec, TextureFamily};
