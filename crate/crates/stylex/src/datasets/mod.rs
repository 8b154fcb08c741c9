//! Dataset synthesis and ingestion.
//!
//! - [`glyphs`] — procedural stroke glyphs with known style factors
//! - [`idx`] — big-endian IDX image/label files (the MNIST format)
//! - [`store`] — deterministic on-disk splits: binary blobs + JSON manifest

pub mod glyphs;
pub mod idx;
pub mod store;

pub use glyphs::{render_glyph, sample_style_factors, GlyphSample, StyleFactors};
pub use idx::{load_idx, write_idx_images, write_idx_labels};
pub use store::{
    build_dataset, ingest_mnist, load_split, DatasetBuildConfig, DatasetManifest, LoadedSplit,
    Split,
};
