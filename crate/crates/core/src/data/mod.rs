//! Dataset ingestion and tooling: VOC-style annotations, PNG images,
//! per-category splits, statistics and a synthetic logo-scene generator.

mod dataset;
mod image;
mod split;
mod stats;
pub mod synth;
mod voc;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;

pub use dataset::{to_original, Dataset, Manifest, ANNOTATION_DIR, IMAGE_DIR, MANIFEST_FILE};
pub use image::{load_image, read_png, write_png, DecodeFn, Decoders, RgbImage};
pub use split::{split_dataset, Split};
pub use stats::{compute_stats, DatasetStats, SizeBuckets, LARGE_MIN_AREA, MEDIUM_MIN_AREA};
pub use synth::{generate_synthetic, write_corpus, SynthConfig, SynthCorpus, SynthImage};
pub use voc::{parse_voc_str, parse_voc_xml, to_voc_xml, OVERFLOW_TOLERANCE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub name: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// One annotated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image: PathBuf,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<LabeledBox>,
}

impl ImageRecord {
    /// Identifier used in detection dumps: the image file stem.
    pub fn id(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}
