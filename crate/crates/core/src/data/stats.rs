use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ImageRecord;
use crate::error::{Error, Result};

/// Area thresholds of the size buckets: small below 32², large from 96².
pub const MEDIUM_MIN_AREA: f64 = 32.0 * 32.0;
pub const LARGE_MIN_AREA: f64 = 96.0 * 96.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeBuckets {
    pub small: usize,
    pub medium: usize,
    pub large: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_images: usize,
    pub num_objects: usize,
    pub num_categories: usize,
    /// Images containing at least one object of the category.
    pub images_per_category: BTreeMap<String, usize>,
    pub objects_per_category: BTreeMap<String, usize>,
    /// Number of images holding exactly `k` objects, keyed by `k`.
    pub objects_per_image: BTreeMap<usize, usize>,
    pub size_buckets: SizeBuckets,
}

pub fn compute_stats(records: &[ImageRecord]) -> Result<DatasetStats> {
    if records.is_empty() {
        return Err(Error::invalid("compute_stats", "no images"));
    }
    let mut s = DatasetStats {
        num_images: records.len(),
        ..DatasetStats::default()
    };
    for r in records {
        *s.objects_per_image.entry(r.objects.len()).or_default() += 1;
        let mut seen = BTreeSet::new();
        for o in &r.objects {
            s.num_objects += 1;
            *s.objects_per_category.entry(o.name.clone()).or_default() += 1;
            if seen.insert(o.name.as_str()) {
                *s.images_per_category.entry(o.name.clone()).or_default() += 1;
            }
            let a = o.bbox.area();
            if a < MEDIUM_MIN_AREA {
                s.size_buckets.small += 1;
            } else if a < LARGE_MIN_AREA {
                s.size_buckets.medium += 1;
            } else {
                s.size_buckets.large += 1;
            }
        }
    }
    s.num_categories = s.objects_per_category.len();
    Ok(s)
}
