use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::{write_png, Decoders};
use super::synth::SynthCorpus;
use super::voc::{parse_voc_xml, to_voc_xml};
use super::ImageRecord;
use crate::boxes::BBox;
use crate::detector::Sample;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;

pub const IMAGE_DIR: &str = "images";
pub const ANNOTATION_DIR: &str = "annotations";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Class list and named splits of image ids (file stems).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Writes `images/*.png`, `annotations/*.xml` and `manifest.json` under `dir`.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<Manifest> {
    let (img_dir, ann_dir) = (dir.join(IMAGE_DIR), dir.join(ANNOTATION_DIR));
    for d in [&img_dir, &ann_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut manifest = Manifest {
        classes: corpus.classes.clone(),
        splits: BTreeMap::new(),
    };
    for (split, images) in [("train", &corpus.train), ("test", &corpus.test)] {
        images.par_iter().try_for_each(|s| -> Result<()> {
            write_png(&img_dir.join(format!("{}.png", s.name)), &s.image)?;
            let xml_path = ann_dir.join(format!("{}.xml", s.name));
            std::fs::write(&xml_path, to_voc_xml(&s.record)).map_err(|e| Error::io(&xml_path, e))
        })?;
        manifest
            .splits
            .insert(split.into(), images.iter().map(|s| s.name.clone()).collect());
    }
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// An annotated image directory: `annotations/<id>.xml` plus the images they
/// name under `images/`. With a manifest, its class order and splits are
/// used; otherwise classes are the sorted set of names found and the only
/// split is `all`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub records: Vec<ImageRecord>,
    pub splits: BTreeMap<String, Vec<usize>>,
    pub decoders: Decoders,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let ann_dir = root.join(ANNOTATION_DIR);
        let manifest_path = root.join(MANIFEST_FILE);
        let manifest = if manifest_path.exists() {
            Some(Manifest::load(&manifest_path)?)
        } else {
            None
        };
        let ids: Vec<String> = match &manifest {
            Some(m) => {
                let mut seen = BTreeSet::new();
                m.splits.values().flatten().filter(|id| seen.insert(id.as_str())).cloned().collect()
            }
            None => {
                let entries = std::fs::read_dir(&ann_dir).map_err(|e| Error::io(&ann_dir, e))?;
                let mut ids = Vec::new();
                for entry in entries {
                    let path = entry.map_err(|e| Error::io(&ann_dir, e))?.path();
                    if path.extension().is_some_and(|e| e == "xml") {
                        ids.push(path.file_stem().unwrap_or_default().to_string_lossy().into_owned());
                    }
                }
                ids.sort();
                ids
            }
        };
        if ids.is_empty() {
            return Err(Error::invalid("Dataset::load", format!("no annotations under {}", root.display())));
        }
        let records: Vec<ImageRecord> = ids
            .par_iter()
            .map(|id| parse_voc_xml(&ann_dir.join(format!("{id}.xml"))))
            .collect::<Result<_>>()?;
        let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();

        let (classes, splits) = match manifest {
            Some(m) => {
                let splits = m
                    .splits
                    .iter()
                    .map(|(name, members)| (name.clone(), members.iter().map(|id| index[id.as_str()]).collect()))
                    .collect();
                (m.classes, splits)
            }
            None => {
                let names: BTreeSet<&str> = records.iter().flat_map(|r| r.objects.iter().map(|o| o.name.as_str())).collect();
                let classes = names.into_iter().map(String::from).collect();
                (classes, BTreeMap::from([("all".to_string(), (0..records.len()).collect())]))
            }
        };
        let ds = Self {
            root: root.to_path_buf(),
            classes,
            records,
            splits,
            decoders: Decoders::default(),
        };
        for r in &ds.records {
            for o in &r.objects {
                if ds.class_id(&o.name).is_none() {
                    return Err(Error::invalid(
                        "Dataset::load",
                        format!("{}: category {:?} is not in the class list", r.id(), o.name),
                    ));
                }
            }
        }
        Ok(ds)
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Record indices of a split. `all` is always available.
    pub fn split(&self, name: &str) -> Result<Vec<usize>> {
        match self.splits.get(name) {
            Some(s) => Ok(s.clone()),
            None if name == "all" => Ok((0..self.records.len()).collect()),
            None => Err(Error::invalid(
                "Dataset::split",
                format!("no split {:?}; available: {:?}", name, self.splits.keys().collect::<Vec<_>>()),
            )),
        }
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(IMAGE_DIR).join(&record.image)
    }

    /// Decodes and resizes the given records to the network input size,
    /// scaling their boxes along with the pixels.
    pub fn samples(&self, indices: &[usize], input_h: usize, input_w: usize) -> Result<Vec<Sample>> {
        indices
            .par_iter()
            .map(|&i| {
                let r = &self.records[i];
                let path = self.image_path(r);
                let img = self.decoders.decode(&path)?;
                if (img.width, img.height) != (r.width, r.height) {
                    return Err(Error::Parse {
                        path,
                        reason: format!(
                            "image is {}x{} but its annotation says {}x{}",
                            img.width, img.height, r.width, r.height
                        ),
                    });
                }
                let (sx, sy) = (input_w as f64 / r.width as f64, input_h as f64 / r.height as f64);
                Ok(Sample {
                    image: img.to_tensor(input_h, input_w),
                    boxes: r.objects.iter().map(|o| o.bbox.scale(sx, sy)).collect(),
                    classes: r.objects.iter().map(|o| self.class_id(&o.name).expect("checked on load")).collect(),
                })
            })
            .collect()
    }

    /// Ground truth in original image pixels.
    pub fn ground_truths(&self, indices: &[usize]) -> Vec<GroundTruth> {
        indices
            .iter()
            .flat_map(|&i| {
                let r = &self.records[i];
                r.objects.iter().map(move |o| GroundTruth {
                    image_id: r.id(),
                    class_id: self.class_id(&o.name).expect("checked on load"),
                    bbox: o.bbox,
                })
            })
            .collect()
    }
}

/// Maps a box from network-input pixels back to the original image.
pub fn to_original(b: &BBox, record: &ImageRecord, input_h: usize, input_w: usize) -> BBox {
    b.scale(record.width as f64 / input_w as f64, record.height as f64 / input_h as f64)
}
