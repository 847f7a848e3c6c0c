//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json        generation spec + item count
//! <dir>/annotations.json     {images: [...], annotations: [...]}
//! <dir>/images/{id:05}.png   lossless rasters
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::synth::generate_scene;
use super::types::{BBox, GroundTruth, SceneSpec};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: SceneSpec,
    pub count: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImageRecord {
    id: u64,
    file: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationRecord {
    image_id: u64,
    class_id: i64,
    /// [cx, cy, w, h], normalized
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationFile {
    images: Vec<ImageRecord>,
    annotations: Vec<AnnotationRecord>,
}

/// A dataset item as loaded from disk or generated in memory.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub id: u64,
    pub image: RgbImage,
    pub gt: GroundTruth,
}

/// An in-memory dataset plus the spec that produced it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Generate `count` scenes directly in memory (no disk round-trip).
    pub fn generate(spec: &SceneSpec, count: u64) -> Result<Dataset> {
        use rayon::prelude::*;
        spec.validate()?;
        let items: Result<Vec<DatasetItem>> = (0..count)
            .into_par_iter()
            .map(|i| {
                let (image, gt) = generate_scene(spec, i)?;
                Ok(DatasetItem { id: i, image, gt })
            })
            .collect();
        Ok(Dataset {
            spec: spec.clone(),
            items: items?,
        })
    }
}

/// Render `count` scenes and persist them. Returns the manifest path.
/// Existing content under `dir` is overwritten.
pub fn write_dataset(spec: &SceneSpec, count: u64, dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::config("refusing to write an empty dataset (n = 0)"));
    }
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::IoAt {
        path: images_dir.clone(),
        source: e,
    })?;

    let mut images = Vec::with_capacity(count as usize);
    let mut annotations = Vec::new();
    for id in 0..count {
        let (img, gt) = generate_scene(spec, id)?;
        let file = format!("{id:05}.png");
        img.save(images_dir.join(&file))?;
        images.push(ImageRecord {
            id,
            file,
            width: img.width(),
            height: img.height(),
        });
        for (b, &c) in gt.boxes.iter().zip(gt.class_ids.iter()) {
            annotations.push(AnnotationRecord {
                image_id: id,
                class_id: c as i64,
                bbox: [b.cx, b.cy, b.w, b.h],
            });
        }
    }

    let ann = AnnotationFile {
        images,
        annotations,
    };
    write_json(&dir.join("annotations.json"), &ann)?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        count,
    };
    let manifest_path = dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::IoAt {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::IoAt {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Load a dataset directory written by [`write_dataset`]. Every listed image
/// must exist and carry at least one annotation; class ids must be valid for
/// the manifest spec.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::data(format!(
            "no dataset at {}: manifest.json missing",
            dir.display()
        )));
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    let ann: AnnotationFile = read_json(&dir.join("annotations.json"))?;
    if ann.images.is_empty() {
        return Err(Error::data(format!(
            "dataset at {} lists no images",
            dir.display()
        )));
    }

    let mut by_image: std::collections::BTreeMap<u64, GroundTruth> = std::collections::BTreeMap::new();
    for rec in &ann.annotations {
        if rec.class_id < 0 || rec.class_id as usize >= manifest.spec.num_classes {
            return Err(Error::UnknownClass {
                id: rec.class_id,
                num_classes: manifest.spec.num_classes,
            });
        }
        let entry = by_image.entry(rec.image_id).or_insert_with(GroundTruth::empty);
        entry
            .boxes
            .push(BBox::new(rec.bbox[0], rec.bbox[1], rec.bbox[2], rec.bbox[3]));
        entry.class_ids.push(rec.class_id as usize);
    }

    let mut items = Vec::with_capacity(ann.images.len());
    for rec in &ann.images {
        let mut gt = by_image
            .remove(&rec.id)
            .ok_or_else(|| Error::MissingAnnotation(rec.id.to_string()))?;
        gt.crowd_density = gt.boxes.len();
        let path = dir.join("images").join(&rec.file);
        let image = image::open(&path)
            .map_err(Error::Image)?
            .to_rgb8();
        if image.width() != rec.width || image.height() != rec.height {
            return Err(Error::data(format!(
                "image {} has size {}x{}, annotations say {}x{}",
                rec.file,
                image.width(),
                image.height(),
                rec.width,
                rec.height
            )));
        }
        items.push(DatasetItem {
            id: rec.id,
            image,
            gt,
        });
    }
    Ok(Dataset {
        spec: manifest.spec,
        items,
    })
}
